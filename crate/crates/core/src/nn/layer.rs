use super::{BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, LeakyRelu, Linear, Mode, ParamStore, Relu, Sigmoid, Softmax};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    ConvTranspose(ConvTranspose2d<T>),
    BatchNorm(BatchNorm2d<T>),
    Relu(Relu<T>),
    LeakyRelu(LeakyRelu<T>),
    Dropout(Dropout<T>),
    Linear(Linear<T>),
    Softmax(Softmax<T>),
    Sigmoid(Sigmoid<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&mut self, store: &mut ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        match self {
            Layer::Conv(l) => l.forward(store, x, mode),
            Layer::ConvTranspose(l) => l.forward(store, x, mode),
            Layer::BatchNorm(l) => l.forward(store, x, mode),
            Layer::Relu(l) => l.forward(x, mode),
            Layer::LeakyRelu(l) => l.forward(x, mode),
            Layer::Dropout(l) => l.forward(x, mode),
            Layer::Linear(l) => l.forward(store, x, mode),
            Layer::Softmax(l) => l.forward(x, mode),
            Layer::Sigmoid(l) => l.forward(x, mode),
        }
    }

    pub fn backward(&mut self, store: &mut ParamStore<T>, grad: &Tensor<T>) -> Tensor<T> {
        match self {
            Layer::Conv(l) => l.backward(store, grad),
            Layer::ConvTranspose(l) => l.backward(store, grad),
            Layer::BatchNorm(l) => l.backward(store, grad),
            Layer::Relu(l) => l.backward(grad),
            Layer::LeakyRelu(l) => l.backward(grad),
            Layer::Dropout(l) => l.backward(grad),
            Layer::Linear(l) => l.backward(store, grad),
            Layer::Softmax(l) => l.backward(grad),
            Layer::Sigmoid(l) => l.backward(grad),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Sequential<T> {
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: Layer<T>) {
        self.layers.push(layer);
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn forward(&mut self, store: &mut ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(store, &cur, mode);
        }
        cur
    }

    pub fn backward(&mut self, store: &mut ParamStore<T>, grad: &Tensor<T>) -> Tensor<T> {
        let mut cur = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(store, &cur);
        }
        cur
    }
}
