//! Minimal layer library with hand-written backward passes.
//!
//! Parameters live in a flat [`ParamStore`]; layers hold indices into it and
//! cache whatever their backward pass needs during the forward call.

mod activation;
mod conv;
mod layer;
mod linear;
mod norm;
mod optim;

pub use activation::{Dropout, LeakyRelu, Relu, Sigmoid, Softmax};
pub use conv::{Conv2d, ConvTranspose2d};
pub use layer::{Layer, Sequential};
pub use linear::Linear;
pub use norm::BatchNorm2d;
pub use optim::{Adam, AdamConfig};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

/// Forward-pass behaviour switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Normalise with batch statistics and update running averages.
    pub batch_stats: bool,
    /// Sample dropout masks.
    pub dropout: bool,
    /// Keep activations so that `backward` can run.
    pub record: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode { batch_stats: true, dropout: true, record: true };
    /// Training statistics without dropout noise; used by gradient checks.
    pub const TRAIN_NO_DROPOUT: Mode = Mode { batch_stats: true, dropout: false, record: true };
    pub const EVAL: Mode = Mode { batch_stats: false, dropout: false, record: false };
    pub const EVAL_WITH_DROPOUT: Mode = Mode { batch_stats: false, dropout: true, record: false };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// Running statistics are stored alongside weights but never optimised.
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: String, shape: Vec<usize>, value: Vec<T>, trainable: bool) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = if trainable { vec![T::zero(); value.len()] } else { Vec::new() };
        self.params.push(Param { name, shape, value, grad, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn add_normal(
        &mut self,
        name: String,
        shape: Vec<usize>,
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let value = (0..n).map(|_| T::of(dist.sample(rng))).collect();
        self.add(name, shape, value, true)
    }

    pub fn add_const(&mut self, name: String, shape: Vec<usize>, v: f64, trainable: bool) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![T::of(v); n], trainable)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.iter().all(|g| g.is_finite()))
    }
}
