use rand::Rng;

use super::{Mode, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fully connected layer over the flattened `[C, H, W]` sample; output is `[N, out, 1, 1]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    weight: ParamId,
    bias: ParamId,
    in_features: usize,
    out_features: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), vec![out_features, in_features], init_std, rng);
        let bias = store.add_const(format!("{name}.bias"), vec![out_features], 0.0, true);
        Self { weight, bias, in_features, out_features, input: None }
    }

    pub fn forward(&mut self, store: &ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let n = x.batch();
        assert_eq!(x.sample_len(), self.in_features, "linear input features");
        let mut out = Tensor::zeros([n, self.out_features, 1, 1]);
        let bias = store.value(self.bias);
        for row in out.data_mut().chunks_mut(self.out_features) {
            row.copy_from_slice(bias);
        }
        T::gemm(false, true, n, self.out_features, self.in_features, T::one(), x.data(), store.value(self.weight), T::one(), out.data_mut());
        self.input = mode.record.then(|| x.clone());
        out
    }

    pub fn backward(&mut self, store: &mut ParamStore<T>, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("linear backward without recorded forward");
        let n = x.batch();
        T::gemm(true, false, self.out_features, self.in_features, n, T::one(), grad.data(), x.data(), T::one(), &mut store.get_mut(self.weight).grad);
        {
            let db = &mut store.get_mut(self.bias).grad;
            for row in grad.data().chunks(self.out_features) {
                for (b, &g) in db.iter_mut().zip(row) {
                    *b += g;
                }
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(false, false, n, self.in_features, self.out_features, T::one(), grad.data(), store.value(self.weight), T::zero(), dx.data_mut());
        dx
    }
}
