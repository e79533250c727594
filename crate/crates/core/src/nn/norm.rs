use super::{Mode, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Per-channel batch normalisation with learned affine and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    channels: usize,
    cache: Option<Cache<T>>,
}

#[derive(Clone, Debug)]
struct Cache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.gamma"), vec![channels], 1.0, true),
            beta: store.add_const(format!("{name}.beta"), vec![channels], 0.0, true),
            running_mean: store.add_const(format!("{name}.running_mean"), vec![channels], 0.0, false),
            running_var: store.add_const(format!("{name}.running_var"), vec![channels], 1.0, false),
            channels,
            cache: None,
        }
    }

    /// Needs mutable store access to update running statistics in batch-stats mode.
    pub fn forward(&mut self, store: &mut ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let [n, c, _, _] = x.shape();
        assert_eq!(c, self.channels, "batch norm channels");
        let plane = x.plane();
        let count = (n * plane) as f64;
        let eps = T::of(EPS);

        let (mean, var) = if mode.batch_stats {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for i in 0..n {
                for (ci, ch) in x.sample(i).chunks(plane).enumerate() {
                    mean[ci] += T::sum_slice(ch);
                }
            }
            mean.iter_mut().for_each(|m| *m /= T::of(count));
            for i in 0..n {
                for (ci, ch) in x.sample(i).chunks(plane).enumerate() {
                    let mu = mean[ci];
                    let mut acc = [T::zero(); 8];
                    for (k, &v) in ch.iter().enumerate() {
                        acc[k % 8] += (v - mu) * (v - mu);
                    }
                    var[ci] += acc.iter().copied().sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v /= T::of(count));
            let m = T::of(MOMENTUM);
            let unbias = if count > 1.0 { T::of(count / (count - 1.0)) } else { T::one() };
            let rm = &mut store.get_mut(self.running_mean).value;
            for (r, &b) in rm.iter_mut().zip(&mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            let rv = &mut store.get_mut(self.running_var).value;
            for (r, &b) in rv.iter_mut().zip(&var) {
                *r = (T::one() - m) * *r + m * b * unbias;
            }
            (mean, var)
        } else {
            (store.value(self.running_mean).to_vec(), store.value(self.running_var).to_vec())
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gamma = store.value(self.gamma);
        let beta = store.value(self.beta);
        let mut x_hat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let chunks = x.data().chunks(plane).zip(x_hat.data_mut().chunks_mut(plane)).zip(out.data_mut().chunks_mut(plane));
        for (k, ((src, xh), dst)) in chunks.enumerate() {
            let ci = k % c;
            let (mu, is, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            for ((&v, h), o) in src.iter().zip(xh.iter_mut()).zip(dst.iter_mut()) {
                *h = (v - mu) * is;
                *o = g * *h + b;
            }
        }
        self.cache = mode.record.then(|| Cache { x_hat, inv_std, batch_stats: mode.batch_stats });
        out
    }

    pub fn backward(&mut self, store: &mut ParamStore<T>, grad: &Tensor<T>) -> Tensor<T> {
        let Cache { x_hat, inv_std, batch_stats } =
            self.cache.take().expect("batch norm backward without recorded forward");
        let [n, c, _, _] = grad.shape();
        let plane = grad.plane();
        let count = T::of((n * plane) as f64);

        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for (k, (g, xh)) in grad.data().chunks(plane).zip(x_hat.data().chunks(plane)).enumerate() {
            sum_dy[k % c] += T::sum_slice(g);
            sum_dy_xhat[k % c] += T::dot(g, xh);
        }
        {
            let dg = &mut store.get_mut(self.gamma).grad;
            for ci in 0..c {
                dg[ci] += sum_dy_xhat[ci];
            }
        }
        {
            let db = &mut store.get_mut(self.beta).grad;
            for ci in 0..c {
                db[ci] += sum_dy[ci];
            }
        }
        let gamma = store.value(self.gamma);
        let mut dx = Tensor::zeros(grad.shape());
        let chunks = grad.data().chunks(plane).zip(x_hat.data().chunks(plane)).zip(dx.data_mut().chunks_mut(plane));
        for (k, ((g, xh), d)) in chunks.enumerate() {
            let ci = k % c;
            let scale = gamma[ci] * inv_std[ci];
            if batch_stats {
                let (a, b) = (sum_dy[ci] / count, sum_dy_xhat[ci] / count);
                for ((o, &gv), &h) in d.iter_mut().zip(g).zip(xh) {
                    *o = scale * (gv - a - h * b);
                }
            } else {
                for (o, &gv) in d.iter_mut().zip(g) {
                    *o = scale * gv;
                }
            }
        }
        dx
    }
}
