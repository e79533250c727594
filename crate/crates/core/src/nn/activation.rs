use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct Relu<T> {
    out: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = x.map(|v| v.max(T::zero()));
        self.out = mode.record.then(|| y.clone());
        y
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let y = self.out.take().expect("relu backward without recorded forward");
        let data = grad
            .data()
            .iter()
            .zip(y.data())
            .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
            .collect();
        Tensor::from_vec(grad.shape(), data)
    }
}

#[derive(Clone, Debug)]
pub struct LeakyRelu<T> {
    slope: T,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> LeakyRelu<T> {
    pub fn new(slope: f64) -> Self {
        Self { slope: T::of(slope), input: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let s = self.slope;
        let y = x.map(|v| if v > T::zero() { v } else { v * s });
        self.input = mode.record.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("leaky relu backward without recorded forward");
        let data = grad
            .data()
            .iter()
            .zip(x.data())
            .map(|(&g, &v)| if v > T::zero() { g } else { g * self.slope })
            .collect();
        Tensor::from_vec(grad.shape(), data)
    }
}

/// Inverted dropout with its own seeded generator, so a network replays the
/// same masks for the same call sequence.
#[derive(Clone, Debug)]
pub struct Dropout<T> {
    p: f64,
    rng: ChaCha8Rng,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(p: f64, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
        Self { p, rng: ChaCha8Rng::seed_from_u64(seed), mask: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        if !mode.dropout || self.p == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = T::of(1.0 / (1.0 - self.p));
        // 16-bit uniforms: p is resolved to 1/65536, plenty for a regulariser.
        let threshold = (self.p * 65536.0).round() as u16;
        let mut bytes = vec![0u8; 2 * x.len()];
        self.rng.fill_bytes(&mut bytes);
        let mask: Vec<T> = bytes
            .chunks_exact(2)
            .map(|b| if u16::from_le_bytes([b[0], b[1]]) < threshold { T::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        if mode.record {
            self.mask = Some(mask);
        }
        Tensor::from_vec(x.shape(), data)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        match self.mask.take() {
            Some(mask) => {
                let data = grad.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                Tensor::from_vec(grad.shape(), data)
            }
            None => grad.clone(),
        }
    }
}

/// Softmax across channels at every pixel.
#[derive(Clone, Debug, Default)]
pub struct Softmax<T> {
    out: Option<Tensor<T>>,
}

impl<T: Scalar> Softmax<T> {
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let [n, c, _, _] = x.shape();
        let plane = x.plane();
        let mut y = Tensor::zeros(x.shape());
        for i in 0..n {
            let src = x.sample(i);
            let dst = y.sample_mut(i);
            for p in 0..plane {
                let max = (0..c).map(|ci| src[ci * plane + p]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for ci in 0..c {
                    let e = (src[ci * plane + p] - max).exp();
                    dst[ci * plane + p] = e;
                    total += e;
                }
                for ci in 0..c {
                    dst[ci * plane + p] /= total;
                }
            }
        }
        self.out = mode.record.then(|| y.clone());
        y
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let y = self.out.take().expect("softmax backward without recorded forward");
        let [n, c, _, _] = y.shape();
        let plane = y.plane();
        let mut dx = Tensor::zeros(y.shape());
        for i in 0..n {
            let (p, g) = (y.sample(i), grad.sample(i));
            let d = dx.sample_mut(i);
            for px in 0..plane {
                let dot: T = (0..c).map(|ci| p[ci * plane + px] * g[ci * plane + px]).sum();
                for ci in 0..c {
                    let j = ci * plane + px;
                    d[j] = p[j] * (g[j] - dot);
                }
            }
        }
        dx
    }
}

#[derive(Clone, Debug, Default)]
pub struct Sigmoid<T> {
    out: Option<Tensor<T>>,
}

impl<T: Scalar> Sigmoid<T> {
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = x.map(|v| T::one() / (T::one() + (-v).exp()));
        self.out = mode.record.then(|| y.clone());
        y
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let y = self.out.take().expect("sigmoid backward without recorded forward");
        let data = grad
            .data()
            .iter()
            .zip(y.data())
            .map(|(&g, &s)| g * s * (T::one() - s))
            .collect();
        Tensor::from_vec(grad.shape(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::<f64>::from_vec([1, 3, 1, 2], vec![1.0, -2.0, 0.5, 3.0, 100.0, -100.0]);
        let y = Softmax::default().forward(&x, Mode::EVAL);
        for p in 0..2 {
            let s: f64 = (0..3).map(|c| y.get(0, c, 0, p)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_inactive_is_identity() {
        let x = Tensor::<f32>::filled([1, 1, 4, 4], 2.0);
        let mut d = Dropout::new(0.25, 1);
        assert_eq!(d.forward(&x, Mode::EVAL), x);
    }

    #[test]
    fn dropout_replays_under_same_seed() {
        let x = Tensor::<f32>::filled([1, 2, 8, 8], 1.0);
        let a = Dropout::new(0.25, 7).forward(&x, Mode::TRAIN);
        let b = Dropout::new(0.25, 7).forward(&x, Mode::TRAIN);
        assert_eq!(a, b);
        assert!(a.data().iter().any(|&v| v == 0.0));
    }
}
