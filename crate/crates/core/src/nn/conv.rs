use rand::Rng;

use super::{Mode, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_len(&self, n: usize) -> usize {
        assert!(n + 2 * self.pad >= self.k, "input smaller than kernel");
        (n + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Output positions `[lo, hi)` whose tap `kk` lands inside an input of length `n`.
    fn valid(&self, kk: usize, n: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kk < self.pad { (self.pad - kk).div_ceil(s) } else { 0 };
        let hi = if n + self.pad > kk { (n + self.pad - kk).div_ceil(s).min(out) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Unfolds a `[c, h, w]` image into patch columns: row `(ci, ky, kx)` of
    /// the result starts at `cols[row * ld]` and holds `ho * wo` entries.
    fn im2col<T: Scalar>(&self, x: &[T], c: usize, h: usize, w: usize, cols: &mut [T], ld: usize) {
        let (ho, wo) = (self.out_len(h), self.out_len(w));
        let (k, s) = (self.k, self.stride);
        for ci in 0..c {
            let img = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (ylo, yhi) = self.valid(ky, h, ho);
                for kx in 0..k {
                    let (xlo, xhi) = self.valid(kx, w, wo);
                    let row = (ci * k + ky) * k + kx;
                    let out = &mut cols[row * ld..row * ld + ho * wo];
                    for oy in 0..ho {
                        let line = &mut out[oy * wo..(oy + 1) * wo];
                        if oy < ylo || oy >= yhi {
                            line.fill(T::zero());
                            continue;
                        }
                        let iy = oy * s + ky - self.pad;
                        let src = &img[iy * w..(iy + 1) * w];
                        line[..xlo].fill(T::zero());
                        line[xhi..].fill(T::zero());
                        if xlo < xhi {
                            let ix0 = xlo * s + kx - self.pad;
                            if s == 1 {
                                line[xlo..xhi].copy_from_slice(&src[ix0..ix0 + xhi - xlo]);
                            } else {
                                for (j, v) in line[xlo..xhi].iter_mut().enumerate() {
                                    *v = src[ix0 + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatters columns back, accumulating into `x`.
    fn col2im<T: Scalar>(&self, cols: &[T], ld: usize, c: usize, h: usize, w: usize, x: &mut [T]) {
        let (ho, wo) = (self.out_len(h), self.out_len(w));
        let (k, s) = (self.k, self.stride);
        for ci in 0..c {
            let img = &mut x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (ylo, yhi) = self.valid(ky, h, ho);
                for kx in 0..k {
                    let (xlo, xhi) = self.valid(kx, w, wo);
                    if xlo >= xhi {
                        continue;
                    }
                    let row = (ci * k + ky) * k + kx;
                    let col = &cols[row * ld..row * ld + ho * wo];
                    for oy in ylo..yhi {
                        let iy = oy * s + ky - self.pad;
                        let dst = &mut img[iy * w..(iy + 1) * w];
                        let ix0 = xlo * s + kx - self.pad;
                        let src = &col[oy * wo + xlo..oy * wo + xhi];
                        if s == 1 {
                            for (d, &v) in dst[ix0..ix0 + src.len()].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (j, &v) in src.iter().enumerate() {
                                dst[ix0 + j * s] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[n, c, hw]` to `[c, n * hw]`.
fn to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ci in 0..c {
            out[(ci * n + i) * hw..(ci * n + i + 1) * hw].copy_from_slice(&x[(i * c + ci) * hw..(i * c + ci + 1) * hw]);
        }
    }
    out
}

/// `[c, n * hw]` to `[n, c, hw]`.
fn to_batch_major<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ci in 0..c {
            out[(i * c + ci) * hw..(i * c + ci + 1) * hw].copy_from_slice(&x[(ci * n + i) * hw..(ci * n + i + 1) * hw]);
        }
    }
    out
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[c % bias.len()];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_bias_grad<T: Scalar>(grad_out: &Tensor<T>, db: &mut [T]) {
    let plane = grad_out.plane();
    let c = grad_out.channels();
    for n in 0..grad_out.batch() {
        for (ci, chunk) in grad_out.sample(n).chunks(plane).enumerate() {
            db[ci % c] += chunk.iter().copied().sum::<T>();
        }
    }
}

/// 2-D convolution, weights `[c_out, c_in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    weight: ParamId,
    bias: ParamId,
    c_in: usize,
    c_out: usize,
    geom: Geometry,
    cache: Option<(Vec<T>, [usize; 4])>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), vec![c_out, c_in, k, k], init_std, rng);
        let bias = store.add_const(format!("{name}.bias"), vec![c_out], 0.0, true);
        Self { weight, bias, c_in, c_out, geom: Geometry { k, stride, pad }, cache: None }
    }

    pub fn out_size(&self, n: usize) -> usize {
        self.geom.out_len(n)
    }

    pub fn forward(&mut self, store: &ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.c_in, "conv input channels");
        let (ho, wo) = (self.geom.out_len(h), self.geom.out_len(w));
        let (rows, hw) = (c * self.geom.k * self.geom.k, ho * wo);
        let ld = n * hw;
        let mut cols = vec![T::zero(); rows * ld];
        for i in 0..n {
            self.geom.im2col(x.sample(i), c, h, w, &mut cols[i * hw..], ld);
        }
        let mut out_cm = vec![T::zero(); self.c_out * ld];
        T::gemm(false, false, self.c_out, ld, rows, T::one(), store.value(self.weight), &cols, T::zero(), &mut out_cm);
        add_bias(&mut out_cm, store.value(self.bias), ld);
        self.cache = mode.record.then(|| (cols, x.shape()));
        Tensor::from_vec([n, self.c_out, ho, wo], to_batch_major(&out_cm, n, self.c_out, hw))
    }

    pub fn backward(&mut self, store: &mut ParamStore<T>, grad: &Tensor<T>) -> Tensor<T> {
        let (cols, in_shape) = self.cache.take().expect("conv backward without recorded forward");
        let [n, c, h, w] = in_shape;
        let rows = c * self.geom.k * self.geom.k;
        let hw = grad.plane();
        let ld = n * hw;
        let g_cm = to_channel_major(grad.data(), n, self.c_out, hw);
        T::gemm_nt_accumulate(self.c_out, rows, ld, &g_cm, &cols, &mut store.get_mut(self.weight).grad);
        accumulate_bias_grad(grad, &mut store.get_mut(self.bias).grad);
        let mut dcols = cols;
        T::gemm(true, false, rows, ld, self.c_out, T::one(), store.value(self.weight), &g_cm, T::zero(), &mut dcols);
        let mut dx = Tensor::zeros(in_shape);
        for i in 0..n {
            self.geom.col2im(&dcols[i * hw..], ld, c, h, w, dx.sample_mut(i));
        }
        dx
    }
}

/// Transposed convolution, weights `[c_in, c_out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    weight: ParamId,
    bias: ParamId,
    c_in: usize,
    c_out: usize,
    geom: Geometry,
    cache: Option<(Vec<T>, [usize; 4])>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), vec![c_in, c_out, k, k], init_std, rng);
        let bias = store.add_const(format!("{name}.bias"), vec![c_out], 0.0, true);
        Self { weight, bias, c_in, c_out, geom: Geometry { k, stride, pad }, cache: None }
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n - 1) * self.geom.stride + self.geom.k - 2 * self.geom.pad
    }

    pub fn forward(&mut self, store: &ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.c_in, "transposed conv input channels");
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        debug_assert_eq!(self.geom.out_len(ho), h);
        let rows = self.c_out * self.geom.k * self.geom.k;
        let (hw, ld) = (h * w, n * h * w);
        let x_cm = to_channel_major(x.data(), n, c, hw);
        let mut cols = vec![T::zero(); rows * ld];
        T::gemm(true, false, rows, ld, c, T::one(), store.value(self.weight), &x_cm, T::zero(), &mut cols);
        let mut out = Tensor::zeros([n, self.c_out, ho, wo]);
        let bias = store.value(self.bias);
        for i in 0..n {
            let dst = out.sample_mut(i);
            self.geom.col2im(&cols[i * hw..], ld, self.c_out, ho, wo, dst);
            add_bias(dst, bias, ho * wo);
        }
        self.cache = mode.record.then(|| (x_cm, x.shape()));
        out
    }

    pub fn backward(&mut self, store: &mut ParamStore<T>, grad: &Tensor<T>) -> Tensor<T> {
        let (x_cm, in_shape) = self.cache.take().expect("transposed conv backward without recorded forward");
        let [n, c, h, w] = in_shape;
        let [_, _, ho, wo] = grad.shape();
        let rows = self.c_out * self.geom.k * self.geom.k;
        let (hw, ld) = (h * w, n * h * w);
        accumulate_bias_grad(grad, &mut store.get_mut(self.bias).grad);
        let mut gcols = vec![T::zero(); rows * ld];
        for i in 0..n {
            self.geom.im2col(grad.sample(i), self.c_out, ho, wo, &mut gcols[i * hw..], ld);
        }
        T::gemm_nt_accumulate(c, rows, ld, &x_cm, &gcols, &mut store.get_mut(self.weight).grad);
        let mut dx_cm = vec![T::zero(); c * ld];
        T::gemm(false, false, c, ld, rows, T::one(), store.value(self.weight), &gcols, T::zero(), &mut dx_cm);
        Tensor::from_vec(in_shape, to_batch_major(&dx_cm, n, c, hw))
    }
}
