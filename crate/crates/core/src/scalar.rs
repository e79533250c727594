//! Floating-point element type shared by every numeric routine in the crate.
//!
//! Training runs in `f32`; gradient checks run the same code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Short type name used in diagnostics.
    const NAME: &'static str;

    /// `c = alpha * op(a) * op(b) + beta * c` on row-major contiguous buffers.
    ///
    /// `op(a)` is `m x k` and `op(b)` is `k x n`; `trans_a`/`trans_b` say the
    /// stored buffer is the transpose of the operand.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );

    /// Inner product of equal-length slices.
    fn dot(a: &[Self], b: &[Self]) -> Self {
        assert_eq!(a.len(), b.len(), "dot: length mismatch");
        let mut acc = [Self::zero(); 16];
        let (ca, cb) = (a.chunks_exact(16), b.chunks_exact(16));
        let mut tail = Self::zero();
        for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
            tail += *x * *y;
        }
        for (x, y) in ca.zip(cb) {
            for i in 0..16 {
                acc[i] += x[i] * y[i];
            }
        }
        acc.iter().fold(tail, |s, &v| s + v)
    }

    /// Sum with split accumulators (vectorises where a serial fold would not).
    fn sum_slice(a: &[Self]) -> Self {
        let mut acc = [Self::zero(); 16];
        let ca = a.chunks_exact(16);
        let tail = ca.remainder().iter().fold(Self::zero(), |s, &v| s + v);
        for x in ca {
            for i in 0..16 {
                acc[i] += x[i];
            }
        }
        acc.iter().fold(tail, |s, &v| s + v)
    }

    /// `c += a * b^T` for row-major `a: m x k`, `b: n x k`. Faster than
    /// [`Scalar::gemm`] when `k` dwarfs `m` and `n`.
    fn gemm_nt_accumulate(m: usize, n: usize, k: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        for r in 0..n {
            let br = &b[r * k..(r + 1) * k];
            for i in 0..m {
                c[i * n + r] += Self::dot(&a[i * k..(i + 1) * k], br);
            }
        }
    }

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

fn strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // Stored buffer is `rows x cols` when not transposed, `cols x rows` otherwise.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(trans_a, m, k);
                let (rsb, csb) = strides(trans_b, k, n);
                // SAFETY: bounds asserted above; strides describe buffers of
                // exactly m*k, k*n and m*n elements.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);
