use crate::scalar::Scalar;

/// Dense NCHW batch of feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: [usize; 4], value: T) -> Self {
        Self { shape, data: vec![value; shape.iter().product()] }
    }

    /// Panics if `data.len()` disagrees with `shape`.
    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    /// Stacks equally shaped `[C, H, W]` samples into one batch.
    pub fn stack(samples: &[&[T]], chw: [usize; 3]) -> Self {
        let per = chw[0] * chw[1] * chw[2];
        let mut data = Vec::with_capacity(per * samples.len());
        for s in samples {
            assert_eq!(s.len(), per, "sample size mismatch in stack");
            data.extend_from_slice(s);
        }
        Self::from_vec([samples.len(), chw[0], chw[1], chw[2]], data)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.plane()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.sample_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let [_, ch, h, w] = self.shape;
        self.data[((n * ch + c) * h + y) * w + x]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn reshape(self, shape: [usize; 4]) -> Self {
        Self::from_vec(shape, self.data)
    }

    /// Converts element type, e.g. between `f32` snapshots and `f64` checks.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }

    /// Picks samples by batch index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Self::from_vec([indices.len(), self.shape[1], self.shape[2], self.shape[3]], data)
    }

    /// Channel-wise concatenation of two batches with equal N, H, W.
    pub fn concat_channels(a: &Self, b: &Self) -> Self {
        let [n, ca, h, w] = a.shape;
        let [nb, cb, hb, wb] = b.shape;
        assert_eq!((n, h, w), (nb, hb, wb), "concat_channels shape mismatch");
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(a.sample(i));
            data.extend_from_slice(b.sample(i));
        }
        Self::from_vec([n, ca + cb, h, w], data)
    }

    /// Inverse of [`Tensor::concat_channels`]: first `ca` channels, then the rest.
    pub fn split_channels(&self, ca: usize) -> (Self, Self) {
        let [n, c, h, w] = self.shape;
        assert!(ca <= c);
        let plane = h * w;
        let mut a = Vec::with_capacity(n * ca * plane);
        let mut b = Vec::with_capacity(n * (c - ca) * plane);
        for i in 0..n {
            let s = self.sample(i);
            a.extend_from_slice(&s[..ca * plane]);
            b.extend_from_slice(&s[ca * plane..]);
        }
        (Self::from_vec([n, ca, h, w], a), Self::from_vec([n, c - ca, h, w], b))
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn mean(&self) -> T {
        let s: T = self.data.iter().copied().sum();
        s / T::of(self.data.len() as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
