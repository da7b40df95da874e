use serde::{Deserialize, Serialize};

/// Dense NCHW tensor of `f32`. Fully connected activations use `h = w = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length does not match shape");
        Self { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elements in one sample.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let s = self.sample_len();
        &mut self.data[i * s..(i + 1) * s]
    }

    /// Reinterpret the per-sample layout without moving data.
    pub fn reshaped(mut self, c: usize, h: usize, w: usize) -> Self {
        assert_eq!(self.c * self.h * self.w, c * h * w, "reshape must preserve sample size");
        self.c = c;
        self.h = h;
        self.w = w;
        self
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { n: self.n, c: self.c, h: self.h, w: self.w, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack single-sample tensors of identical shape into a batch.
    pub fn stack(items: &[&Tensor]) -> Self {
        assert!(!items.is_empty(), "cannot stack an empty list");
        let first = items[0];
        let mut data = Vec::with_capacity(items.len() * first.sample_len());
        for t in items {
            assert_eq!((t.c, t.h, t.w), (first.c, first.h, first.w), "stack shape mismatch");
            data.extend_from_slice(&t.data);
        }
        Self { n: data.len() / first.sample_len(), c: first.c, h: first.h, w: first.w, data }
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Self {
        assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat shape mismatch");
        let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
        for i in 0..a.n {
            let dst = out.sample_mut(i);
            let (da, db) = dst.split_at_mut(a.sample_len());
            da.copy_from_slice(a.sample(i));
            db.copy_from_slice(b.sample(i));
        }
        out
    }

    /// Inverse of [`Tensor::concat_channels`] for gradients.
    pub fn split_channels(&self, first: usize) -> (Tensor, Tensor) {
        let hw = self.h * self.w;
        let mut a = Tensor::zeros(self.n, first, self.h, self.w);
        let mut b = Tensor::zeros(self.n, self.c - first, self.h, self.w);
        for i in 0..self.n {
            let src = self.sample(i);
            a.sample_mut(i).copy_from_slice(&src[..first * hw]);
            b.sample_mut(i).copy_from_slice(&src[first * hw..]);
        }
        (a, b)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_recovers_parts() {
        let a = Tensor::from_vec(2, 1, 1, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(2, 2, 1, 2, (0..8).map(|v| v as f32 * 10.0).collect());
        let cat = Tensor::concat_channels(&a, &b);
        assert_eq!(cat.c, 3);
        assert_eq!(cat.sample(1), &[3.0, 4.0, 40.0, 50.0, 60.0, 70.0]);
        let (a2, b2) = cat.split_channels(1);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }
}
