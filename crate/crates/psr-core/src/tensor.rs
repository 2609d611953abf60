//! Dense row-major f32 tensor, the universal numeric carrier.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f32>,
    /// Gradient buffer with the same shape, populated by `backward`.
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    /// Builds a tensor, checking that `product(shape) == data.len()`.
    /// A zero leading dimension (empty batch) is allowed.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} expects {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if shape.iter().skip(1).any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!("zero inner dimension in {shape:?}")));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: vec![0.0; n], grad: None }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: vec![value; n], grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of entries along the leading (batch) dimension.
    pub fn n_samples(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Flat length of one leading-dimension slice.
    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Borrow of the `i`-th leading-dimension slice.
    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.sample_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Stacks per-sample vectors of equal length into a `[N, ...tail]` tensor.
    pub fn stack(samples: &[Vec<f32>], tail: &[usize]) -> Result<Self> {
        let per: usize = tail.iter().product();
        let mut data = Vec::with_capacity(samples.len() * per);
        for s in samples {
            if s.len() != per {
                return Err(Error::ShapeMismatch(format!(
                    "stacked sample has {} values, tail {:?} wants {}",
                    s.len(),
                    tail,
                    per
                )));
            }
            data.extend_from_slice(s);
        }
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(tail);
        Tensor::new(shape, data)
    }

    /// Allocates (or clears) the gradient buffer.
    pub fn alloc_grad(&mut self) {
        self.grad = Some(vec![0.0; self.data.len()]);
    }
}

/// Max |a - b| over two equal-length slices.
pub fn linf_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        // empty batches are legal
        assert!(Tensor::new(vec![0, 3], vec![]).is_ok());
    }

    #[test]
    fn sample_slicing() {
        let t = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.sample(0), &[1., 2., 3.]);
        assert_eq!(t.sample(1), &[4., 5., 6.]);
        assert_eq!(t.n_samples(), 2);
        assert_eq!(t.sample_len(), 3);
    }
}
