//! Dense tensors and differentiable layer primitives.
//!
//! Layout is always row-major; image-like tensors are `batch × channels ×
//! height × width`. Each layer exposes a forward function and a matching
//! backward function that returns the input gradient and accumulates
//! parameter gradients into the parameter tensors' `grad` buffers.

pub mod checkpoint;
pub mod conv;
pub mod dense;
pub mod gemm;
pub mod gradcheck;
pub mod pool;

pub use conv::{bilinear_weights, conv2d, conv2d_backward, deconv2d, deconv2d_backward, ConvSpec};
pub use dense::{linear, linear_backward, relu, relu_backward, softmax, Linear};
pub use gradcheck::{finite_diff_check, finite_diff_probe, numeric_gradient};
pub use pool::{max_pool2d, max_pool2d_backward, roi_footprint, roi_pool, roi_pool_backward, roi_pool_backward_into};

use crate::error::{shape_err, Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    /// Zero-mean Gaussian entries with standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let mut t = Tensor::zeros(shape);
        for v in t.data.iter_mut() {
            *v = normal.sample(rng);
        }
        t
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let mut t = Tensor::zeros(shape);
        for v in t.data.iter_mut() {
            *v = rng.gen_range(lo..hi);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first access.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `other`'s values into this tensor's gradient buffer.
    pub fn accumulate_grad(&mut self, other: &[f64]) -> Result<()> {
        if other.len() != self.data.len() {
            return shape_err(format!(
                "gradient of length {} for tensor {:?}",
                other.len(),
                self.shape
            ));
        }
        for (g, o) in self.grad_mut().iter_mut().zip(other) {
            *g += o;
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => shape_err(format!("expected rank-4 tensor, got {:?}", self.shape)),
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => shape_err(format!("expected rank-2 tensor, got {:?}", self.shape)),
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err(format!("dot of {:?} and {:?}", self.shape, other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Concatenates rank-4 tensors with equal batch and spatial extents along channels.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let (n, _, h, w) = first.dims4()?;
        let mut total_c = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return shape_err(format!("concat {:?} with {:?}", first.shape, p.shape));
            }
            total_c += pc;
        }
        let mut out = Tensor::zeros(&[n, total_c, h, w]);
        let plane = h * w;
        for b in 0..n {
            let mut c0 = 0;
            for p in parts {
                let pc = p.shape[1];
                let src = &p.data[b * pc * plane..(b + 1) * pc * plane];
                let dst_start = (b * total_c + c0) * plane;
                out.data[dst_start..dst_start + pc * plane].copy_from_slice(src);
                c0 += pc;
            }
        }
        Ok(out)
    }

    /// Inverse of [`Tensor::concat_channels`] for a gradient: splits channels into the given counts.
    pub fn split_channels(&self, counts: &[usize]) -> Result<Vec<Tensor>> {
        let (n, c, h, w) = self.dims4()?;
        if counts.iter().sum::<usize>() != c {
            return shape_err(format!("split {:?} into {:?}", self.shape, counts));
        }
        let plane = h * w;
        let mut outs: Vec<Tensor> = counts.iter().map(|&k| Tensor::zeros(&[n, k, h, w])).collect();
        for b in 0..n {
            let mut c0 = 0;
            for (o, &k) in outs.iter_mut().zip(counts) {
                let src = (b * c + c0) * plane;
                o.data[b * k * plane..(b + 1) * k * plane]
                    .copy_from_slice(&self.data[src..src + k * plane]);
                c0 += k;
            }
        }
        Ok(outs)
    }

    /// Stacks rank-4 tensors with batch 1 into one batch.
    pub fn stack_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("stack of zero tensors".into()))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::with_capacity(parts.len() * c * h * w);
        for p in parts {
            if p.shape != [1, c, h, w] {
                return shape_err(format!("stack {:?} with {:?}", first.shape, p.shape));
            }
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(&[parts.len(), c, h, w], data)
    }

    /// Batch item `i` of a rank-4 tensor, as a batch-1 tensor.
    pub fn batch_item(&self, i: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if i >= n {
            return Err(Error::Invalid(format!("batch index {i} of {n}")));
        }
        let len = c * h * w;
        Tensor::from_vec(&[1, c, h, w], self.data[i * len..(i + 1) * len].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn grad_buffer_matches_shape() {
        let mut t = Tensor::zeros(&[1, 2, 3, 4]);
        assert!(t.grad().is_none());
        assert_eq!(t.grad_mut().len(), 24);
        t.accumulate_grad(&[1.0; 24]).unwrap();
        assert_eq!(t.grad().unwrap()[5], 1.0);
        assert!(t.accumulate_grad(&[1.0; 3]).is_err());
    }

    #[test]
    fn concat_then_split_restores_parts() {
        let a = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2, 1, 2], (10..18).map(f64::from).collect()).unwrap();
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3, 1, 2]);
        assert_eq!(&c.data()[..6], &[1.0, 2.0, 10.0, 11.0, 12.0, 13.0]);
        let parts = c.split_channels(&[1, 2]).unwrap();
        assert_eq!(parts[0].data(), a.data());
        assert_eq!(parts[1].data(), b.data());
    }

    #[test]
    fn non_finite_is_rejected() {
        let t = Tensor::from_vec(&[2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(t.ensure_finite("test"), Err(Error::NonFinite(_))));
    }
}
