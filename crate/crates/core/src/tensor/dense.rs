//! Fully connected layer, ReLU and softmax.

use super::gemm::{gemm, Op};
use super::Tensor;
use crate::error::{shape_err, Error, Result};
use rand::Rng;

/// `y = x · Wᵀ + b` with weights `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Linear {
            weights: Tensor::zeros(&[out_features, in_features]),
            bias: Tensor::zeros(&[out_features]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn he_init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let std = (2.0 / self.in_features() as f64).sqrt();
        self.gaussian_init(std, rng);
    }

    pub fn gaussian_init<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        self.weights = Tensor::randn(self.weights.shape(), std, rng);
        self.bias = Tensor::zeros(self.bias.shape());
    }
}

/// Flattens every non-batch axis: `[n, ...] → [n, prod(...)]`.
fn as_rows(x: &Tensor) -> Result<(usize, usize)> {
    let n = *x
        .shape()
        .first()
        .ok_or_else(|| Error::Invalid("linear input must have a batch axis".into()))?;
    Ok((n, if n == 0 { 0 } else { x.numel() / n }))
}

/// Applies the layer to each batch row; inputs of any rank are flattened per row.
pub fn linear(x: &Tensor, layer: &Linear) -> Result<Tensor> {
    let (n, d) = as_rows(x)?;
    if d != layer.in_features() {
        return shape_err(format!(
            "linear: {d} input features, layer expects {}",
            layer.in_features()
        ));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("linear input"));
    }
    let o = layer.out_features();
    let mut out = Tensor::zeros(&[n, o]);
    for row in out.data_mut().chunks_mut(o) {
        row.copy_from_slice(layer.bias.data());
    }
    gemm(n, d, o, 1.0, x.data(), Op::N, layer.weights.data(), Op::T, 1.0, out.data_mut());
    out.ensure_finite("linear")
}

/// Accumulates parameter gradients into `layer` and returns the input gradient (shaped like `x`).
pub fn linear_backward(x: &Tensor, layer: &mut Linear, dy: &Tensor) -> Result<Tensor> {
    let (n, d) = as_rows(x)?;
    let o = layer.out_features();
    if dy.shape() != [n, o] {
        return shape_err(format!("linear_backward: gradient {:?}, expected [{n}, {o}]", dy.shape()));
    }
    let mut dw = vec![0.0; o * d];
    gemm(o, n, d, 1.0, dy.data(), Op::T, x.data(), Op::N, 0.0, &mut dw);
    let mut db = vec![0.0; o];
    for row in dy.data().chunks(o) {
        for (b, g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    gemm(n, o, d, 1.0, dy.data(), Op::N, layer.weights.data(), Op::N, 0.0, dx.data_mut());
    layer.weights.accumulate_grad(&dw)?;
    layer.bias.accumulate_grad(&db)?;
    dx.ensure_finite("linear_backward")
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::NonFinite("relu input"));
    }
    let mut y = x.clone();
    y.clear_grad();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(y)
}

/// Gradient of ReLU given its input `x`; the kink at 0 gets zero gradient.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return shape_err(format!("relu_backward: {:?} vs {:?}", x.shape(), dy.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Max-stabilized softmax of one logit vector.
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// `log Σ exp(z)` computed stably.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln()
}

/// Softmax over the class axis of an `[n, classes]` tensor.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let (n, k) = x.dims2()?;
    if !x.is_finite() {
        return Err(Error::NonFinite("softmax input"));
    }
    let mut data = Vec::with_capacity(n * k);
    for row in x.data().chunks(k.max(1)) {
        data.extend(softmax_row(row));
    }
    Tensor::from_vec(&[n, k], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_logits_give_uniform_distribution() {
        let p = softmax(&Tensor::full(&[2, 4], 3.7)).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_is_a_probability_vector_even_for_large_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[50, 4], 300.0, &mut rng);
        let p = softmax(&x).unwrap();
        for row in p.data().chunks(4) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::from_vec(&[4], vec![-2.0, -0.5, 0.5, 3.0]).unwrap();
        assert_eq!(relu(&x).unwrap().data(), &[0.0, 0.0, 0.5, 3.0]);
        assert!(relu(&Tensor::from_vec(&[1], vec![f64::INFINITY]).unwrap()).is_err());
    }

    #[test]
    fn linear_matches_matrix_vector_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut layer = Linear::new(7, 3);
        layer.gaussian_init(1.0, &mut rng);
        layer.bias = Tensor::randn(&[3], 1.0, &mut rng);
        let x = Tensor::randn(&[2, 7], 1.0, &mut rng);
        let y = linear(&x, &layer).unwrap();
        for b in 0..2 {
            for o in 0..3 {
                let want: f64 = layer.bias.data()[o]
                    + (0..7)
                        .map(|i| layer.weights.data()[o * 7 + i] * x.data()[b * 7 + i])
                        .sum::<f64>();
                assert!((y.data()[b * 3 + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_flattens_rank4_input() {
        let layer = Linear::new(12, 2);
        let y = linear(&Tensor::zeros(&[3, 3, 2, 2]), &layer).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert!(linear(&Tensor::zeros(&[3, 5]), &layer).is_err());
    }
}
