//! Multinomial logistic-regression probe on frozen features.

use candle_core::{DType, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use super::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::losses;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            lr: 0.05,
            l2: 1e-4,
        }
    }
}

/// Standardizes with training statistics; constant columns are left at zero.
fn standardize(train: &Tensor, test: &Tensor) -> Result<(Tensor, Tensor)> {
    let mean = train.mean_keepdim(0)?;
    let std = train.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)?.sqrt()?;
    let inv = std.to_vec2::<f64>()?[0]
        .iter()
        .map(|&s| if s > 1e-12 { 1.0 / s } else { 0.0 })
        .collect::<Vec<_>>();
    let inv = Tensor::new(inv, train.device())?.unsqueeze(0)?;
    let f = |x: &Tensor| -> Result<Tensor> { Ok(x.broadcast_sub(&mean)?.broadcast_mul(&inv)?) };
    Ok((f(train)?, f(test)?))
}

/// Fits a fresh linear softmax classifier on `(train_x, train_y)` with
/// full-batch Adam from zero weights and returns its accuracy on the test set.
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &[u32],
    test_x: &Tensor,
    test_y: &[u32],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if train_x.dim(0)? != train_y.len() || test_x.dim(0)? != test_y.len() || test_y.is_empty() {
        return Err(Error::dim("one label per feature row", "mismatched probe inputs"));
    }
    if train_y.iter().chain(test_y).any(|&y| y as usize >= num_classes) {
        return Err(Error::Precondition("probe label out of range".into()));
    }
    let (xtr, xte) = standardize(&train_x.to_dtype(DType::F64)?, &test_x.to_dtype(DType::F64)?)?;
    let d = xtr.dim(1)?;
    let dev = xtr.device();
    let w = Var::zeros((d, num_classes), DType::F64, dev)?;
    let b = Var::zeros(num_classes, DType::F64, dev)?;
    let ytr = Tensor::new(train_y, dev)?;
    let mut opt = Optimizer::new(OptimizerConfig {
        kind: OptimizerKind::Adam,
        lr: cfg.lr,
        ..OptimizerConfig::default()
    });
    for _ in 0..cfg.iterations {
        let logits = xtr.matmul(w.as_tensor())?.broadcast_add(b.as_tensor())?;
        let logp = logits.log_sum_exp(D::Minus1)?;
        let picked = logits.gather(&ytr.unsqueeze(1)?, 1)?.squeeze(1)?;
        let nll = (logp - picked)?.mean_all()?;
        let loss = (nll + (w.as_tensor().sqr()?.sum_all()? * cfg.l2)?)?;
        losses::scalar(&loss)?;
        let grads = loss.backward()?;
        opt.step([("w", &w), ("b", &b)], &grads)?;
    }
    let pred = xte
        .matmul(w.as_tensor())?
        .broadcast_add(b.as_tensor())?
        .argmax(1)?
        .to_vec1::<u32>()?;
    let correct = pred.iter().zip(test_y).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / test_y.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blobs(n: usize, informative: bool, seed: u64) -> (Tensor, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = (i % 3) as u32;
            for j in 0..4 {
                let centre = if informative && j as u32 == c { 3.0 } else { 0.0 };
                x.push(centre + rng.random_range(-1.0..1.0));
            }
            y.push(c);
        }
        (Tensor::from_vec(x, (n, 4), &Device::Cpu).unwrap(), y)
    }

    #[test]
    fn separable_data_is_learned_and_noise_is_not() {
        let cfg = ProbeConfig::default();
        let (a, ya) = blobs(300, true, 1);
        let (b, yb) = blobs(150, true, 2);
        assert!(linear_probe(&a, &ya, &b, &yb, 3, &cfg).unwrap() > 0.95);
        let (a, ya) = blobs(300, false, 3);
        let (b, yb) = blobs(150, false, 4);
        assert!(linear_probe(&a, &ya, &b, &yb, 3, &cfg).unwrap() < 0.5);
    }

    #[test]
    fn rejects_bad_labels() {
        let (a, ya) = blobs(9, true, 1);
        assert!(linear_probe(&a, &ya, &a, &ya, 2, &ProbeConfig::default()).is_err());
    }
}
