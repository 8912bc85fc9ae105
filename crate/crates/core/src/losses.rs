//! Training objectives as differentiable tensor expressions.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    /// Entropy weight inside the class objective.
    pub alpha_class: f64,
    /// Entropy weight inside the domain objective.
    pub alpha_domain: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 1.0,
            w3: 0.1,
            w4: 0.1,
            alpha_class: 0.1,
            alpha_domain: 0.1,
        }
    }
}

impl LossWeights {
    /// Class supervision only: no domain, reconstruction, entropy or MI terms.
    pub fn source_only() -> Self {
        Self {
            w1: 1.0,
            w2: 0.0,
            w3: 0.0,
            w4: 0.0,
            alpha_class: 0.0,
            alpha_domain: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.w1, self.w2, self.w3, self.w4, self.alpha_class, self.alpha_domain];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Scalar values of every loss term for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_class: f64,
    pub ent_class: f64,
    pub ce_domain: f64,
    pub ent_domain: f64,
    pub rec: f64,
    pub kl: f64,
    pub mi: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(mut self, w: &LossWeights) -> Self {
        self.total = total_loss(&self, w);
        self
    }

    /// First non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("ce_class", self.ce_class),
            ("ent_class", self.ent_class),
            ("ce_domain", self.ce_domain),
            ("ent_domain", self.ent_domain),
            ("rec", self.rec),
            ("kl", self.kl),
            ("mi", self.mi),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

pub fn total_loss(b: &LossBreakdown, w: &LossWeights) -> f64 {
    w.w1 * (b.ce_class + w.alpha_class * b.ent_class)
        + w.w2 * (b.ce_domain + w.alpha_domain * b.ent_domain)
        + w.w3 * (b.rec + b.kl)
        + w.w4 * b.mi
}

fn check_probs(probs: &Tensor, labels: Option<&Tensor>) -> Result<()> {
    if probs.rank() != 2 {
        return Err(Error::dim("B x K probabilities", format!("{:?}", probs.dims())));
    }
    if let Some(l) = labels {
        if l.dims() != [probs.dim(0)?] {
            return Err(Error::dim(format!("{} labels", probs.dim(0)?), format!("{:?}", l.dims())));
        }
    }
    Ok(())
}

/// Mean of `-log p[label]` over rows. `labels` is a `u32` vector.
pub fn cross_entropy(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    check_probs(probs, Some(labels))?;
    let picked = probs.gather(&labels.unsqueeze(1)?, 1)?.squeeze(1)?;
    Ok(picked.clamp(PROB_EPS, 1.0)?.log()?.neg()?.mean_all()?)
}

/// Rows whose true-label probability fell under the clamp.
pub fn clamped_rows(probs: &Tensor, labels: &Tensor) -> Result<usize> {
    check_probs(probs, Some(labels))?;
    let picked = probs.gather(&labels.unsqueeze(1)?, 1)?.squeeze(1)?;
    let v = picked.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    Ok(v.iter().filter(|&&p| p < PROB_EPS).count())
}

/// Mean over rows of `sum_k p_k log p_k`, in `[-log K, 0]`.
pub fn neg_entropy(probs: &Tensor) -> Result<Tensor> {
    check_probs(probs, None)?;
    let plogp = (probs * probs.clamp(PROB_EPS, 1.0)?.log()?)?;
    Ok(plogp.sum(D::Minus1)?.mean_all()?)
}

/// `||f_hat - f||_F^2 / B`.
pub fn reconstruction(f: &Tensor, f_hat: &Tensor) -> Result<Tensor> {
    if f.dims() != f_hat.dims() {
        return Err(Error::dim(format!("{:?}", f.dims()), format!("{:?}", f_hat.dims())));
    }
    let b = f.dim(0)? as f64;
    Ok(((f_hat - f)?.sqr()?.sum_all()? / b)?)
}

/// KL of unit-variance Gaussians at `mu` against the standard normal, averaged over rows.
pub fn kl_standard_normal(mu: &Tensor) -> Result<Tensor> {
    let b = mu.dim(0)? as f64;
    Ok((mu.sqr()?.sum_all()? / (2.0 * b))?)
}

/// Monte-Carlo MI lower bound: `mean(joint) - log mean exp(marginal)`.
pub fn mine_mi(joint: &Tensor, marginal: &Tensor) -> Result<Tensor> {
    let n = marginal.elem_count();
    if n < 2 || joint.elem_count() != n {
        return Err(Error::Precondition(format!(
            "MINE needs n >= 2 matched samples, got {} joint / {n} marginal",
            joint.elem_count()
        )));
    }
    let m = marginal.flatten_all()?;
    let shift = m.max_all()?.detach();
    let lse = (m.broadcast_sub(&shift)?.exp()?.sum_all()?.log()? + shift)?;
    let log_mean = (lse - (n as f64).ln())?;
    Ok((joint.flatten_all()?.mean_all()? - log_mean)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}
