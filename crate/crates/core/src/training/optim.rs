use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-4,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum and betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Slot {
    m: Tensor,
    v: Option<Tensor>,
    t: u64,
}

/// Per-parameter optimizer state keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    slots: BTreeMap<String, Slot>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            slots: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Updates every listed parameter that received a gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (&'a str, &'a Var)>, grads: &GradStore) -> Result<()> {
        let c = self.cfg;
        for (name, var) in params {
            let Some(g) = grads.get(var) else { continue };
            let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
                m: g.zeros_like().expect("zeros"),
                v: (c.kind == OptimizerKind::Adam).then(|| g.zeros_like().expect("zeros")),
                t: 0,
            });
            slot.t += 1;
            let update = match c.kind {
                OptimizerKind::Sgd => {
                    slot.m = ((&slot.m * c.momentum)? + g)?;
                    (&slot.m * c.lr)?
                }
                OptimizerKind::Adam => {
                    slot.m = ((&slot.m * c.beta1)? + (g * (1.0 - c.beta1))?)?;
                    let v = slot.v.as_ref().expect("adam slot has v");
                    let v = ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
                    let t = slot.t as i32;
                    let m_hat = (&slot.m / (1.0 - c.beta1.powi(t)))?;
                    let v_hat = (&v / (1.0 - c.beta2.powi(t)))?;
                    slot.v = Some(v);
                    ((m_hat / (v_hat.sqrt()? + c.eps)?)? * c.lr)?
                }
            };
            var.set(&(var.as_tensor() - update)?)?;
        }
        Ok(())
    }

    /// State as named tensors plus per-slot step counts.
    pub fn export(&self, prefix: &str) -> (BTreeMap<String, Tensor>, BTreeMap<String, u64>) {
        let mut tensors = BTreeMap::new();
        let mut steps = BTreeMap::new();
        for (name, s) in &self.slots {
            tensors.insert(format!("{prefix}m.{name}"), s.m.clone());
            if let Some(v) = &s.v {
                tensors.insert(format!("{prefix}v.{name}"), v.clone());
            }
            steps.insert(name.clone(), s.t);
        }
        (tensors, steps)
    }

    pub fn import(cfg: OptimizerConfig, prefix: &str, tensors: &BTreeMap<String, Tensor>, steps: &BTreeMap<String, u64>) -> Result<Self> {
        let mut slots = BTreeMap::new();
        for (name, &t) in steps {
            let get = |k: &str| {
                tensors
                    .get(&format!("{prefix}{k}.{name}"))
                    .cloned()
                    .ok_or_else(|| Error::Lookup(format!("optimizer state for {name}")))
            };
            let v = match cfg.kind {
                OptimizerKind::Adam => Some(get("v")?),
                OptimizerKind::Sgd => None,
            };
            slots.insert(name.clone(), Slot { m: get("m")?, v, t });
        }
        Ok(Self { cfg, slots })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn quad_steps(kind: OptimizerKind, n: usize) -> f64 {
        let x = Var::new(&[3.0f64, -2.0], &Device::Cpu).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig {
            kind,
            lr: 0.1,
            ..OptimizerConfig::default()
        });
        for _ in 0..n {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            let g = loss.backward().unwrap();
            opt.step([("x", &x)], &g).unwrap();
        }
        x.as_tensor().sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn both_optimizers_descend() {
        assert!(quad_steps(OptimizerKind::Sgd, 300) < 1e-3);
        assert!(quad_steps(OptimizerKind::Adam, 200) < 0.05);
    }

    #[test]
    fn first_adam_step_is_lr_times_sign() {
        let x = Var::new(&[1.0f64, -1.0], &Device::Cpu).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig {
            lr: 0.01,
            ..OptimizerConfig::default()
        });
        let g = x.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        opt.step([("x", &x)], &g).unwrap();
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!((v[0] - 0.99).abs() < 1e-7 && (v[1] + 0.99).abs() < 1e-7);
    }

    #[test]
    fn params_without_gradient_are_untouched() {
        let x = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let y = Var::zeros(1, DType::F64, &Device::Cpu).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::default());
        let g = x.as_tensor().sum_all().unwrap().backward().unwrap();
        opt.step([("x", &x), ("y", &y)], &g).unwrap();
        assert_eq!(y.as_tensor().to_vec1::<f64>().unwrap(), vec![0.0]);
        let (t, s) = opt.export("opt.");
        assert_eq!(s.len(), 1);
        let back = Optimizer::import(OptimizerConfig::default(), "opt.", &t, &s).unwrap();
        assert_eq!(back.slots["x"].t, 1);
    }
}
