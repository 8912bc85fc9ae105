//! Named parameter storage and seeded initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
    HeUniform {
        fan_in: usize,
    },
    Const(f64),
}

/// Trainable parameters plus non-trainable buffers (BN running statistics).
///
/// Layers hold clones of the same `Var`s, so writes through the store are
/// visible to the network.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    init_seed: u64,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn init_tensor(shape: &[usize], init: Init, seed: u64, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dev = Device::Cpu;
    let t = match init {
        Init::Const(c) => Tensor::full(c, shape, &dev)?,
        Init::HeUniform { fan_in } => {
            let bound = (6.0 / fan_in.max(1) as f64).sqrt();
            let mut rng = seed::rng(seed, seed::stream::INIT);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::from_vec(v, shape, &dev)?
        }
    };
    Ok(t.to_dtype(dtype)?)
}

impl ParamStore {
    pub fn new(dtype: DType, init_seed: u64) -> Self {
        Self {
            dtype,
            init_seed,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    /// Registers a trainable tensor. Each name draws from its own seeded
    /// stream, so values do not depend on registration order.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let t = init_tensor(shape, init, seed::mix(self.init_seed, name_hash(name)), self.dtype)?;
        let v = Var::from_tensor(&t)?;
        let out = v.as_tensor().clone();
        if self.params.insert(name.to_string(), v).is_some() {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        Ok(out)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let v = Var::from_tensor(&init_tensor(shape, Init::Const(value), 0, self.dtype)?)?;
        if self.buffers.insert(name.to_string(), v.clone()).is_some() {
            return Err(Error::Config(format!("duplicate buffer {name}")));
        }
        Ok(v)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::Lookup(format!("no tensor named {name}")))
    }

    /// Parameters whose name starts with any of `prefixes`.
    pub fn group(&self, prefixes: &[&str]) -> Vec<(&str, &Var)> {
        self.params
            .iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(n, v)| (n.as_str(), v))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter or buffer in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let v = self.get(name)?;
        if v.dims() != value.dims() {
            return Err(Error::Precondition(format!(
                "{name}: shape {:?} does not match stored {:?}",
                value.dims(),
                v.dims()
            )));
        }
        v.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Every parameter and buffer as `(name, tensor)`, sorted by name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut all: Vec<(String, Tensor)> = self
            .params
            .iter()
            .chain(self.buffers.iter())
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect();
        all.sort_by(|a, b| a.0.cmp(&b.0));
        all
    }

    /// Deep copy of all values, detached from this store.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.named_tensors().into_iter().map(|(n, t)| Ok((n, t.copy()?))).collect()
    }
}
