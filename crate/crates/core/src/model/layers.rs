use candle_core::{DType, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::conv::conv2d_same;
use super::fused;
use super::params::{Init, ParamStore};
use crate::error::Result;

/// How a forward pass treats dropout and batch-norm.
pub struct Ctx<'a> {
    /// Batch statistics in BN (otherwise running statistics).
    pub train: bool,
    /// Fold batch statistics into the running averages.
    pub update_stats: bool,
    /// Dropout mask source; `None` disables dropout.
    pub dropout: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Self {
        Self {
            train: false,
            update_stats: false,
            dropout: None,
        }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            train: true,
            update_stats: true,
            dropout: Some(rng),
        }
    }

    /// Batch statistics and dropout, but running averages untouched.
    pub fn train_frozen_stats(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            train: true,
            update_stats: false,
            dropout: Some(rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &[output, input], Init::HeUniform { fan_in: input })?,
            bias: store.param(&format!("{name}.bias"), &[output], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, k: usize) -> Result<Self> {
        Ok(Self {
            weight: store.param(
                &format!("{name}.weight"),
                &[output, input, k, k],
                Init::HeUniform { fan_in: input * k * k },
            )?,
            bias: store.param(&format!("{name}.bias"), &[output], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d_same(x, &self.weight)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Batch normalization over the channel axis (dim 1) of 2-D or 4-D input.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.gamma"), &[channels], Init::Const(1.0))?,
            beta: store.param(&format!("{name}.beta"), &[channels], Init::Const(0.0))?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], 1.0)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let bshape: Vec<usize> = match x.rank() {
            2 => vec![1, x.dim(1)?],
            _ => vec![1, x.dim(1)?, 1, 1],
        };
        if ctx.train {
            let (y, mean, var) = fused::batch_norm_train(x, &self.gamma, &self.beta, self.eps)?;
            if ctx.update_stats {
                let n = x.elem_count() / x.dim(1)?;
                let m = self.momentum;
                let correction = n as f64 / (n.max(2) - 1) as f64;
                let blend = |old: &Tensor, new: Vec<f64>| -> Result<Tensor> {
                    let new = Tensor::from_vec(new, old.shape(), old.device())?.to_dtype(old.dtype())?;
                    Ok(((old * (1.0 - m))? + (new * m)?)?)
                };
                let rm = blend(self.running_mean.as_tensor(), mean)?;
                let rv = blend(self.running_var.as_tensor(), var.into_iter().map(|v| v * correction).collect())?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
            }
            return Ok(y);
        }
        let mean = self.running_mean.as_tensor().reshape(bshape.as_slice())?;
        let var = self.running_var.as_tensor().reshape(bshape.as_slice())?;
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.gamma.reshape(bshape.as_slice())?)?
            .broadcast_add(&self.beta.reshape(bshape.as_slice())?)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    // max(x, slope * x) for 0 < slope < 1.
    Ok(x.maximum(&(x * slope)?)?)
}

/// Row-wise softmax over the last axis, shifted by the row maximum.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let shifted = x.broadcast_sub(&x.max_keepdim(D::Minus1)?.detach())?;
    let e = shifted.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Inverted dropout with a mask drawn from `ctx`'s generator.
pub fn dropout(x: &Tensor, p: f64, ctx: &mut Ctx) -> Result<Tensor> {
    let Some(rng) = ctx.dropout.as_deref_mut() else {
        return Ok(x.clone());
    };
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    Ok(fused::max_pool2(x)?)
}

/// Converts HWC u8 images to a normalized `B x C x H x W` tensor.
pub fn images_to_tensor(pixels: &[u8], batch: usize, side: usize, mean: [f32; 3], std: [f32; 3], dtype: DType) -> Result<Tensor> {
    let plane = side * side;
    let mut out = vec![0f32; batch * 3 * plane];
    for b in 0..batch {
        let img = &pixels[b * plane * 3..(b + 1) * plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                out[(b * 3 + c) * plane + p] = (f32::from(img[p * 3 + c]) / 255.0 - mean[c]) / std[c];
            }
        }
    }
    Ok(Tensor::from_vec(out, (batch, 3, side, side), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}
