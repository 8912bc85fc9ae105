//! Fused CPU kernels for batch normalization in training mode and 2x2 max
//! pooling. Candle's generic reductions and pooling backward dominate step
//! time on small convolutional nets; these compute the same values with
//! closed-form gradients.

use std::sync::{Arc, Mutex};

use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Layout, Result, Shape, Tensor};

fn read(s: &CpuStorage, l: &Layout) -> Result<Vec<f64>> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("fused: non-contiguous input".into()))?;
    match s {
        CpuStorage::F32(v) => Ok(v[start..end].iter().map(|&x| f64::from(x)).collect()),
        CpuStorage::F64(v) => Ok(v[start..end].to_vec()),
        _ => Err(candle_core::Error::Msg("fused: unsupported dtype".into())),
    }
}

/// Wraps `v` in the same storage variant as `like`.
fn write(like: &CpuStorage, v: Vec<f64>) -> Result<CpuStorage> {
    match like {
        CpuStorage::F32(_) => Ok(CpuStorage::F32(v.into_iter().map(|x| x as f32).collect())),
        CpuStorage::F64(_) => Ok(CpuStorage::F64(v)),
        _ => Err(candle_core::Error::Msg("fused: unsupported dtype".into())),
    }
}

fn tensor_vec(t: &Tensor) -> Result<Vec<f64>> {
    t.contiguous()?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

fn from_vec(v: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    Tensor::from_vec(v, like.shape(), like.device())?.to_dtype(like.dtype())
}

/// (batch, channels, spatial) view of a rank-2 or rank-4 shape.
fn bcl(shape: &Shape) -> Result<(usize, usize, usize)> {
    let d = shape.dims();
    if d.len() < 2 {
        return Err(candle_core::Error::Msg("batch norm needs rank >= 2".into()));
    }
    Ok((d[0], d[1], d[2..].iter().product()))
}

type Stats = Arc<Mutex<(Vec<f64>, Vec<f64>)>>;

struct BatchNormTrain {
    eps: f64,
    stats: Stats,
}

fn moments(x: &[f64], b: usize, c: usize, l: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (b * l) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let row = &x[(bi * c + ci) * l..(bi * c + ci + 1) * l];
            mean[ci] += row.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for bi in 0..b {
        for ci in 0..c {
            let row = &x[(bi * c + ci) * l..(bi * c + ci + 1) * l];
            var[ci] += row.iter().map(|v| (v - mean[ci]) * (v - mean[ci])).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (b, c, l) = bcl(l1.shape())?;
        let x = read(s1, l1)?;
        let gamma = read(s2, l2)?;
        let beta = read(s3, l3)?;
        let (mean, var) = moments(&x, b, c, l);
        let mut y = x;
        for bi in 0..b {
            for ci in 0..c {
                let inv = gamma[ci] / (var[ci] + self.eps).sqrt();
                for v in &mut y[(bi * c + ci) * l..(bi * c + ci + 1) * l] {
                    *v = (*v - mean[ci]) * inv + beta[ci];
                }
            }
        }
        *self.stats.lock().expect("stats lock") = (mean, var);
        Ok((write(s1, y)?, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, l) = bcl(x.shape())?;
        let n = (b * l) as f64;
        let (mean, var) = self.stats.lock().expect("stats lock").clone();
        let xs = tensor_vec(x)?;
        let gs = tensor_vec(grad)?;
        let gm = tensor_vec(gamma)?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut dbeta = vec![0.0; c];
        let mut dgamma = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let r = (bi * c + ci) * l..(bi * c + ci + 1) * l;
                for (&xv, &g) in xs[r.clone()].iter().zip(&gs[r]) {
                    dbeta[ci] += g;
                    dgamma[ci] += g * (xv - mean[ci]) * inv_std[ci];
                }
            }
        }
        let gx = if x.track_op() {
            let mut dx = vec![0.0; xs.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let r = (bi * c + ci) * l..(bi * c + ci + 1) * l;
                    let k = gm[ci] * inv_std[ci];
                    for ((d, &xv), &g) in dx[r.clone()].iter_mut().zip(&xs[r.clone()]).zip(&gs[r]) {
                        let xhat = (xv - mean[ci]) * inv_std[ci];
                        *d = k * (g - dbeta[ci] / n - xhat * dgamma[ci] / n);
                    }
                }
            }
            Some(from_vec(dx, x)?)
        } else {
            None
        };
        Ok((gx, Some(from_vec(dgamma, gamma)?), Some(from_vec(dbeta, gamma)?)))
    }
}

/// Batch-statistics normalization with affine transform. Returns the output
/// and the biased per-channel batch mean and variance.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let stats: Stats = Arc::default();
    let op = BatchNormTrain { eps, stats: stats.clone() };
    let y = x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)?;
    let (mean, var) = stats.lock().expect("stats lock").clone();
    Ok((y, mean, var))
}

struct MaxPool2;

fn pool_geometry(shape: &Shape) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = shape.dims4()?;
    Ok((b * c, h, w))
}

/// Index of the first maximum in each 2x2 window.
fn argmax_windows(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let cands = [
                    base + 2 * i * w + 2 * j,
                    base + 2 * i * w + 2 * j + 1,
                    base + (2 * i + 1) * w + 2 * j,
                    base + (2 * i + 1) * w + 2 * j + 1,
                ];
                let mut best = cands[0];
                for &k in &cands[1..] {
                    if x[k] > x[best] {
                        best = k;
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

impl CustomOp1 for MaxPool2 {
    fn name(&self) -> &'static str {
        "max-pool-2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (planes, h, w) = pool_geometry(l.shape())?;
        let (b, c, _, _) = l.shape().dims4()?;
        let x = read(s, l)?;
        let y = argmax_windows(&x, planes, h, w).into_iter().map(|k| x[k]).collect();
        Ok((write(s, y)?, Shape::from((b, c, h / 2, w / 2))))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let (planes, h, w) = pool_geometry(x.shape())?;
        let xs = tensor_vec(x)?;
        let gs = tensor_vec(grad)?;
        let mut dx = vec![0.0; xs.len()];
        for (k, g) in argmax_windows(&xs, planes, h, w).into_iter().zip(gs) {
            dx[k] += g;
        }
        Ok(Some(from_vec(dx, x)?))
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows and columns are dropped.
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(MaxPool2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    fn reference_bn(x: &Tensor, g: &Tensor, b: &Tensor, eps: f64) -> Tensor {
        let reduce = [0usize, 2, 3];
        let mean = x.mean_keepdim(reduce.as_slice()).unwrap();
        let c = x.broadcast_sub(&mean).unwrap();
        let var = c.sqr().unwrap().mean_keepdim(reduce.as_slice()).unwrap();
        let xhat = c.broadcast_div(&(var + eps).unwrap().sqrt().unwrap()).unwrap();
        let shape = [1usize, x.dim(1).unwrap(), 1, 1];
        xhat.broadcast_mul(&g.reshape(shape.as_slice()).unwrap())
            .unwrap()
            .broadcast_add(&b.reshape(shape.as_slice()).unwrap())
            .unwrap()
    }

    #[test]
    fn batch_norm_matches_composed_ops() {
        let dev = Device::Cpu;
        let x = Var::randn(0.5f64, 2.0, (4, 3, 5, 6), &dev).unwrap();
        let g = Var::randn(1f64, 0.3, 3, &dev).unwrap();
        let b = Var::randn(0f64, 0.3, 3, &dev).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (4, 3, 5, 6), &dev).unwrap();
        let (ours, mean, var) = batch_norm_train(x.as_tensor(), g.as_tensor(), b.as_tensor(), 1e-5).unwrap();
        let theirs = reference_bn(x.as_tensor(), g.as_tensor(), b.as_tensor(), 1e-5);
        assert!(max_diff(&ours, &theirs) < 1e-10);
        assert_eq!((mean.len(), var.len()), (3, 3));
        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &g, &b] {
            assert!(max_diff(g1.get(v).unwrap(), g2.get(v).unwrap()) < 1e-9);
        }
    }

    #[test]
    fn batch_norm_rank_two() {
        let x = Tensor::randn(0f32, 1.0, (8, 5), &Device::Cpu).unwrap();
        let g = Tensor::ones(5, DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros(5, DType::F32, &Device::Cpu).unwrap();
        let (y, _, _) = batch_norm_train(&x, &g, &b, 1e-5).unwrap();
        let col_means = y.mean(0).unwrap().to_vec1::<f32>().unwrap();
        assert!(col_means.iter().all(|m| m.abs() < 1e-5));
    }

    #[test]
    fn pool_routes_gradient_to_window_maximum() {
        let dev = Device::Cpu;
        let x = Var::new(&[[[[1.0f64, 5.0, 2.0, 0.0], [3.0, 4.0, 9.0, 1.0], [0.5, 0.0, 0.0, 7.0]]]], &dev).unwrap();
        let y = max_pool2(x.as_tensor()).unwrap();
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![5.0, 9.0]);
        let probe = Tensor::new(&[[[[10.0f64, 20.0]]]], &dev).unwrap();
        let g = (y * probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gx = g.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut expect = vec![0.0; 12];
        expect[1] = 10.0;
        expect[6] = 20.0;
        assert_eq!(gx, expect);
    }
}
