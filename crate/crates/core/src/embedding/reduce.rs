//! PCA followed by exact t-SNE for small point sets.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

/// Box-Muller standard normal.
fn sample_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn check_rows(x: &[Vec<f64>]) -> Result<usize> {
    if x.len() < 2 {
        return Err(Error::Precondition(format!("need at least 2 points, got {}", x.len())));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::dim(format!("rows of length {d}"), "ragged rows"));
    }
    Ok(d)
}

/// Projects onto the top `dim` principal axes (clamped to `min(N-1, d)`).
/// Signs are fixed so the largest-magnitude coordinate of each axis is positive.
pub fn pca(x: &[Vec<f64>], dim: usize) -> Result<Vec<Vec<f64>>> {
    let d = check_rows(x)?;
    let n = x.len();
    let dim = dim.min(n - 1).min(d).max(1);
    let mut mean = vec![0.0; d];
    for r in x {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
    }
    let c = DMatrix::from_fn(n, d, |i, j| x[i][j] - mean[j]);
    let eig = SymmetricEigen::new(&c * c.transpose());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut out = vec![vec![0.0; dim]; n];
    for (k, &e) in order.iter().take(dim).enumerate() {
        let s = eig.eigenvalues[e].max(0.0).sqrt();
        let col = eig.eigenvectors.column(e);
        let pivot = (0..n).max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs())).unwrap_or(0);
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out[i][k] = sign * col[i] * s;
        }
    }
    Ok(out)
}

fn sq_dists(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|a| x.iter().map(|b| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()).collect())
        .collect()
}

/// Symmetric joint probabilities with per-point bandwidth matching `perplexity`.
fn joint_probabilities(d2: &[Vec<f64>], perplexity: f64) -> Vec<Vec<f64>> {
    let n = d2.len();
    let target = perplexity.ln();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let mut row = vec![0.0; n];
        for _ in 0..100 {
            let dmin = (0..n).filter(|&j| j != i).map(|j| d2[i][j]).fold(f64::INFINITY, f64::min);
            let mut z = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-(d2[i][j] - dmin) * beta).exp() };
                z += row[j];
            }
            let mut h = 0.0;
            for v in row.iter_mut() {
                *v /= z;
                if *v > 0.0 {
                    h -= *v * v.ln();
                }
            }
            if (h - target).abs() < 1e-6 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        p[i] = row;
    }
    let mut sym = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            sym[i][j] = ((p[i][j] + p[j][i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    sym
}

/// Exact t-SNE to `dim` dimensions.
pub fn tsne(x: &[Vec<f64>], dim: usize, perplexity: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    check_rows(x)?;
    let n = x.len();
    // Scale-free input: normalize squared distances by their mean.
    let mut d2 = sq_dists(x);
    let mean = d2.iter().flatten().sum::<f64>() / (n * (n - 1)).max(1) as f64;
    if mean > 0.0 {
        d2.iter_mut().flatten().for_each(|v| *v /= mean);
    }
    let p = joint_probabilities(&d2, perplexity.clamp(1.0, (n - 1) as f64));
    let mut rng = seed::rng(seed, seed::stream::SNE);
    let mut y: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| 1e-2 * sample_normal(&mut rng)).collect()).collect();
    let mut vel = vec![vec![0.0; dim]; n];
    let mut gains = vec![vec![1.0; dim]; n];
    let lr = (n as f64 / 12.0).max(10.0);
    for iter in 0..1000 {
        let exag = if iter < 250 { 4.0 } else { 1.0 };
        let momentum = if iter < 250 { 0.5 } else { 0.8 };
        let mut num = vec![vec![0.0; n]; n];
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d: f64 = y[i].iter().zip(&y[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                    num[i][j] = 1.0 / (1.0 + d);
                    z += num[i][j];
                }
            }
        }
        for i in 0..n {
            let mut grad = vec![0.0; dim];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[i][j] / z).max(1e-12);
                let coef = 4.0 * (exag * p[i][j] - q) * num[i][j];
                for k in 0..dim {
                    grad[k] += coef * (y[i][k] - y[j][k]);
                }
            }
            for k in 0..dim {
                let same = (grad[k] > 0.0) == (vel[i][k] > 0.0);
                gains[i][k] = if same {
                    (gains[i][k] * 0.8f64).max(0.01)
                } else {
                    gains[i][k] + 0.2
                };
                vel[i][k] = momentum * vel[i][k] - lr * gains[i][k] * grad[k];
            }
        }
        for i in 0..n {
            for k in 0..dim {
                y[i][k] += vel[i][k];
            }
        }
        let mut centre = vec![0.0; dim];
        for r in &y {
            centre.iter_mut().zip(r).for_each(|(c, v)| *c += v / n as f64);
        }
        for r in y.iter_mut() {
            r.iter_mut().zip(&centre).for_each(|(v, c)| *v -= c);
        }
    }
    Ok(y)
}

/// Perplexity used for `n` points.
pub fn default_perplexity(n: usize) -> f64 {
    (n.saturating_sub(1) as f64 / 3.0).min(5.0)
}

/// PCA to `pca_dim`, then t-SNE to `final_dim`.
pub fn reduce_dims(x: &[Vec<f64>], pca_dim: usize, final_dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let z = pca(x, pca_dim)?;
    tsne(&z, final_dim, default_perplexity(x.len()), seed)
}
