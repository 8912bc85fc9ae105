use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Main, super- and sub-diagonal of one layer's channel Gram matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriDiagonal {
    pub main: Vec<f64>,
    pub sup: Vec<f64>,
    pub sub: Vec<f64>,
}

impl TriDiagonal {
    pub fn zeros(channels: usize) -> Self {
        let off = channels.saturating_sub(1);
        Self {
            main: vec![0.0; channels],
            sup: vec![0.0; off],
            sub: vec![0.0; off],
        }
    }

    pub fn len(&self) -> usize {
        self.main.len() + self.sup.len() + self.sub.len()
    }

    pub fn is_empty(&self) -> bool {
        self.main.is_empty()
    }

    /// `main ++ sup ++ sub`.
    pub fn flatten(&self) -> impl Iterator<Item = f64> + '_ {
        self.main.iter().chain(&self.sup).chain(&self.sub).copied()
    }

    fn add_scaled(&mut self, other: &TriDiagonal, s: f64) {
        for (a, b) in [
            (&mut self.main, &other.main),
            (&mut self.sup, &other.sup),
            (&mut self.sub, &other.sub),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += s * y);
        }
    }
}

/// Tri-diagonals of `G = F F^T` for one `C x H x W` stack given as a flat slice.
pub fn gram_tridiagonal(acts: &[f32], channels: usize) -> Result<TriDiagonal> {
    if channels == 0 || acts.len() % channels != 0 {
        return Err(Error::dim(format!("multiple of {channels} values"), acts.len()));
    }
    let hw = acts.len() / channels;
    let row = |i: usize| &acts[i * hw..(i + 1) * hw];
    let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum::<f64>();
    let mut t = TriDiagonal::zeros(channels);
    for i in 0..channels {
        t.main[i] = dot(row(i), row(i));
        if i + 1 < channels {
            t.sup[i] = dot(row(i), row(i + 1));
            t.sub[i] = dot(row(i + 1), row(i));
        }
    }
    Ok(t)
}

/// Example-averaged tri-diagonals over a `B x C x H x W` batch, accumulated
/// into `acc` with weight `1 / total`.
pub fn accumulate_batch(acts: &Tensor, acc: &mut TriDiagonal, total: usize) -> Result<()> {
    let (b, c, h, w) = acts.dims4()?;
    let f = acts.to_dtype(DType::F64)?.reshape((b, c, h * w))?;
    let main = f.sqr()?.sum(2)?.sum(0)?.to_vec1::<f64>()?;
    let mut sum = TriDiagonal::zeros(c);
    sum.main = main;
    if c > 1 {
        let lo = f.narrow(1, 0, c - 1)?;
        let hi = f.narrow(1, 1, c - 1)?;
        sum.sup = (&lo * &hi)?.sum(2)?.sum(0)?.to_vec1::<f64>()?;
        sum.sub = (&hi * &lo)?.sum(2)?.sum(0)?.to_vec1::<f64>()?;
    }
    acc.add_scaled(&sum, 1.0 / total as f64);
    Ok(())
}
