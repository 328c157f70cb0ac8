use serde::{Deserialize, Serialize};

use super::{Dataset, SeriesWindow};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const REVIN_EPS: f64 = 1e-5;

/// Per-variate location/scale of one look-back window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
    pub epsilon: f64,
}

impl NormStats {
    /// Statistics of an `L x M` block, per column.
    pub fn of(block: &[f64], m: usize) -> NormStats {
        let l = block.len() / m;
        let mut mean = vec![0.0; m];
        let mut std = vec![0.0; m];
        for j in 0..m {
            let mu = (0..l).map(|t| block[t * m + j]).sum::<f64>() / l as f64;
            let var = (0..l).map(|t| (block[t * m + j] - mu).powi(2)).sum::<f64>() / l as f64;
            mean[j] = mu;
            std[j] = var.sqrt();
        }
        NormStats {
            mean,
            std,
            epsilon: REVIN_EPS,
        }
    }

    /// Divisor actually applied for variate `j`.
    pub fn scale(&self, j: usize) -> f64 {
        self.std[j].max(self.epsilon)
    }

    pub fn normalize(&self, block: &Tensor) -> Result<Tensor> {
        self.apply(block, |v, mu, s| (v - mu) / s)
    }

    pub fn denormalize(&self, block: &Tensor) -> Result<Tensor> {
        self.apply(block, |v, mu, s| v * s + mu)
    }

    fn apply(&self, block: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let m = self.mean.len();
        if block.rank() != 2 || block.shape()[1] != m {
            return Err(Error::dim(format!(
                "block {:?} does not match statistics for {m} variates",
                block.shape()
            )));
        }
        let data = block
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, self.mean[i % m], self.scale(i % m)))
            .collect();
        Tensor::new(block.shape(), data)
    }
}

/// Normalize the look-back of `w` with its own statistics; the target is
/// carried through unchanged.
pub fn revin_normalize(w: &SeriesWindow) -> Result<(SeriesWindow, NormStats)> {
    let m = w.lookback.shape()[1];
    let stats = NormStats::of(w.lookback.data(), m);
    Ok((
        SeriesWindow {
            lookback: stats.normalize(&w.lookback)?,
            target: w.target.clone(),
            origin_index: w.origin_index,
        },
        stats,
    ))
}

pub fn revin_denormalize(y: &Tensor, stats: &NormStats) -> Result<Tensor> {
    stats.denormalize(y)
}

/// Per-window statistics of a `[B, L, M]` batch as `[B, 1, M]` tensors
/// (mean and applied scale).
pub(crate) fn batch_stats(x: &Tensor) -> (Tensor, Tensor) {
    let sh = x.shape();
    let (b, l, m) = (sh[0], sh[1], sh[2]);
    let mut mean = Vec::with_capacity(b * m);
    let mut scale = Vec::with_capacity(b * m);
    for w in x.data().chunks(l * m) {
        let s = NormStats::of(w, m);
        for j in 0..m {
            mean.push(s.mean[j]);
            scale.push(s.scale(j));
        }
    }
    (
        Tensor::new(&[b, 1, m], mean).expect("sized above"),
        Tensor::new(&[b, 1, m], scale).expect("sized above"),
    )
}

/// Global per-variate standardization fitted on one dataset (typically the
/// training split) and applied to others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardScaler {
    pub fn fit(ds: &Dataset) -> StandardScaler {
        let rows = &ds.values[ds.context * ds.num_variates()..];
        let s = NormStats::of(rows, ds.num_variates());
        StandardScaler {
            mean: s.mean,
            std: s.std.iter().map(|&v| v.max(REVIN_EPS)).collect(),
        }
    }

    pub fn transform(&self, ds: &Dataset) -> Dataset {
        let m = ds.num_variates();
        let mut out = ds.clone();
        for (i, v) in out.values.iter_mut().enumerate() {
            *v = (*v - self.mean[i % m]) / self.std[i % m];
        }
        out
    }

    pub fn inverse(&self, values: &mut [f64]) {
        let m = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            *v = *v * self.std[i % m] + self.mean[i % m];
        }
    }
}
