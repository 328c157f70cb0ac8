//! Forecasting models behind one dispatch enum.

pub mod dlinear;
pub mod family;
pub mod sst;

use serde::{Deserialize, Serialize};

pub use dlinear::{DLinear, DLinearConfig};
pub use family::{Embedding, Recipe, SubLayer, VariantConfig, VariantModel, VariantSpec};
pub use sst::{Ablation, Router, SstConfig, SstModel, SstParts};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::data::revin::batch_stats;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-window instance statistics of a `[B, L, M]` batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RevinStats {
    /// `[B, 1, M]`
    pub mean: Tensor,
    /// `[B, 1, M]`, floored standard deviation.
    pub scale: Tensor,
}

impl RevinStats {
    pub fn normalize(&self, y: &Tensor) -> Result<Tensor> {
        self.apply(y, |v, mu, s| (v - mu) / s)
    }

    pub fn denormalize(&self, y: &Tensor) -> Result<Tensor> {
        self.apply(y, |v, mu, s| v * s + mu)
    }

    fn apply(&self, y: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let (b, m) = (self.mean.shape()[0], self.mean.shape()[2]);
        let sh = y.shape();
        if sh.len() != 3 || sh[0] != b || sh[2] != m {
            return Err(Error::dim(format!("statistics for [{b}, _, {m}] applied to {sh:?}")));
        }
        let per = sh[1] * m;
        let mean = self.mean.data();
        let scale = self.scale.data();
        Tensor::new(
            sh,
            y.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let k = (i / per) * m + i % m;
                    f(v, mean[k], scale[k])
                })
                .collect(),
        )
    }
}

/// Normalize each window of `x: [B, L, M]` by its own statistics.
pub fn revin_batch(x: &Tensor) -> Result<(Tensor, RevinStats)> {
    if x.rank() != 3 || x.numel() == 0 {
        return Err(Error::dim(format!("expected a non-empty [B, L, M] batch, got {:?}", x.shape())));
    }
    let (mean, scale) = batch_stats(x);
    let stats = RevinStats { mean, scale };
    Ok((stats.normalize(x)?, stats))
}

/// `[B, L, M]` to per-variate rows `[B*M, L]`.
pub fn to_rows(x: &Tensor) -> Tensor {
    let sh = x.shape();
    let (b, l, m) = (sh[0], sh[1], sh[2]);
    let src = x.data();
    Tensor::from_fn(&[b * m, l], |i| {
        let (row, t) = (i / l, i % l);
        src[((row / m) * l + t) * m + row % m]
    })
}

/// Result of one forward pass.
pub struct Forward {
    /// `[B, F, M]`; on the normalized scale when `stats` is present.
    pub pred: Var,
    pub stats: Option<RevinStats>,
    /// Router weights `[B, 2]` for models that have one.
    pub router: Option<Var>,
}

/// Which model to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Sst(SstConfig),
    Variant(VariantConfig),
    Dlinear(DLinearConfig),
}

#[derive(Debug, Clone)]
pub enum Model {
    Sst(SstModel),
    Variant(VariantModel),
    DLinear(DLinear),
}

impl Model {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        Ok(match spec {
            ModelSpec::Sst(c) => Model::Sst(SstModel::new(c.clone(), seed)?),
            ModelSpec::Variant(c) => Model::Variant(VariantModel::new(c.clone(), seed)?),
            ModelSpec::Dlinear(c) => Model::DLinear(DLinear::new(c.clone(), seed)?),
        })
    }

    pub fn name(&self) -> String {
        match self {
            Model::Sst(m) => m.config.ablation.label().to_string(),
            Model::Variant(m) => m.config.spec.label(),
            Model::DLinear(_) => "dlinear".to_string(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Sst(m) => &m.params,
            Model::Variant(m) => &m.params,
            Model::DLinear(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Sst(m) => &mut m.params,
            Model::Variant(m) => &mut m.params,
            Model::DLinear(m) => &mut m.params,
        }
    }

    pub fn lookback(&self) -> usize {
        match self {
            Model::Sst(m) => m.config.lookback,
            Model::Variant(m) => m.config.lookback,
            Model::DLinear(m) => m.config.lookback,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Model::Sst(m) => m.config.horizon,
            Model::Variant(m) => m.config.horizon,
            Model::DLinear(m) => m.config.horizon,
        }
    }

    pub fn variates(&self) -> usize {
        match self {
            Model::Sst(m) => m.config.variates,
            Model::Variant(m) => m.config.variates,
            Model::DLinear(m) => m.config.variates,
        }
    }

    /// Forward pass on a raw batch `x: [B, L, M]` using parameters bound to `tape`.
    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, x: &Tensor) -> Result<Forward> {
        match self {
            Model::Sst(m) => m.forward(tape, x),
            Model::Variant(m) => m.forward(tape, x),
            Model::DLinear(m) => m.forward(tape, x),
        }
    }

    /// Denormalized forecast `[B, F, M]` without gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::with_params(self.params());
        let out = self.forward(&tape, x)?;
        let y = tape.to_tensor(out.pred);
        match &out.stats {
            Some(s) => s.denormalize(&y),
            None => Ok(y),
        }
    }
}
