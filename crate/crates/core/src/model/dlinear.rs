//! Decomposition-linear baseline: separate linear maps on trend and residual.

use serde::{Deserialize, Serialize};

use super::{to_rows, Forward};
use crate::autodiff::{ParamStore, Tape};
use crate::data::moving_average_decompose;
use crate::error::{Error, Result};
use crate::nn::{init_rng, Linear};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DLinearConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub variates: usize,
    /// Odd moving-average width.
    pub kernel: usize,
}

impl Default for DLinearConfig {
    fn default() -> Self {
        DLinearConfig {
            lookback: 196,
            horizon: 96,
            variates: 1,
            kernel: 25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DLinear {
    pub config: DLinearConfig,
    pub params: ParamStore,
    pub trend: Linear,
    pub residual: Linear,
}

impl DLinear {
    /// Both maps start as the window average with zero bias.
    pub fn new(config: DLinearConfig, seed: u64) -> Result<Self> {
        let (l, f) = (config.lookback, config.horizon);
        if l == 0 || f == 0 || config.variates == 0 {
            return Err(Error::Configuration("look-back, horizon and variates must be positive".into()));
        }
        if config.kernel.is_multiple_of(2) || config.kernel > l {
            return Err(Error::Configuration(format!(
                "decomposition window {} must be odd and at most {l}",
                config.kernel
            )));
        }
        let mut rng = init_rng(seed);
        let mut params = ParamStore::new();
        let trend = Linear::new(&mut params, "trend", l, f, true, &mut rng);
        let residual = Linear::new(&mut params, "residual", l, f, true, &mut rng);
        for lin in [&trend, &residual] {
            params.get_mut(lin.weight).data_mut().fill(1.0 / l as f64);
        }
        Ok(DLinear {
            config,
            params,
            trend,
            residual,
        })
    }

    /// Trend and residual rows `[B*M, L]` of a raw batch.
    pub fn decompose(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let rows = to_rows(x);
        let l = self.config.lookback;
        let mut trend = Vec::with_capacity(rows.numel());
        let mut resid = Vec::with_capacity(rows.numel());
        for r in rows.data().chunks(l) {
            let (t, e) = moving_average_decompose(r, self.config.kernel)?;
            trend.extend(t);
            resid.extend(e);
        }
        Ok((Tensor::new(rows.shape(), trend)?, Tensor::new(rows.shape(), resid)?))
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, x: &Tensor) -> Result<Forward> {
        let cfg = &self.config;
        let sh = x.shape();
        if sh.len() != 3 || sh[1] != cfg.lookback || sh[2] != cfg.variates {
            return Err(Error::dim(format!(
                "model expects [B, {}, {}] windows, got {sh:?}",
                cfg.lookback, cfg.variates
            )));
        }
        let (trend, resid) = self.decompose(x)?;
        let yt = self.trend.forward(tape, tape.constant(trend.cast()))?;
        let yr = self.residual.forward(tape, tape.constant(resid.cast()))?;
        let y = tape.reshape(tape.add(yt, yr)?, &[sh[0], cfg.variates, cfg.horizon])?;
        Ok(Forward {
            pred: tape.permute(y, &[0, 2, 1])?,
            stats: None,
            router: None,
        })
    }
}
