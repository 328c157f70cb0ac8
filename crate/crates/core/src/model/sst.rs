//! Long-short router, weighted fusion, linear head and the full forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{revin_batch, to_rows, Forward};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::lwt::{LwtConfig, VariationsExpert};
use crate::mamba::{MambaConfig, PatternsExpert};
use crate::nn::{init_rng, Linear};
use crate::patch::{check_scales, PatchSpec};
use crate::tensor::{Scalar, Tensor};

/// Structural ablations of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Long-range state-space expert only.
    PatternsOnly,
    /// Short-range local-window expert only.
    VariationsOnly,
    /// Both experts on raw steps (patch length and stride 1).
    NoPatcher,
    /// Plain concatenation without router weights.
    NoRouter,
}

impl Ablation {
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "sst",
            Ablation::PatternsOnly => "sst_patterns_only",
            Ablation::VariationsOnly => "sst_variations_only",
            Ablation::NoPatcher => "sst_no_patcher",
            Ablation::NoRouter => "sst_no_router",
        }
    }

    fn uses_long(self) -> bool {
        self != Ablation::VariationsOnly
    }

    fn uses_short(self) -> bool {
        self != Ablation::PatternsOnly
    }

    fn uses_router(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoPatcher)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SstConfig {
    pub lookback: usize,
    pub short_len: usize,
    pub horizon: usize,
    pub variates: usize,
    pub d_model: usize,
    pub patch_long: usize,
    pub stride_long: usize,
    pub patch_short: usize,
    pub stride_short: usize,
    pub mamba_layers: usize,
    pub mamba: MambaConfig,
    pub lwt: LwtConfig,
    pub ablation: Ablation,
}

impl Default for SstConfig {
    fn default() -> Self {
        SstConfig {
            lookback: 672,
            short_len: 336,
            horizon: 96,
            variates: 1,
            d_model: 64,
            patch_long: 48,
            stride_long: 16,
            patch_short: 16,
            stride_short: 8,
            mamba_layers: 2,
            mamba: MambaConfig::default(),
            lwt: LwtConfig::default(),
            ablation: Ablation::Full,
        }
    }
}

impl SstConfig {
    /// Effective `(long, short)` patch specs after the ablation is applied.
    pub fn patch_specs(&self) -> Result<(PatchSpec, PatchSpec)> {
        let (pl, sl, ps, ss) = if self.ablation == Ablation::NoPatcher {
            (1, 1, 1, 1)
        } else {
            (self.patch_long, self.stride_long, self.patch_short, self.stride_short)
        };
        let long = PatchSpec::new(pl, sl, self.lookback).map_err(|e| Error::Configuration(e.to_string()))?;
        let short = PatchSpec::new(ps, ss, self.short_len).map_err(|e| Error::Configuration(e.to_string()))?;
        Ok((long, short))
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.variates == 0 || self.d_model == 0 {
            return Err(Error::Configuration("horizon, variates and width must be positive".into()));
        }
        let (long, short) = self.patch_specs()?;
        if self.ablation == Ablation::NoPatcher {
            // raw tokens on both sides have equal resolution by construction
            if self.short_len == 0 || self.short_len >= self.lookback {
                return Err(Error::Configuration(format!(
                    "short range {} must lie strictly inside the look-back {}",
                    self.short_len, self.lookback
                )));
            }
        } else {
            check_scales(self.lookback, long, short, self.short_len)?;
        }
        self.mamba.validate()?;
        if self.lwt.heads == 0 || !self.d_model.is_multiple_of(self.lwt.heads) || !self.d_model.is_multiple_of(2) {
            return Err(Error::Configuration(format!(
                "width {} must be even and divisible by {} heads",
                self.d_model, self.lwt.heads
            )));
        }
        Ok(())
    }
}

/// Multivariate gate producing `(p_L, p_S)` per window.
#[derive(Debug, Clone)]
pub struct Router {
    pub proj: Linear,
    pub gate: Linear,
    pub lookback: usize,
    pub d_model: usize,
}

impl Router {
    pub fn new(store: &mut ParamStore, lookback: usize, variates: usize, d_model: usize, rng: &mut impl Rng) -> Self {
        let proj = Linear::new(store, "router.proj", variates, d_model, true, rng);
        let gate = Linear::new(store, "router.gate", lookback * d_model, 2, true, rng);
        // start from an even split so neither expert is suppressed before training
        store.get_mut(gate.weight).data_mut().fill(0.0);
        Router {
            proj,
            gate,
            lookback,
            d_model,
        }
    }

    /// `x: [B, L, M]` (normalized) to weights `[B, 2]`.
    pub fn route<T: Scalar>(&self, tape: &Tape<'_, T>, x: Var) -> Result<Var> {
        let logits = self.logits(tape, x)?;
        tape.softmax(logits)
    }

    pub fn logits<T: Scalar>(&self, tape: &Tape<'_, T>, x: Var) -> Result<Var> {
        let b = tape.shape(x)[0];
        let h = self.proj.forward(tape, x)?;
        let flat = tape.reshape(h, &[b, self.lookback * self.d_model])?;
        self.gate.forward(tape, flat)
    }
}

/// Intermediate values of one forward pass.
pub struct SstParts {
    /// `[B*M, N_L, D]`
    pub z_long: Option<Var>,
    /// `[B*M, N_S, D]`
    pub z_short: Option<Var>,
    /// `[B, 2]`
    pub weights: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct SstModel {
    pub config: SstConfig,
    pub params: ParamStore,
    pub router: Option<Router>,
    pub patterns: Option<PatternsExpert>,
    pub variations: Option<VariationsExpert>,
    pub head: Linear,
    pub long: PatchSpec,
    pub short: PatchSpec,
}

impl SstModel {
    pub fn new(config: SstConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (long, short) = config.patch_specs()?;
        let mut rng = init_rng(seed);
        let mut params = ParamStore::new();
        let d = config.d_model;
        let ab = config.ablation;
        let router = ab
            .uses_router()
            .then(|| Router::new(&mut params, config.lookback, config.variates, d, &mut rng));
        let patterns = if ab.uses_long() {
            Some(PatternsExpert::new(
                &mut params,
                "patterns",
                long.p,
                d,
                config.mamba_layers,
                &config.mamba,
                &mut rng,
            )?)
        } else {
            None
        };
        let variations = if ab.uses_short() {
            Some(VariationsExpert::new(&mut params, "variations", short.p, d, &config.lwt, &mut rng)?)
        } else {
            None
        };
        let fused = d * (if ab.uses_long() { long.num_patches() } else { 0 }
            + if ab.uses_short() { short.num_patches() } else { 0 });
        let head = Linear::new(&mut params, "head", fused, config.horizon, true, &mut rng);
        Ok(SstModel {
            config,
            params,
            router,
            patterns,
            variations,
            head,
            long,
            short,
        })
    }

    /// Length of the fused representation per variate.
    pub fn fused_len(&self) -> usize {
        self.head.in_dim
    }

    /// Experts and router on a normalized batch `xn: [B, L, M]`.
    pub fn parts<T: Scalar>(&self, tape: &Tape<'_, T>, xn: &Tensor) -> Result<SstParts> {
        let cfg = &self.config;
        let sh = xn.shape();
        if sh.len() != 3 || sh[1] != cfg.lookback || sh[2] != cfg.variates {
            return Err(Error::dim(format!(
                "model expects [B, {}, {}] windows, got {sh:?}",
                cfg.lookback, cfg.variates
            )));
        }
        let rows = to_rows(xn);
        let z_long = match &self.patterns {
            Some(p) => {
                let x = tape.constant(rows.cast());
                Some(p.forward(tape, tape.unfold(x, self.long.p, self.long.stride)?)?)
            }
            None => None,
        };
        let z_short = match &self.variations {
            Some(v) => {
                let l = cfg.lookback;
                let s = cfg.short_len;
                let tail: Vec<f64> = rows.data().chunks(l).flat_map(|r| r[l - s..].iter().copied()).collect();
                let x = tape.constant(Tensor::<T>::new(&[rows.shape()[0], s], tail.iter().map(|&v| T::of(v)).collect())?);
                Some(v.forward(tape, tape.unfold(x, self.short.p, self.short.stride)?)?)
            }
            None => None,
        };
        let weights = match &self.router {
            Some(r) => Some(r.route(tape, tape.constant(xn.cast()))?),
            None => None,
        };
        Ok(SstParts {
            z_long,
            z_short,
            weights,
        })
    }

    /// Fuse expert outputs with per-window weights `[B, 2]` (or plain
    /// concatenation when `weights` is `None`) and apply the head. Returns
    /// `[B, F, M]`.
    pub fn fuse_and_forecast<T: Scalar>(
        &self,
        tape: &Tape<'_, T>,
        z_long: Option<Var>,
        z_short: Option<Var>,
        weights: Option<Var>,
    ) -> Result<Var> {
        let m = self.config.variates;
        let rows = z_long
            .or(z_short)
            .map(|z| tape.shape(z)[0])
            .ok_or_else(|| Error::Contract("no expert output to fuse".into()))?;
        if rows % m != 0 {
            return Err(Error::dim(format!("{rows} rows is not a multiple of {m} variates")));
        }
        let b = rows / m;
        // [B, 2] -> [B*M, 2]: every variate of a window shares its weights
        let per_row = match weights {
            Some(w) => {
                if tape.shape(w) != [b, 2] {
                    return Err(Error::dim(format!("router weights {:?} for {b} windows", tape.shape(w))));
                }
                let w3 = tape.reshape(w, &[b, 1, 2])?;
                let spread = tape.mul(w3, tape.constant(Tensor::<T>::ones(&[b, m, 2])))?;
                Some(tape.reshape(spread, &[rows, 2])?)
            }
            None => None,
        };
        let mut pieces = Vec::with_capacity(2);
        for (slot, z) in [(0, z_long), (1, z_short)] {
            let Some(z) = z else { continue };
            let flat = tape.flatten_from(z, 1)?;
            let weighted = match per_row {
                Some(w) => tape.mul(flat, tape.slice(w, 1, slot, 1)?)?,
                None => flat,
            };
            pieces.push(weighted);
        }
        let fused = if pieces.len() == 1 {
            pieces[0]
        } else {
            tape.concat(&pieces, 1)?
        };
        let y = self.head.forward(tape, fused)?;
        let y = tape.reshape(y, &[b, m, self.config.horizon])?;
        tape.permute(y, &[0, 2, 1])
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, x: &Tensor) -> Result<Forward> {
        let (xn, stats) = revin_batch(x)?;
        let parts = self.parts(tape, &xn)?;
        let pred = self.fuse_and_forecast(tape, parts.z_long, parts.z_short, parts.weights)?;
        Ok(Forward {
            pred,
            stats: Some(stats),
            router: parts.weights,
        })
    }
}
