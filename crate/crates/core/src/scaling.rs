//! Time and memory scaling of one forward+backward pass versus look-back
//! length, in single precision.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::lwt::LwtConfig;
use crate::mamba::MambaConfig;
use crate::memory;
use crate::model::{Embedding, Model, Recipe, SstConfig, SstModel, VariantConfig, VariantModel, VariantSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchModel {
    /// Attention over one token per raw step.
    FullAttentionTransformer,
    /// Attention over patch tokens.
    PatchedTransformer,
    Sst,
}

impl BenchModel {
    pub const ALL: [BenchModel; 3] = [
        BenchModel::FullAttentionTransformer,
        BenchModel::PatchedTransformer,
        BenchModel::Sst,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchModel::FullAttentionTransformer => "full_attention_transformer",
            BenchModel::PatchedTransformer => "patched_transformer",
            BenchModel::Sst => "sst",
        }
    }
}

impl fmt::Display for BenchModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchModel::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Configuration(format!("unknown bench model `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub models: Vec<BenchModel>,
    pub lengths: Vec<usize>,
    /// Timed trials per point (after one untimed warm-up).
    pub trials: usize,
    pub d_model: usize,
    pub horizon: usize,
    /// Soft cap on live tensor bytes; crossing it marks the point `oom`.
    /// Zero disables the cap.
    pub memory_cap: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            models: BenchModel::ALL.to_vec(),
            lengths: vec![256, 512, 1024, 2048, 4096, 8192],
            trials: 5,
            d_model: 16,
            horizon: 16,
            memory_cap: Some(512 << 20),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Oom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub model: String,
    #[serde(rename = "L")]
    pub length: usize,
    /// Median over the timed trials; zero when `oom`.
    pub forward_backward_ms: f64,
    pub peak_bytes: usize,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub model: String,
    /// `None` when fewer than four points completed.
    pub slope: Option<f64>,
    pub points: usize,
    /// First length that ran out of memory.
    pub first_oom: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub records: Vec<ScalingRecord>,
    pub fits: Vec<SlopeFit>,
}

impl ScalingReport {
    pub fn fit(&self, model: BenchModel) -> Option<&SlopeFit> {
        self.fits.iter().find(|f| f.model == model.as_str())
    }
}

/// Least-squares slope of `ln y` against `ln x`; needs at least four points.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 4 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return None;
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Model of the given kind for look-back `l`.
pub fn bench_model(kind: BenchModel, l: usize, cfg: &BenchConfig) -> Result<Model> {
    let d = cfg.d_model;
    let mamba = MambaConfig {
        d_state: 8,
        ..MambaConfig::default()
    };
    let transformer = |embedding| {
        let mut c = VariantConfig::new(VariantSpec {
            depth: 1,
            ..VariantSpec::new(Recipe::Transformer, embedding)
        });
        c.lookback = l;
        c.horizon = cfg.horizon;
        c.d_model = d;
        c.heads = 2;
        c.ffn_mult = 2;
        c
    };
    Ok(match kind {
        BenchModel::FullAttentionTransformer => {
            Model::Variant(VariantModel::new(transformer(Embedding::Conv), cfg.seed)?)
        }
        BenchModel::PatchedTransformer => Model::Variant(VariantModel::new(transformer(Embedding::Pi), cfg.seed)?),
        BenchModel::Sst => Model::Sst(SstModel::new(
            SstConfig {
                lookback: l,
                short_len: l / 2,
                horizon: cfg.horizon,
                d_model: d,
                mamba_layers: 1,
                mamba,
                lwt: LwtConfig {
                    heads: 2,
                    layers: 1,
                    ffn_mult: 2,
                    ..LwtConfig::default()
                },
                ..SstConfig::default()
            },
            cfg.seed,
        )?),
    })
}

/// One single-precision forward+backward of `model` on `x`.
fn step(model: &Model, params: &ParamStore<f32>, x: &Tensor) -> Result<()> {
    let tape = Tape::with_params(params);
    let out = model.forward(&tape, x)?;
    let loss = tape.mean(tape.mul(out.pred, out.pred)?)?;
    tape.backward(loss)?;
    Ok(())
}

/// Time one model at one length. Returns `Ok(None)` when the memory cap is crossed.
pub fn measure(kind: BenchModel, l: usize, cfg: &BenchConfig) -> Result<Option<(f64, usize)>> {
    let model = bench_model(kind, l, cfg)?;
    let params: ParamStore<f32> = model.params().cast();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ l as u64);
    let x = Tensor::new(&[1, l, 1], (0..l).map(|_| StandardNormal.sample(&mut rng)).collect())?;
    let base = memory::live_bytes();
    let cap = cfg.memory_cap.filter(|&c| c > 0).map(|c| c + base);
    let prev = memory::limit();
    memory::set_limit(cap);
    memory::reset_peak();
    let result = (|| {
        step(&model, &params, &x)?;
        let peak = memory::peak_bytes().saturating_sub(base);
        let mut times = Vec::with_capacity(cfg.trials);
        for _ in 0..cfg.trials {
            let t0 = Instant::now();
            step(&model, &params, &x)?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        Ok((times[times.len() / 2], peak))
    })();
    memory::set_limit(prev);
    match result {
        Ok(v) => Ok(Some(v)),
        Err(Error::OutOfMemory { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Measure every model over the configured lengths. Once a model exceeds
/// the cap, it is recorded `oom` at that length and all longer ones.
pub fn bench_scaling(models: &[BenchModel], cfg: &BenchConfig) -> Result<ScalingReport> {
    if cfg.trials < 5 {
        return Err(Error::Configuration(format!("need at least 5 timed trials, got {}", cfg.trials)));
    }
    let mut lengths = cfg.lengths.clone();
    lengths.sort_unstable();
    lengths.dedup();
    let mut records = Vec::new();
    let mut fits = Vec::new();
    for &kind in models {
        let mut oom_at = None;
        let mut ok = Vec::new();
        for &l in &lengths {
            let m = if oom_at.is_some() { None } else { measure(kind, l, cfg)? };
            let rec = match m {
                Some((ms, peak)) => {
                    ok.push((l as f64, ms));
                    ScalingRecord {
                        model: kind.to_string(),
                        length: l,
                        forward_backward_ms: ms,
                        peak_bytes: peak,
                        status: Status::Ok,
                    }
                }
                None => {
                    oom_at.get_or_insert(l);
                    ScalingRecord {
                        model: kind.to_string(),
                        length: l,
                        forward_backward_ms: 0.0,
                        peak_bytes: 0,
                        status: Status::Oom,
                    }
                }
            };
            records.push(rec);
        }
        fits.push(SlopeFit {
            model: kind.to_string(),
            slope: log_log_slope(&ok),
            points: ok.len(),
            first_oom: oom_at,
        });
    }
    Ok(ScalingReport { records, fits })
}
