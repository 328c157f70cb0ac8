//! Seed-averaged model comparison on a generated series.

use serde::{Deserialize, Serialize};

use crate::data::{split_dataset, synth_generate, Dataset, SplitScheme, StandardScaler, SynthSpec};
use crate::error::Result;
use crate::lwt::LwtConfig;
use crate::mamba::MambaConfig;
use crate::model::{
    Ablation, DLinearConfig, Embedding, Model, ModelSpec, Recipe, SstConfig, VariantConfig, VariantSpec,
};
use crate::train::{evaluate, train, ForecastReport, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComparisonConfig {
    pub synth: SynthSpec,
    pub lookback: usize,
    pub short_len: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub d_state: usize,
    /// Blocks per stacked variant.
    pub depth: usize,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        ComparisonConfig {
            synth: SynthSpec::default(),
            lookback: 196,
            short_len: 98,
            horizon: 96,
            d_model: 16,
            d_state: 8,
            depth: 1,
            seeds: vec![0, 1, 2, 3, 4],
            train: TrainConfig {
                lr: 1e-3,
                batch_size: 32,
                max_epochs: 10,
                patience: 3,
                window_stride: 8,
                eval_stride: 4,
                ..TrainConfig::default()
            },
        }
    }
}

/// Train/validation/test splits standardized with training statistics.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn new(ds: &Dataset, scheme: SplitScheme, lookback: usize, horizon: usize) -> Result<Splits> {
        let (tr, va, te) = split_dataset(ds, scheme, lookback, horizon)?;
        let sc = StandardScaler::fit(&tr);
        Ok(Splits {
            train: sc.transform(&tr),
            val: sc.transform(&va),
            test: sc.transform(&te),
        })
    }
}

impl ComparisonConfig {
    pub fn splits(&self) -> Result<Splits> {
        let (ds, _) = synth_generate(&self.synth)?;
        Splits::new(&ds, SplitScheme::STANDARD_RATIO, self.lookback, self.horizon)
    }

    fn mamba(&self) -> MambaConfig {
        MambaConfig {
            d_state: self.d_state,
            ..MambaConfig::default()
        }
    }

    pub fn sst(&self, ablation: Ablation) -> ModelSpec {
        ModelSpec::Sst(SstConfig {
            lookback: self.lookback,
            short_len: self.short_len,
            horizon: self.horizon,
            variates: 1,
            d_model: self.d_model,
            mamba_layers: 1,
            mamba: self.mamba(),
            lwt: LwtConfig {
                heads: 2,
                layers: 1,
                ffn_mult: 2,
                ..LwtConfig::default()
            },
            ablation,
            ..SstConfig::default()
        })
    }

    pub fn variant(&self, recipe: Recipe, embedding: Embedding) -> ModelSpec {
        ModelSpec::Variant(VariantConfig {
            lookback: self.lookback,
            horizon: self.horizon,
            d_model: self.d_model,
            heads: 2,
            ffn_mult: 2,
            mamba: self.mamba(),
            ..VariantConfig::new(VariantSpec {
                depth: self.depth,
                ..VariantSpec::new(recipe, embedding)
            })
        })
    }

    pub fn dlinear(&self) -> ModelSpec {
        ModelSpec::Dlinear(DLinearConfig {
            lookback: self.lookback,
            horizon: self.horizon,
            ..DLinearConfig::default()
        })
    }

    /// Every stacked variant with both embeddings.
    pub fn family(&self) -> Vec<ModelSpec> {
        Recipe::ALL
            .into_iter()
            .flat_map(|r| [Embedding::Conv, Embedding::Pi].map(|e| self.variant(r, e)))
            .collect()
    }

    pub fn ablations(&self) -> Vec<ModelSpec> {
        [
            Ablation::PatternsOnly,
            Ablation::VariationsOnly,
            Ablation::NoPatcher,
            Ablation::NoRouter,
        ]
        .map(|a| self.sst(a))
        .to_vec()
    }
}

/// Train one model with one seed and report on the test split.
pub fn run_one(spec: &ModelSpec, splits: &Splits, cfg: &TrainConfig, seed: u64) -> Result<ForecastReport> {
    let mut model = Model::build(spec, seed)?;
    let tc = TrainConfig { seed, ..cfg.clone() };
    train(&mut model, &splits.train, &splits.val, &tc, |_| {})?;
    evaluate(&model, &splits.test, tc.eval_stride, 64)
}

/// Seed-averaged test metrics for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAverage {
    pub model: String,
    pub mse: f64,
    pub mae: f64,
    pub per_seed_mse: Vec<f64>,
}

pub fn run_seeds(spec: &ModelSpec, splits: &Splits, cfg: &ComparisonConfig) -> Result<SeedAverage> {
    let mut reports = Vec::with_capacity(cfg.seeds.len());
    for &s in &cfg.seeds {
        reports.push(run_one(spec, splits, &cfg.train, s)?);
    }
    let n = reports.len() as f64;
    Ok(SeedAverage {
        model: reports[0].model.clone(),
        mse: reports.iter().map(|r| r.mse).sum::<f64>() / n,
        mae: reports.iter().map(|r| r.mae).sum::<f64>() / n,
        per_seed_mse: reports.iter().map(|r| r.mse).collect(),
    })
}
