//! Run configuration: a sectioned TOML file plus `key=value` overrides.
//!
//! Overrides are applied in order after the file, so the last one wins. A
//! key may be qualified (`lwt.window=5`) or bare (`window=5`) when exactly
//! one section has a field of that name.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{load_csv, synth_generate, Dataset, SplitScheme, SynthSpec};
use crate::error::{Error, Result};
use crate::experiment::Splits;
use crate::lwt::LwtConfig;
use crate::mamba::MambaConfig;
use crate::model::{Ablation, DLinearConfig, Embedding, ModelSpec, Recipe, SstConfig, VariantConfig, VariantSpec};
use crate::scaling::BenchConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// 70/10/20 chronological split.
    #[default]
    Ratio,
    /// 12/4/4 months of hourly data.
    EttHourly,
    /// 12/4/4 months of 15-minute data.
    EttMinute,
}

impl SplitKind {
    pub fn scheme(self) -> SplitScheme {
        match self {
            SplitKind::Ratio => SplitScheme::STANDARD_RATIO,
            SplitKind::EttHourly => SplitScheme::EttCalendar { steps_per_hour: 1 },
            SplitKind::EttMinute => SplitScheme::EttCalendar { steps_per_hour: 4 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// CSV file; when absent the `[synth]` series is generated instead.
    pub path: Option<PathBuf>,
    pub split: SplitKind,
}

/// Which model to build and its shape. Fields irrelevant to the chosen
/// kind are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `sst`, `dlinear`, or a stacked recipe (`transformer`, `mamba`,
    /// `attention_mamba`, `mamba_attention`, `mambaformer`).
    pub kind: String,
    pub lookback: usize,
    pub horizon: usize,
    pub d_model: usize,
    // sst
    pub short_len: usize,
    pub patch_long: usize,
    pub stride_long: usize,
    pub patch_short: usize,
    pub stride_short: usize,
    pub mamba_layers: usize,
    pub ablation: Ablation,
    // stacked variants
    pub embedding: Embedding,
    pub depth: usize,
    pub positional: Option<bool>,
    pub heads: usize,
    pub ffn_mult: usize,
    pub patch: usize,
    pub stride: usize,
    // dlinear
    pub kernel: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let sst = SstConfig::default();
        let var = VariantConfig::new(VariantSpec::new(Recipe::Mambaformer, Embedding::Pi));
        ModelSection {
            kind: "sst".into(),
            lookback: sst.lookback,
            horizon: sst.horizon,
            d_model: sst.d_model,
            short_len: sst.short_len,
            patch_long: sst.patch_long,
            stride_long: sst.stride_long,
            patch_short: sst.patch_short,
            stride_short: sst.stride_short,
            mamba_layers: sst.mamba_layers,
            ablation: sst.ablation,
            embedding: var.spec.embedding,
            depth: var.spec.depth,
            positional: None,
            heads: var.heads,
            ffn_mult: var.ffn_mult,
            patch: var.patch,
            stride: var.stride,
            kernel: DLinearConfig::default().kernel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "runs/latest".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub synth: SynthSpec,
    pub model: ModelSection,
    pub mamba: MambaConfig,
    pub lwt: LwtConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub output: OutputSection,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Configuration(e.to_string())
}

/// Parse the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Known `(section, key)` pairs, including optional fields that serialize
/// to nothing by default.
fn schema() -> Vec<(String, String)> {
    let tree = match Value::try_from(RunConfig::default()).expect("default config serializes") {
        Value::Table(t) => t,
        _ => unreachable!("config serializes to a table"),
    };
    let mut keys: Vec<(String, String)> = tree
        .iter()
        .filter_map(|(s, v)| v.as_table().map(|t| (s, t)))
        .flat_map(|(s, t)| t.keys().map(move |k| (s.clone(), k.clone())))
        .collect();
    for (s, k) in [("data", "path"), ("model", "positional")] {
        keys.push((s.into(), k.into()));
    }
    keys
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        RunConfig::resolve(Some(text), &[])
    }

    /// Merge an optional file body with ordered `key=value` overrides.
    pub fn resolve(file: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
        let mut tree: Table = match file {
            Some(text) => toml::from_str(text).map_err(config_err)?,
            None => Table::new(),
        };
        let keys = schema();
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| config_err(format!("override `{item}` is not key=value")))?;
            let key = key.trim();
            let (section, field) = match key.split_once('.') {
                Some((s, f)) => (s.to_string(), f.to_string()),
                None => {
                    let hits: Vec<&(String, String)> = keys.iter().filter(|(_, k)| k == key).collect();
                    match hits.as_slice() {
                        [one] => (*one).clone(),
                        [] => return Err(config_err(format!("unknown key `{key}`"))),
                        many => {
                            let names: Vec<String> = many.iter().map(|(s, k)| format!("{s}.{k}")).collect();
                            return Err(config_err(format!(
                                "key `{key}` is ambiguous; use one of {}",
                                names.join(", ")
                            )));
                        }
                    }
                }
            };
            let slot = tree
                .entry(section.clone())
                .or_insert_with(|| Value::Table(Table::new()));
            let table = slot
                .as_table_mut()
                .ok_or_else(|| config_err(format!("`{section}` is not a section")))?;
            table.insert(field, parse_value(raw.trim()));
        }
        let cfg: RunConfig = Value::Table(tree).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.mamba.validate()?;
        self.train.validate()?;
        if self.data.path.is_none() {
            self.synth.validate().map_err(config_err)?;
        }
        let m = &self.model;
        if m.kind != "sst" && m.kind != "dlinear" {
            Recipe::from_str(&m.kind)?;
        }
        Ok(())
    }

    /// Fully resolved settings as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data.path {
            Some(p) => load_csv(p),
            None => Ok(synth_generate(&self.synth)?.0),
        }
    }

    pub fn splits(&self, ds: &Dataset) -> Result<Splits> {
        Splits::new(ds, self.data.split.scheme(), self.model.lookback, self.model.horizon)
    }

    pub fn model_spec(&self, variates: usize) -> Result<ModelSpec> {
        let m = &self.model;
        Ok(match m.kind.as_str() {
            "sst" => ModelSpec::Sst(SstConfig {
                lookback: m.lookback,
                short_len: m.short_len,
                horizon: m.horizon,
                variates,
                d_model: m.d_model,
                patch_long: m.patch_long,
                stride_long: m.stride_long,
                patch_short: m.patch_short,
                stride_short: m.stride_short,
                mamba_layers: m.mamba_layers,
                mamba: self.mamba,
                lwt: self.lwt,
                ablation: m.ablation,
            }),
            "dlinear" => ModelSpec::Dlinear(DLinearConfig {
                lookback: m.lookback,
                horizon: m.horizon,
                variates,
                kernel: m.kernel,
            }),
            other => ModelSpec::Variant(VariantConfig {
                lookback: m.lookback,
                horizon: m.horizon,
                variates,
                d_model: m.d_model,
                heads: m.heads,
                ffn_mult: m.ffn_mult,
                patch: m.patch,
                stride: m.stride,
                mamba: self.mamba,
                ..VariantConfig::new(VariantSpec {
                    depth: m.depth,
                    use_positional: m.positional,
                    ..VariantSpec::new(Recipe::from_str(other)?, m.embedding)
                })
            }),
        })
    }
}
