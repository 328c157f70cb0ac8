//! Datasets, splits and supervised windows.

mod decompose;
mod metrics;
pub(crate) mod revin;
mod synth;

use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

pub use decompose::moving_average_decompose;
pub use metrics::{metric_mae, metric_mse, Metrics};
pub use revin::{revin_denormalize, revin_normalize, NormStats, StandardScaler, REVIN_EPS};
pub use synth::{synth_generate, SynthComponents, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `T x M` multivariate series with ascending timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// Row-major `T x M`.
    pub values: Vec<f64>,
    pub variate_names: Vec<String>,
    pub timestamps: Vec<NaiveDateTime>,
    pub frequency: String,
    /// Leading rows borrowed from the preceding split as look-back context;
    /// no target may start inside them.
    pub context: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, values: Vec<f64>, variate_names: Vec<String>) -> Result<Self> {
        let m = variate_names.len();
        if m == 0 || !values.len().is_multiple_of(m) {
            return Err(Error::dim(format!(
                "{} values cannot form rows of {m} variates",
                values.len()
            )));
        }
        let t = values.len() / m;
        let start = chrono::NaiveDate::from_ymd_opt(2016, 7, 1)
            .and_then(|d| d.and_hms_opt(0, 0, 0))
            .expect("valid date");
        let timestamps = (0..t).map(|i| start + chrono::Duration::hours(i as i64)).collect();
        Ok(Dataset {
            name: name.into(),
            values,
            variate_names,
            timestamps,
            frequency: "1h".into(),
            context: 0,
        })
    }

    /// Number of rows `T` (including any context rows).
    pub fn len(&self) -> usize {
        self.values.len() / self.num_variates()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows owned by this dataset, excluding borrowed context.
    pub fn own_len(&self) -> usize {
        self.len() - self.context
    }

    pub fn num_variates(&self) -> usize {
        self.variate_names.len()
    }

    pub fn value(&self, t: usize, m: usize) -> f64 {
        self.values[t * self.num_variates() + m]
    }

    /// Column `m` as a vector.
    pub fn column(&self, m: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.value(t, m)).collect()
    }

    /// Rows `start..end` as a new dataset (context reset to zero).
    pub fn rows(&self, start: usize, end: usize) -> Dataset {
        let m = self.num_variates();
        Dataset {
            name: self.name.clone(),
            values: self.values[start * m..end * m].to_vec(),
            variate_names: self.variate_names.clone(),
            timestamps: self.timestamps[start..end].to_vec(),
            frequency: self.frequency.clone(),
            context: 0,
        }
    }

    /// Keep only the listed variates.
    pub fn select_variates(&self, keep: &[usize]) -> Result<Dataset> {
        let m = self.num_variates();
        if keep.is_empty() || keep.iter().any(|&k| k >= m) {
            return Err(Error::Configuration(format!("variate selection {keep:?} out of 0..{m}")));
        }
        let mut values = Vec::with_capacity(self.len() * keep.len());
        for t in 0..self.len() {
            values.extend(keep.iter().map(|&k| self.value(t, k)));
        }
        Ok(Dataset {
            values,
            variate_names: keep.iter().map(|&k| self.variate_names[k].clone()).collect(),
            ..self.clone()
        })
    }
}

const TIME_FORMATS: &[&str] = &["%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M:%S", "%Y/%m/%d %H:%M"];

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    TIME_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| {
            chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

fn describe_frequency(ts: &[NaiveDateTime]) -> String {
    let Some(step) = ts.windows(2).next().map(|w| (w[1] - w[0]).num_seconds()) else {
        return "unknown".into();
    };
    match step {
        s if s % 86_400 == 0 => format!("{}d", s / 86_400),
        s if s % 3_600 == 0 => format!("{}h", s / 3_600),
        s if s % 60 == 0 => format!("{}min", s / 60),
        s => format!("{s}s"),
    }
}

/// Read an ETT-style CSV: header row, timestamp in the first column, numeric
/// variates after it.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let load_err = |row: usize, column: usize, message: String| Error::Load {
        path: path.to_path_buf(),
        row,
        column,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| load_err(0, 0, e.to_string()))?;
    let header = reader.headers().map_err(|e| load_err(0, 0, e.to_string()))?.clone();
    if header.len() < 2 {
        return Err(load_err(0, 0, "need a timestamp column and at least one variate".into()));
    }
    let variate_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let m = variate_names.len();
    let mut values = Vec::new();
    let mut timestamps: Vec<NaiveDateTime> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        // 1-based data row numbers (the header is row 0)
        let row = i + 1;
        let rec = rec.map_err(|e| load_err(row, 0, e.to_string()))?;
        if rec.len() != m + 1 {
            return Err(load_err(row, rec.len(), format!("expected {} fields, found {}", m + 1, rec.len())));
        }
        let ts = parse_timestamp(&rec[0])
            .ok_or_else(|| load_err(row, 0, format!("unparsable timestamp `{}`", &rec[0])))?;
        if timestamps.last().is_some_and(|&prev| ts <= prev) {
            return Err(Error::Ordering {
                path: path.to_path_buf(),
                row,
            });
        }
        timestamps.push(ts);
        for col in 1..=m {
            let cell = rec[col].trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| load_err(row, col, format!("unparsable value `{cell}`")))?;
            if !v.is_finite() {
                return Err(load_err(row, col, format!("missing or non-finite value `{cell}`")));
            }
            values.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(load_err(1, 0, "no data rows".into()));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset {
        name,
        values,
        variate_names,
        frequency: describe_frequency(&timestamps),
        timestamps,
        context: 0,
    })
}

/// Write a dataset back out in the same CSV layout.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Io(e.into()))?;
    let mut header = vec!["date".to_string()];
    header.extend(ds.variate_names.iter().cloned());
    w.write_record(&header).map_err(|e| Error::Io(e.into()))?;
    for t in 0..ds.len() {
        let mut rec = vec![ds.timestamps[t].format("%Y-%m-%d %H:%M:%S").to_string()];
        rec.extend((0..ds.num_variates()).map(|m| format!("{:?}", ds.value(t, m))));
        w.write_record(&rec).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    /// Fractions for train and test; validation takes the rest.
    Ratio { train: f64, test: f64 },
    /// 12/4/4 months of 30 days; `steps_per_hour` is 1 for hourly and 4 for
    /// 15-minute data.
    EttCalendar { steps_per_hour: usize },
}

impl SplitScheme {
    pub const STANDARD_RATIO: SplitScheme = SplitScheme::Ratio { train: 0.7, test: 0.2 };

    /// `(train, val, test)` sizes for a series of length `t`.
    pub fn sizes(&self, t: usize) -> Result<(usize, usize, usize)> {
        match *self {
            SplitScheme::Ratio { train, test } => {
                if !(train > 0.0 && test > 0.0 && train + test < 1.0) {
                    return Err(Error::Configuration(format!(
                        "split ratios train={train}, test={test} leave no validation data"
                    )));
                }
                let n_train = (train * t as f64).floor() as usize;
                let n_test = (test * t as f64).floor() as usize;
                Ok((n_train, t - n_train - n_test, n_test))
            }
            SplitScheme::EttCalendar { steps_per_hour } => {
                let month = 30 * 24 * steps_per_hour;
                let sizes = (12 * month, 4 * month, 4 * month);
                if sizes.0 + sizes.1 + sizes.2 > t {
                    return Err(Error::InsufficientData {
                        needed: sizes.0 + sizes.1 + sizes.2,
                        available: t,
                    });
                }
                Ok(sizes)
            }
        }
    }
}

/// Contiguous train/validation/test segments. Validation and test reach back
/// `lookback` steps into the preceding segment; every target lies within its
/// own segment.
pub fn split_dataset(
    ds: &Dataset,
    scheme: SplitScheme,
    lookback: usize,
    horizon: usize,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (n_train, n_val, n_test) = scheme.sizes(ds.len())?;
    let train = ds.rows(0, n_train);
    let segment = |start: usize, len: usize| {
        let ctx = lookback.min(start);
        let mut seg = ds.rows(start - ctx, start + len);
        seg.context = ctx;
        seg
    };
    let val = segment(n_train, n_val);
    let test = segment(n_train + n_val, n_test);
    let needed = lookback + horizon;
    for part in [&train, &val, &test] {
        // the part must host at least one window whose target is its own
        if part.len() < needed || part.own_len() < horizon {
            return Err(Error::InsufficientData {
                needed,
                available: part.len(),
            });
        }
    }
    Ok((train, val, test))
}

/// One supervised example.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesWindow {
    /// `L x M`
    pub lookback: Tensor,
    /// `F x M`
    pub target: Tensor,
    pub origin_index: usize,
}

/// Origins of every window whose target starts at or after the dataset's
/// context rows.
pub fn window_origins(ds: &Dataset, lookback: usize, horizon: usize, stride: usize) -> Result<Vec<usize>> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Parameter("window lengths and stride must be positive".into()));
    }
    let t = ds.len();
    if t < lookback + horizon {
        return Err(Error::InsufficientData {
            needed: lookback + horizon,
            available: t,
        });
    }
    let first = ds.context.saturating_sub(lookback);
    Ok((first..=t - lookback - horizon).step_by(stride).collect())
}

pub fn make_windows(ds: &Dataset, lookback: usize, horizon: usize, stride: usize) -> Result<Vec<SeriesWindow>> {
    let m = ds.num_variates();
    window_origins(ds, lookback, horizon, stride)?
        .into_iter()
        .map(|o| {
            let lb = &ds.values[o * m..(o + lookback) * m];
            let tg = &ds.values[(o + lookback) * m..(o + lookback + horizon) * m];
            Ok(SeriesWindow {
                lookback: Tensor::new(&[lookback, m], lb.to_vec())?,
                target: Tensor::new(&[horizon, m], tg.to_vec())?,
                origin_index: o,
            })
        })
        .collect()
}

/// Stack the windows at `origins` into `[B, L, M]` inputs and `[B, F, M]`
/// targets.
pub fn gather_batch(ds: &Dataset, origins: &[usize], lookback: usize, horizon: usize) -> Result<(Tensor, Tensor)> {
    let m = ds.num_variates();
    let mut x = Vec::with_capacity(origins.len() * lookback * m);
    let mut y = Vec::with_capacity(origins.len() * horizon * m);
    for &o in origins {
        if o + lookback + horizon > ds.len() {
            return Err(Error::InsufficientData {
                needed: o + lookback + horizon,
                available: ds.len(),
            });
        }
        x.extend_from_slice(&ds.values[o * m..(o + lookback) * m]);
        y.extend_from_slice(&ds.values[(o + lookback) * m..(o + lookback + horizon) * m]);
    }
    Ok((
        Tensor::new(&[origins.len(), lookback, m], x)?,
        Tensor::new(&[origins.len(), horizon, m], y)?,
    ))
}
