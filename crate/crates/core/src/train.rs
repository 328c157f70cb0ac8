//! Optimizer, training loop with early stopping, and evaluation.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore, Tape, Var};
use crate::data::{gather_batch, window_origins, Dataset, Metrics};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Step between consecutive training window origins.
    pub window_stride: usize,
    /// Step between evaluation window origins.
    pub eval_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            window_stride: 1,
            eval_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Configuration(m.to_string()));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decay rates must lie in [0, 1)");
        }
        if !(self.eps_adam > 0.0) {
            return bad("optimizer epsilon must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.window_stride == 0 || self.eval_stride == 0 {
            return bad("batch size, epoch budget and strides must be positive");
        }
        Ok(())
    }
}

/// Bias-corrected adaptive moment estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect::<Vec<_>>();
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps_adam,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Apply one update. Every parameter must have a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients<f64>) -> Result<()> {
        let ids: Vec<_> = params.ids().collect();
        if ids.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} moment buffers for {} parameters",
                self.m.len(),
                ids.len()
            )));
        }
        let mut all = Vec::with_capacity(ids.len());
        for &id in &ids {
            let g = grads
                .param(id)
                .ok_or_else(|| Error::Contract(format!("no gradient for parameter `{}`", params.name(id))))?;
            if g.shape() != params.get(id).shape() {
                return Err(Error::dim(format!("gradient shape {:?} for `{}`", g.shape(), params.name(id))));
            }
            all.push(g.data().to_vec());
        }
        self.apply(params, &all);
        Ok(())
    }

    /// Update from raw gradient buffers in parameter order.
    pub fn apply(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let g = grads[k][i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub elapsed_ms: f64,
}

impl EpochRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_losses(&self, other: &EpochRecord) -> bool {
        self.epoch == other.epoch
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.val_loss.to_bits() == other.val_loss.to_bits()
    }
}

pub fn write_history(records: &[EpochRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Patience-based stopping on a validation loss sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    wait: usize,
    seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            wait: 0,
            seen: 0,
        }
    }

    /// Record one epoch's loss; returns `(improved, stop)`.
    pub fn observe(&mut self, loss: f64) -> (bool, bool) {
        self.seen += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.seen;
            self.wait = 0;
            (true, false)
        } else {
            self.wait += 1;
            (false, self.wait >= self.patience)
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Batch loss on the scale the model trains on: normalized targets for
/// instance-normalized models, raw otherwise.
fn batch_loss(tape: &Tape<'_>, model: &Model, x: &Tensor, y: &Tensor) -> Result<Var> {
    let out = model.forward(tape, x)?;
    let target = match &out.stats {
        Some(s) => s.normalize(y)?,
        None => y.clone(),
    };
    tape.mse(out.pred, tape.constant(target))
}

/// Mean training-scale loss over all windows of `ds`.
pub fn validation_loss(model: &Model, ds: &Dataset, stride: usize, batch_size: usize) -> Result<f64> {
    let (l, f) = (model.lookback(), model.horizon());
    let origins = window_origins(ds, l, f, stride)?;
    if origins.is_empty() {
        return Err(Error::Contract("no validation windows".into()));
    }
    let mut total = 0.0;
    for chunk in origins.chunks(batch_size) {
        let (x, y) = gather_batch(ds, chunk, l, f)?;
        let tape = Tape::with_params(model.params());
        let loss = batch_loss(&tape, model, &x, &y)?;
        total += tape.item(loss)? * chunk.len() as f64;
    }
    Ok(total / origins.len() as f64)
}

/// Minimize MSE on `train`, early-stop on `val`, and restore the best
/// parameters. `on_epoch` sees each record as it is produced.
pub fn train(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (l, f) = (model.lookback(), model.horizon());
    if train.num_variates() != model.variates() {
        return Err(Error::Configuration(format!(
            "model built for {} variates, data has {}",
            model.variates(),
            train.num_variates()
        )));
    }
    let mut origins = window_origins(train, l, f, cfg.window_stride)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.params(), cfg);
    let mut best = model.params().clone();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let start = Instant::now();
    for epoch in 1..=cfg.max_epochs {
        origins.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in origins.chunks(cfg.batch_size) {
            let (x, y) = gather_batch(train, chunk, l, f)?;
            let (loss, grads) = {
                let tape = Tape::with_params(model.params());
                let loss = batch_loss(&tape, model, &x, &y)?;
                let v = tape.item(loss)?;
                if !v.is_finite() {
                    return Err(Error::Diverged { epoch, loss: v });
                }
                (v, tape.backward(loss)?)
            };
            opt.step(model.params_mut(), &grads)?;
            sum += loss * chunk.len() as f64;
        }
        let train_loss = sum / origins.len() as f64;
        let val_loss = validation_loss(model, val, cfg.eval_stride, cfg.batch_size.max(64))?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: val_loss });
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_epoch(&rec);
        history.push(rec);
        let (improved, stop) = stopper.observe(val_loss);
        if improved {
            best = model.params().clone();
        }
        if stop {
            break;
        }
    }
    model.params_mut().copy_values_from(&best)?;
    Ok(TrainOutcome {
        history,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best,
    })
}

/// Router weight summary over evaluated windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterSummary {
    pub mean_long: f64,
    pub std_long: f64,
    pub mean_short: f64,
    pub std_short: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub model: String,
    pub lookback: usize,
    pub horizon: usize,
    pub windows: usize,
    pub mse: f64,
    pub mae: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub router: Option<RouterSummary>,
}

impl ForecastReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn summarize(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Metrics of denormalized forecasts against the targets of `ds`.
pub fn evaluate(model: &Model, ds: &Dataset, stride: usize, batch_size: usize) -> Result<ForecastReport> {
    let (l, f) = (model.lookback(), model.horizon());
    let origins = window_origins(ds, l, f, stride).map_err(|e| match e {
        Error::InsufficientData { .. } => Error::Contract(format!("empty test set: {e}")),
        e => e,
    })?;
    if origins.is_empty() {
        return Err(Error::Contract("empty test set".into()));
    }
    let mut metrics = Metrics::default();
    let mut long = Vec::new();
    for chunk in origins.chunks(batch_size.max(1)) {
        let (x, y) = gather_batch(ds, chunk, l, f)?;
        let tape = Tape::with_params(model.params());
        let out = model.forward(&tape, &x)?;
        let pred = tape.to_tensor(out.pred);
        let pred = match &out.stats {
            Some(s) => s.denormalize(&pred)?,
            None => pred,
        };
        metrics.update(pred.data(), y.data());
        if let Some(p) = out.router {
            long.extend(tape.value(p).data().iter().step_by(2).copied());
        }
    }
    let router = (!long.is_empty()).then(|| {
        let (mean_long, std_long) = summarize(&long);
        let short: Vec<f64> = long.iter().map(|p| 1.0 - p).collect();
        let (mean_short, std_short) = summarize(&short);
        RouterSummary {
            mean_long,
            std_long,
            mean_short,
            std_short,
        }
    });
    Ok(ForecastReport {
        model: model.name(),
        lookback: l,
        horizon: f,
        windows: origins.len(),
        mse: metrics.mse(),
        mae: metrics.mae(),
        router,
    })
}

/// Metrics of repeating the last observed value across the horizon.
pub fn persistence_report(ds: &Dataset, lookback: usize, horizon: usize, stride: usize) -> Result<ForecastReport> {
    let origins = window_origins(ds, lookback, horizon, stride)?;
    let m = ds.num_variates();
    let mut metrics = Metrics::default();
    for &o in &origins {
        let last = &ds.values[(o + lookback - 1) * m..(o + lookback) * m];
        let pred: Vec<f64> = (0..horizon).flat_map(|_| last.iter().copied()).collect();
        let target = &ds.values[(o + lookback) * m..(o + lookback + horizon) * m];
        metrics.update(&pred, target);
    }
    Ok(ForecastReport {
        model: "persistence".into(),
        lookback,
        horizon,
        windows: origins.len(),
        mse: metrics.mse(),
        mae: metrics.mae(),
        router: None,
    })
}
