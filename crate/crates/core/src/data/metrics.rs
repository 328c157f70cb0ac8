use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(pred: &Tensor, truth: &Tensor) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::dim(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.numel() == 0 {
        return Err(Error::Contract("metric over zero entries".into()));
    }
    Ok(())
}

pub fn metric_mse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check(pred, truth)?;
    let s: f64 = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.numel() as f64)
}

pub fn metric_mae(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check(pred, truth)?;
    let s: f64 = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / pred.numel() as f64)
}

/// Running sums so metrics can be accumulated batch by batch.
///
/// Sums are accumulated per entry in a fixed order, so the result does not
/// depend on how the entries were partitioned into batches beyond rounding.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sum_sq: f64,
    pub sum_abs: f64,
    pub count: usize,
}

impl Metrics {
    pub fn update(&mut self, pred: &[f64], truth: &[f64]) {
        for (a, b) in pred.iter().zip(truth) {
            let d = a - b;
            self.sum_sq += d * d;
            self.sum_abs += d.abs();
        }
        self.count += pred.len();
    }

    pub fn mse(&self) -> f64 {
        self.sum_sq / self.count as f64
    }

    pub fn mae(&self) -> f64 {
        self.sum_abs / self.count as f64
    }
}
