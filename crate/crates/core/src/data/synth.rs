use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Generator settings for a trend + sinusoid + spike + noise series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub length: i64,
    pub trend_slope: f64,
    pub period: f64,
    pub amplitude: f64,
    /// Probability that a burst starts at any given step.
    pub spike_rate: f64,
    pub spike_mag: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    /// Hourly-like series with a daily cycle, drift, decaying bursts and noise.
    fn default() -> Self {
        SynthSpec {
            length: 5000,
            trend_slope: 0.002,
            period: 24.0,
            amplitude: 1.0,
            spike_rate: 0.01,
            spike_mag: 3.0,
            noise_sigma: 0.2,
            seed: 2024,
        }
    }
}

/// Per-step decay of a burst after its onset.
const BURST_DECAY: f64 = 0.6;
/// Bursts are truncated after this many steps.
const BURST_LEN: usize = 8;

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<SynthSpec> {
        toml::from_str(text).map_err(|e| Error::Configuration(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.length <= 0 {
            return Err(Error::Parameter(format!("series length must be positive, got {}", self.length)));
        }
        if !(self.period > 0.0) {
            return Err(Error::Parameter(format!("period must be positive, got {}", self.period)));
        }
        if !(0.0..=1.0).contains(&self.spike_rate) {
            return Err(Error::Parameter(format!("spike rate {} outside [0, 1]", self.spike_rate)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Parameter(format!("noise sigma {} is negative", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Ground-truth components of a generated series.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthComponents {
    pub trend: Vec<f64>,
    pub seasonal: Vec<f64>,
    pub spikes: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Deterministic univariate series; `values[t] = trend + seasonal + spikes + noise`
/// summed in that order.
pub fn synth_generate(spec: &SynthSpec) -> Result<(Dataset, SynthComponents)> {
    spec.validate()?;
    let n = spec.length as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let trend: Vec<f64> = (0..n).map(|t| spec.trend_slope * t as f64).collect();
    let w = std::f64::consts::TAU / spec.period;
    let seasonal: Vec<f64> = (0..n).map(|t| spec.amplitude * (w * t as f64).sin()).collect();

    let mut spikes = vec![0.0; n];
    if spec.spike_rate > 0.0 {
        for t in 0..n {
            if rng.random::<f64>() < spec.spike_rate {
                let height = spec.spike_mag * (0.5 + rng.random::<f64>());
                let mut h = height;
                for s in spikes.iter_mut().skip(t).take(BURST_LEN) {
                    *s += h;
                    h *= BURST_DECAY;
                }
            }
        }
    }
    let noise: Vec<f64> = if spec.noise_sigma > 0.0 {
        (0..n).map(|_| spec.noise_sigma * normal.sample(&mut rng)).collect()
    } else {
        vec![0.0; n]
    };
    let values = (0..n)
        .map(|t| trend[t] + seasonal[t] + spikes[t] + noise[t])
        .collect();
    let ds = Dataset::new("synthetic", values, vec!["value".into()])?;
    Ok((
        ds,
        SynthComponents {
            trend,
            seasonal,
            spikes,
            noise,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec {
            length: 500,
            trend_slope: 0.01,
            period: 24.0,
            amplitude: 2.0,
            spike_rate: 0.02,
            spike_mag: 5.0,
            noise_sigma: 0.3,
            seed: 7,
        }
    }

    #[test]
    fn pure_sinusoid_has_no_residual() {
        let s = SynthSpec {
            trend_slope: 0.0,
            spike_rate: 0.0,
            noise_sigma: 0.0,
            ..spec()
        };
        let (ds, c) = synth_generate(&s).unwrap();
        assert!(ds.values.iter().zip(&c.seasonal).all(|(v, s)| v - s == 0.0));
    }

    #[test]
    fn no_spikes_means_three_components() {
        let s = SynthSpec { spike_rate: 0.0, ..spec() };
        let (ds, c) = synth_generate(&s).unwrap();
        for t in 0..ds.len() {
            assert_eq!(ds.values[t], c.trend[t] + c.seasonal[t] + c.noise[t]);
        }
    }

    #[test]
    fn seeded_determinism() {
        assert_eq!(synth_generate(&spec()).unwrap(), synth_generate(&spec()).unwrap());
        let other = SynthSpec { seed: 8, ..spec() };
        assert_ne!(synth_generate(&spec()).unwrap().0, synth_generate(&other).unwrap().0);
    }

    #[test]
    fn non_positive_length_rejected() {
        let s = SynthSpec { length: 0, ..spec() };
        assert!(matches!(synth_generate(&s), Err(Error::Parameter(_))));
    }

    #[test]
    fn parses_toml() {
        let s = SynthSpec::from_toml("length = 100\nperiod = 12\namplitude = 1.5\nseed = 3").unwrap();
        assert_eq!(s.length, 100);
        assert_eq!(s.amplitude, 1.5);
        assert!(SynthSpec::from_toml("length = 1\nbogus = 2").is_err());
    }
}
