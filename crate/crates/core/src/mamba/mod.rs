//! Long-range patterns expert: gated selective state-space blocks.

mod scan;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

pub use scan::{
    lti_convolution_scan, selective_scan_associative, selective_scan_reference, zoh_discretize, HiddenState,
    ScanInputs, ZOH_LIMIT,
};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{uniform, LayerNorm, Linear};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MambaConfig {
    /// State size per channel.
    pub d_state: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for MambaConfig {
    fn default() -> Self {
        MambaConfig {
            d_state: 16,
            expand: 2,
            conv_width: 4,
            dt_min: 1e-3,
            dt_max: 1e-1,
        }
    }
}

impl MambaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_state == 0 || self.expand == 0 || self.conv_width == 0 {
            return Err(Error::Configuration(
                "state size, expansion and conv width must be positive".into(),
            ));
        }
        if !(0.0 < self.dt_min && self.dt_min <= self.dt_max) {
            return Err(Error::Configuration(format!(
                "step-size range [{}, {}] is invalid",
                self.dt_min, self.dt_max
            )));
        }
        Ok(())
    }
}

/// `log(exp(y) - 1)`, the inverse of softplus.
fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Pre-norm residual block:
/// `x + out_proj(scan(silu(conv(in_x(ln x)))) * silu(in_gate(ln x)))`.
#[derive(Debug, Clone)]
pub struct MambaBlock {
    pub norm: LayerNorm,
    pub in_proj_x: Linear,
    pub in_proj_gate: Linear,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub w_b: Linear,
    pub w_c: Linear,
    pub w_dt: Linear,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out_proj: Linear,
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
}

impl MambaBlock {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, cfg: &MambaConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.expand * d_model;
        let n = cfg.d_state;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d_model);
        let in_proj_x = Linear::new(store, &format!("{name}.in_proj_x"), d_model, e, true, rng);
        let in_proj_gate = Linear::new(store, &format!("{name}.in_proj_gate"), d_model, e, true, rng);
        let conv_bound = 1.0 / (cfg.conv_width as f64).sqrt();
        let conv_weight = store.add(
            format!("{name}.conv.weight"),
            uniform(&[e, cfg.conv_width], conv_bound, rng),
        );
        let conv_bias = store.add(format!("{name}.conv.bias"), Tensor::zeros(&[e]));
        let w_b = Linear::new(store, &format!("{name}.w_b"), e, n, false, rng);
        let w_c = Linear::new(store, &format!("{name}.w_c"), e, n, false, rng);
        let w_dt = Linear::new(store, &format!("{name}.w_dt"), e, e, true, rng);
        // step sizes start log-uniform in [dt_min, dt_max]
        let log_dt = Uniform::new_inclusive(cfg.dt_min.ln(), cfg.dt_max.ln()).expect("valid range");
        let dt_bias: Vec<f64> = (0..e).map(|_| inverse_softplus(log_dt.sample(rng).exp())).collect();
        store.get_mut(w_dt.bias.expect("has bias")).data_mut().copy_from_slice(&dt_bias);
        // A = -(1, 2, ..., N) on every channel
        let a_log = store.add(
            format!("{name}.a_log"),
            Tensor::from_fn(&[e, n], |i| ((i % n + 1) as f64).ln()),
        );
        let d_skip = store.add(format!("{name}.d_skip"), Tensor::ones(&[e]));
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), e, d_model, true, rng);
        Ok(MambaBlock {
            norm,
            in_proj_x,
            in_proj_gate,
            conv_weight,
            conv_bias,
            w_b,
            w_c,
            w_dt,
            a_log,
            d_skip,
            out_proj,
            d_model,
            d_inner: e,
            d_state: n,
        })
    }

    /// The gated mixer without normalization or residual; `x: [R, T, D]`.
    pub fn mixer<T: Scalar>(&self, tape: &Tape<'_, T>, x: Var) -> Result<Var> {
        let sh = tape.shape(x);
        if sh.len() != 3 || sh[2] != self.d_model {
            return Err(Error::dim(format!(
                "mamba block of width {} applied to {:?}",
                self.d_model, sh
            )));
        }
        let xe = self.in_proj_x.forward(tape, x)?;
        let xc = tape.causal_depthwise_conv1d(xe, tape.param(self.conv_weight)?, tape.param(self.conv_bias)?)?;
        let u = tape.silu(xc)?;
        let dt = tape.softplus(self.w_dt.forward(tape, u)?)?;
        let b = self.w_b.forward(tape, u)?;
        let c = self.w_c.forward(tape, u)?;
        let a = tape.neg(tape.exp(tape.param(self.a_log)?)?)?;
        let y = tape.selective_scan(u, dt, a, b, c, tape.param(self.d_skip)?)?;
        let gate = tape.silu(self.in_proj_gate.forward(tape, x)?)?;
        self.out_proj.forward(tape, tape.mul(y, gate)?)
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, x)?;
        let m = self.mixer(tape, h)?;
        tape.add(x, m)
    }
}

/// Linear patch encoder followed by stacked blocks.
#[derive(Debug, Clone)]
pub struct PatternsExpert {
    pub encoder: Linear,
    pub blocks: Vec<MambaBlock>,
}

impl PatternsExpert {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        patch_len: usize,
        d_model: usize,
        layers: usize,
        cfg: &MambaConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let encoder = Linear::new(store, &format!("{name}.encoder"), patch_len, d_model, true, rng);
        let blocks = (0..layers)
            .map(|i| MambaBlock::new(store, &format!("{name}.block{i}"), d_model, cfg, rng))
            .collect::<Result<_>>()?;
        Ok(PatternsExpert { encoder, blocks })
    }

    /// `pts: [R, N_L, P_L]` to `z_L: [R, N_L, D]`.
    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, pts: Var) -> Result<Var> {
        let mut z = self.encoder.forward(tape, pts)?;
        for b in &self.blocks {
            z = b.forward(tape, z)?;
        }
        Ok(z)
    }
}
