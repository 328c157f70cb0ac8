//! Gradient cases shared by the gradient tests and the acceptance run.

#![allow(dead_code)]

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sst_core::autodiff::{check_input_gradients, check_param_gradients};
use sst_core::lwt::{LwtConfig, LwtLayer};
use sst_core::mamba::{MambaBlock, MambaConfig};
use sst_core::model::{SstConfig, SstModel};
use sst_core::nn::init_rng;
use sst_core::{ParamStore, Result, Tape, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-4;

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Sum of `y` weighted by a fixed random tensor, so every output entry
/// carries a distinct upstream gradient.
fn probe(tape: &Tape<'_>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(normal(&mut rng, &tape.shape(y)));
    tape.sum(tape.mul(y, w)?)
}

/// Worst relative error over all inputs of one op.
fn inputs_case(inputs: Vec<Tensor>, seed: u64, f: impl Fn(&Tape<'_>, &[Var]) -> Result<Var>) -> Result<f64> {
    let errs = check_input_gradients(&inputs, |t, v| probe(t, f(t, v)?, seed))?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

const SH: [usize; 3] = [4, 8, 8];

/// Names of the primitive cases, in order.
pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "neg",
    "exp",
    "softplus",
    "sigmoid",
    "silu",
    "tanh",
    "gelu",
    "matmul_batched",
    "matmul_shared",
    "softmax",
    "layer_norm",
    "causal_depthwise_conv1d",
    "conv1d",
    "reshape",
    "flatten_from",
    "permute",
    "transpose",
    "concat",
    "slice",
    "masked_fill",
    "sum",
    "mean",
    "mse",
    "selective_scan",
    "banded_attention",
    "unfold",
];

pub fn primitive_error(name: &str, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normal(&mut rng, &SH);
    let y = normal(&mut rng, &SH);
    match name {
        "add" => inputs_case(vec![x, y], seed, |t, v| t.add(v[0], v[1])),
        "sub" => inputs_case(vec![x, y], seed, |t, v| t.sub(v[0], v[1])),
        "mul" => inputs_case(vec![x, y], seed, |t, v| t.mul(v[0], v[1])),
        "scale" => inputs_case(vec![x], seed, |t, v| t.scale(v[0], -1.7)),
        "add_scalar" => inputs_case(vec![x], seed, |t, v| t.add_scalar(v[0], 0.3)),
        "neg" => inputs_case(vec![x], seed, |t, v| t.neg(v[0])),
        "exp" => inputs_case(vec![x], seed, |t, v| t.exp(v[0])),
        "softplus" => inputs_case(vec![x], seed, |t, v| t.softplus(v[0])),
        "sigmoid" => inputs_case(vec![x], seed, |t, v| t.sigmoid(v[0])),
        "silu" => inputs_case(vec![x], seed, |t, v| t.silu(v[0])),
        "tanh" => inputs_case(vec![x], seed, |t, v| t.tanh(v[0])),
        "gelu" => inputs_case(vec![x], seed, |t, v| t.gelu(v[0])),
        "matmul_batched" => inputs_case(vec![x, y], seed, |t, v| t.matmul(v[0], v[1])),
        "matmul_shared" => {
            let w = normal(&mut rng, &[8, 5]);
            inputs_case(vec![x, w], seed, |t, v| t.matmul(v[0], v[1]))
        }
        "softmax" => inputs_case(vec![x], seed, |t, v| t.softmax(v[0])),
        "layer_norm" => {
            let g = normal(&mut rng, &[8]);
            let b = normal(&mut rng, &[8]);
            inputs_case(vec![x, g, b], seed, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))
        }
        "causal_depthwise_conv1d" => {
            let w = normal(&mut rng, &[8, 3]);
            let b = normal(&mut rng, &[8]);
            inputs_case(vec![x, w, b], seed, |t, v| t.causal_depthwise_conv1d(v[0], v[1], v[2]))
        }
        "conv1d" => {
            let w = normal(&mut rng, &[5, 8, 3]);
            let b = normal(&mut rng, &[5]);
            inputs_case(vec![x, w, b], seed, |t, v| t.conv1d(v[0], v[1], v[2], 1, 1))
        }
        "reshape" => inputs_case(vec![x], seed, |t, v| t.reshape(v[0], &[8, 4, 8])),
        "flatten_from" => inputs_case(vec![x], seed, |t, v| t.flatten_from(v[0], 1)),
        "permute" => inputs_case(vec![x], seed, |t, v| t.permute(v[0], &[2, 0, 1])),
        "transpose" => inputs_case(vec![x], seed, |t, v| t.transpose(v[0], 0, 2)),
        "concat" => {
            let z = normal(&mut rng, &[4, 3, 8]);
            inputs_case(vec![x, z], seed, |t, v| t.concat(&[v[0], v[1]], 1))
        }
        "slice" => inputs_case(vec![x], seed, |t, v| t.slice(v[0], 2, 2, 5)),
        "masked_fill" => {
            let mask: Rc<[bool]> = (0..64).map(|_| rng.random_bool(0.3)).collect();
            inputs_case(vec![x], seed, move |t, v| t.masked_fill(v[0], mask.clone(), -2.0))
        }
        "sum" => inputs_case(vec![x], seed, |t, v| t.mul(t.sum(v[0])?, t.sum(v[0])?)),
        "mean" => inputs_case(vec![x], seed, |t, v| t.exp(t.mean(v[0])?)),
        "mse" => inputs_case(vec![x, y], seed, |t, v| t.mse(v[0], v[1])),
        "selective_scan" => {
            let (r, len, e, n) = (2, 8, 4, 4);
            let u = normal(&mut rng, &[r, len, e]);
            let dt = uniform(&mut rng, &[r, len, e], 0.05, 1.0);
            let a = uniform(&mut rng, &[e, n], -2.0, -0.2);
            let b = normal(&mut rng, &[r, len, n]);
            let c = normal(&mut rng, &[r, len, n]);
            let d = normal(&mut rng, &[e]);
            inputs_case(vec![u, dt, a, b, c, d], seed, |t, v| {
                t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])
            })
        }
        "banded_attention" => {
            let q = normal(&mut rng, &SH);
            inputs_case(vec![q, x, y], seed, |t, v| t.banded_attention(v[0], v[1], v[2], 2, 2))
        }
        "unfold" => {
            let s = normal(&mut rng, &[4, 32]);
            inputs_case(vec![s], seed, |t, v| t.unfold(v[0], 8, 4))
        }
        other => panic!("no gradient case `{other}`"),
    }
}

/// Move every parameter off its initialization so no gradient is trivially zero.
fn jitter(store: &mut ParamStore, seed: u64, sigma: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x717e);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
    }
}

/// Probed parameter coordinates per composite check.
pub const PARAM_COORDS: usize = 300;

pub fn mamba_block_error(seed: u64) -> Result<f64> {
    let mut rng = init_rng(seed);
    let mut store = ParamStore::new();
    let cfg = MambaConfig {
        d_state: 4,
        ..MambaConfig::default()
    };
    let block = MambaBlock::new(&mut store, "m", 8, &cfg, &mut rng)?;
    jitter(&mut store, seed, 0.05);
    let mut xr = ChaCha8Rng::seed_from_u64(seed);
    let x = normal(&mut xr, &[2, 6, 8]);
    check_param_gradients(
        &store,
        |t| {
            let xv = t.constant(x.clone());
            probe(t, block.forward(t, xv)?, seed)
        },
        Some(PARAM_COORDS),
        seed,
    )
}

pub fn lwt_layer_error(seed: u64) -> Result<f64> {
    let mut rng = init_rng(seed);
    let mut store = ParamStore::new();
    let cfg = LwtConfig {
        window: 3,
        heads: 2,
        layers: 1,
        ffn_mult: 2,
        ..LwtConfig::default()
    };
    let layer = LwtLayer::new(&mut store, "l", 8, &cfg, &mut rng)?;
    jitter(&mut store, seed, 0.05);
    let mut xr = ChaCha8Rng::seed_from_u64(seed);
    let x = normal(&mut xr, &[2, 7, 8]);
    check_param_gradients(
        &store,
        |t| {
            let xv = t.constant(x.clone());
            probe(t, layer.forward(t, xv)?, seed)
        },
        Some(PARAM_COORDS),
        seed,
    )
}

pub fn toy_sst_config() -> SstConfig {
    SstConfig {
        lookback: 48,
        short_len: 24,
        horizon: 8,
        variates: 2,
        d_model: 8,
        patch_long: 8,
        stride_long: 4,
        patch_short: 4,
        stride_short: 2,
        mamba_layers: 1,
        mamba: MambaConfig {
            d_state: 4,
            ..MambaConfig::default()
        },
        lwt: LwtConfig {
            window: 3,
            heads: 2,
            layers: 1,
            ffn_mult: 2,
            ..LwtConfig::default()
        },
        ..SstConfig::default()
    }
}

/// End-to-end forward plus MSE against a random target.
pub fn sst_toy_error(seed: u64) -> Result<f64> {
    let cfg = toy_sst_config();
    let mut model = SstModel::new(cfg.clone(), seed)?;
    jitter(&mut model.params, seed, 0.05);
    let mut xr = ChaCha8Rng::seed_from_u64(seed);
    let x = normal(&mut xr, &[2, cfg.lookback, cfg.variates]);
    let y = normal(&mut xr, &[2, cfg.horizon, cfg.variates]);
    check_param_gradients(
        &model.params,
        |t| {
            let out = model.forward(t, &x)?;
            let target = t.constant(y.clone());
            t.mse(out.pred, target)
        },
        Some(PARAM_COORDS),
        seed,
    )
}

pub const SEEDS: std::ops::Range<u64> = 0..10;

/// `(case, worst relative error over seeds)` for the whole suite.
pub fn gradient_suite() -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for &name in PRIMITIVES {
        let mut worst: f64 = 0.0;
        for s in SEEDS {
            worst = worst.max(primitive_error(name, s)?);
        }
        out.push((name.to_string(), worst));
    }
    let composites: [(&str, fn(u64) -> Result<f64>); 3] = [
        ("mamba_block", mamba_block_error),
        ("lwt_layer", lwt_layer_error),
        ("sst_forward", sst_toy_error),
    ];
    for (name, f) in composites {
        let mut worst: f64 = 0.0;
        for s in SEEDS {
            worst = worst.max(f(s)?);
        }
        out.push((name.to_string(), worst));
    }
    Ok(out)
}
