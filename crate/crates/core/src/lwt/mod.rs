//! Short-range variations expert: local-window Transformer.

mod attention;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::{
    band_half_width, dense_attention, logits_evaluated, masked_attention, reset_logit_counter, window_mask,
    AttentionMask,
};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{Scalar, Tensor};

/// `N x D` sine/cosine table: even columns `sin(pos * f_i)`, odd columns
/// `cos(pos * f_i)` with `f_i = 10000^(-2i/D)`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Result<Tensor> {
    if !d.is_multiple_of(2) {
        return Err(Error::Parameter(format!("positional width must be even, got {d}")));
    }
    Tensor::new(
        &[n, d],
        (0..n * d)
            .map(|k| {
                let (pos, col) = (k / d, k % d);
                let freq = 10000f64.powf(-((col - col % 2) as f64) / d as f64);
                let angle = pos as f64 * freq;
                if col % 2 == 0 {
                    angle.sin()
                } else {
                    angle.cos()
                }
            })
            .collect(),
    )
}

/// How attention restricts which tokens interact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionPath {
    /// Materialize all logits and mask blocked ones.
    Dense,
    /// Evaluate in-band logits only.
    #[default]
    Banded,
}

/// Token interaction pattern for one attention call.
#[derive(Debug, Clone, Copy)]
pub enum Reach {
    Full,
    Window { w: usize, path: AttentionPath },
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Configuration(format!(
                "width {d_model} is not divisible into {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            w_q: Linear::new(store, &format!("{name}.w_q"), d_model, d_model, true, rng),
            w_k: Linear::new(store, &format!("{name}.w_k"), d_model, d_model, true, rng),
            w_v: Linear::new(store, &format!("{name}.w_v"), d_model, d_model, true, rng),
            w_o: Linear::new(store, &format!("{name}.w_o"), d_model, d_model, true, rng),
            heads,
            d_model,
        })
    }

    /// `x: [R, N, D]`.
    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, x: Var, reach: Reach) -> Result<Var> {
        let sh = tape.shape(x);
        if sh.len() != 3 || sh[2] != self.d_model {
            return Err(Error::dim(format!("attention of width {} applied to {sh:?}", self.d_model)));
        }
        let (r, n) = (sh[0], sh[1]);
        let (h, dk) = (self.heads, self.d_model / self.heads);
        let q = self.w_q.forward(tape, x)?;
        let k = self.w_k.forward(tape, x)?;
        let v = self.w_v.forward(tape, x)?;
        let mixed = match reach {
            Reach::Window {
                w,
                path: AttentionPath::Banded,
            } => tape.banded_attention(q, k, v, h, band_half_width(w))?,
            _ => {
                let split = |t: Var| -> Result<Var> { tape.permute(tape.reshape(t, &[r, n, h, dk])?, &[0, 2, 1, 3]) };
                let mask = match reach {
                    Reach::Window { w, .. } => Some(window_mask(n, w)),
                    Reach::Full => None,
                };
                let o = dense_attention(tape, split(q)?, split(k)?, split(v)?, mask.as_ref())?;
                tape.reshape(tape.permute(o, &[0, 2, 1, 3])?, &[r, n, self.d_model])?
            }
        };
        self.w_o.forward(tape, mixed)
    }
}

/// `D -> mult*D -> D` with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, mult: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d_model, mult * d_model, true, rng),
            down: Linear::new(store, &format!("{name}.down"), mult * d_model, d_model, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, x: Var) -> Result<Var> {
        let h = tape.gelu(self.up.forward(tape, x)?)?;
        self.down.forward(tape, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LwtConfig {
    pub window: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub attention: AttentionPath,
}

impl Default for LwtConfig {
    fn default() -> Self {
        LwtConfig {
            window: 9,
            heads: 4,
            layers: 3,
            ffn_mult: 4,
            attention: AttentionPath::Banded,
        }
    }
}

/// Pre-norm layer: `y = x + attn(ln1 x)`, `out = y + ffn(ln2 y)`.
#[derive(Debug, Clone)]
pub struct LwtLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub window: usize,
    pub path: AttentionPath,
}

impl LwtLayer {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, cfg: &LwtConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.window == 0 {
            return Err(Error::Configuration("attention window must be at least 1".into()));
        }
        Ok(LwtLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, cfg.heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d_model, cfg.ffn_mult, rng),
            window: cfg.window,
            path: cfg.attention,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, x: Var) -> Result<Var> {
        self.forward_with(tape, x, self.reach())
    }

    pub fn reach(&self) -> Reach {
        Reach::Window {
            w: self.window,
            path: self.path,
        }
    }

    pub fn forward_with<T: Scalar>(&self, tape: &Tape<'_, T>, x: Var, reach: Reach) -> Result<Var> {
        let a = self.attn.forward(tape, self.norm1.forward(tape, x)?, reach)?;
        let y = tape.add(x, a)?;
        let f = self.ffn.forward(tape, self.norm2.forward(tape, y)?)?;
        tape.add(y, f)
    }
}

/// Patch embedding plus sinusoidal positions, then stacked local-window layers.
#[derive(Debug, Clone)]
pub struct VariationsExpert {
    pub embed: Linear,
    pub layers: Vec<LwtLayer>,
    pub d_model: usize,
}

impl VariationsExpert {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        patch_len: usize,
        d_model: usize,
        cfg: &LwtConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !d_model.is_multiple_of(2) {
            return Err(Error::Configuration(format!("model width {d_model} must be even")));
        }
        let embed = Linear::new(store, &format!("{name}.embed"), patch_len, d_model, true, rng);
        let layers = (0..cfg.layers)
            .map(|i| LwtLayer::new(store, &format!("{name}.layer{i}"), d_model, cfg, rng))
            .collect::<Result<_>>()?;
        Ok(VariationsExpert { embed, layers, d_model })
    }

    /// `pts: [R, N_S, P_S]` to `z_S: [R, N_S, D]`.
    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, pts: Var) -> Result<Var> {
        self.forward_reach(tape, pts, None)
    }

    /// As [`forward`](Self::forward) with every layer's reach overridden.
    pub fn forward_reach<T: Scalar>(&self, tape: &Tape<'_, T>, pts: Var, reach: Option<Reach>) -> Result<Var> {
        let n = tape.shape(pts)[1];
        let e = self.embed.forward(tape, pts)?;
        let pos = tape.constant(sinusoidal_positions(n, self.d_model)?.cast());
        let mut z = tape.add(e, pos)?;
        for layer in &self.layers {
            z = layer.forward_with(tape, z, reach.unwrap_or(layer.reach()))?;
        }
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_rng;

    #[test]
    fn position_table() {
        let pe = sinusoidal_positions(41, 64).unwrap();
        assert_eq!(pe.shape(), &[41, 64]);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        for c in 0..64 {
            assert_eq!(pe.at(&[0, c]), if c % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert_eq!(pe, sinusoidal_positions(41, 64).unwrap());
        assert!(matches!(sinusoidal_positions(3, 5), Err(Error::Parameter(_))));
    }

    #[test]
    fn zero_sublayers_are_identity() {
        let mut store = ParamStore::new();
        let layer = LwtLayer::new(&mut store, "l", 8, &LwtConfig::default(), &mut init_rng(0)).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            if name.contains(".w_o.") || name.contains(".down.") {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::from_fn(&[2, 5, 8], |i| (i as f64).cos()));
        let y = layer.forward(&tape, x).unwrap();
        assert_eq!(*tape.value(y), *tape.value(x));
    }
}
