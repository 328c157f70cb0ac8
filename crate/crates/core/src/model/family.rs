//! Stacked attention / state-space hybrids with convolutional or patched
//! instance-normalized embeddings.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{revin_batch, to_rows, Forward, RevinStats};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::lwt::{sinusoidal_positions, FeedForward, MultiHeadAttention, Reach};
use crate::mamba::{MambaBlock, MambaConfig};
use crate::nn::{init_rng, uniform, LayerNorm, Linear};
use crate::patch::PatchSpec;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubLayer {
    Attention,
    Mamba,
    Ffn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    Transformer,
    Mamba,
    AttentionMamba,
    MambaAttention,
    Mambaformer,
}

impl Recipe {
    pub const ALL: [Recipe; 5] = [
        Recipe::Transformer,
        Recipe::Mamba,
        Recipe::AttentionMamba,
        Recipe::MambaAttention,
        Recipe::Mambaformer,
    ];

    /// Sub-layers of one block, in order.
    pub fn sublayers(self) -> &'static [SubLayer] {
        use SubLayer::*;
        match self {
            Recipe::Transformer => &[Attention, Ffn],
            Recipe::Mamba => &[Mamba, Mamba],
            Recipe::AttentionMamba => &[Attention, Mamba],
            Recipe::MambaAttention => &[Mamba, Attention],
            Recipe::Mambaformer => &[Mamba, Attention, Mamba],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Recipe::Transformer => "transformer",
            Recipe::Mamba => "mamba",
            Recipe::AttentionMamba => "attention_mamba",
            Recipe::MambaAttention => "mamba_attention",
            Recipe::Mambaformer => "mambaformer",
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Configuration(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Embedding {
    /// Width-3 convolution over raw steps, one token per step.
    Conv,
    /// Per-window normalization, patching and a linear patch embedding.
    #[default]
    Pi,
}

impl FromStr for Embedding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(Embedding::Conv),
            "pi" => Ok(Embedding::Pi),
            _ => Err(Error::Configuration(format!("unknown embedding `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub recipe: Recipe,
    pub embedding: Embedding,
    pub depth: usize,
    /// `None` derives the default from the recipe.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_positional: Option<bool>,
}

impl VariantSpec {
    pub fn new(recipe: Recipe, embedding: Embedding) -> Self {
        VariantSpec {
            recipe,
            embedding,
            depth: 2,
            use_positional: None,
        }
    }

    /// Positions are needed when attention sees the tokens first.
    pub fn default_positional(&self) -> bool {
        self.recipe.sublayers()[0] == SubLayer::Attention
    }

    pub fn positional(&self) -> bool {
        self.use_positional.unwrap_or_else(|| self.default_positional())
    }

    pub fn label(&self) -> String {
        let e = match self.embedding {
            Embedding::Conv => "conv",
            Embedding::Pi => "pi",
        };
        format!("{}_{e}", self.recipe)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub spec: VariantSpec,
    #[serde(default = "defaults::lookback")]
    pub lookback: usize,
    #[serde(default = "defaults::horizon")]
    pub horizon: usize,
    #[serde(default = "defaults::one")]
    pub variates: usize,
    #[serde(default = "defaults::d_model")]
    pub d_model: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::ffn_mult")]
    pub ffn_mult: usize,
    /// Patch length and stride for the PI embedding.
    #[serde(default = "defaults::patch")]
    pub patch: usize,
    #[serde(default = "defaults::stride")]
    pub stride: usize,
    #[serde(default)]
    pub mamba: MambaConfig,
}

mod defaults {
    pub fn lookback() -> usize {
        196
    }
    pub fn horizon() -> usize {
        96
    }
    pub fn one() -> usize {
        1
    }
    pub fn d_model() -> usize {
        64
    }
    pub fn heads() -> usize {
        4
    }
    pub fn ffn_mult() -> usize {
        4
    }
    pub fn patch() -> usize {
        16
    }
    pub fn stride() -> usize {
        8
    }
}

impl VariantConfig {
    pub fn new(spec: VariantSpec) -> Self {
        VariantConfig {
            spec,
            lookback: defaults::lookback(),
            horizon: defaults::horizon(),
            variates: 1,
            d_model: defaults::d_model(),
            heads: defaults::heads(),
            ffn_mult: defaults::ffn_mult(),
            patch: defaults::patch(),
            stride: defaults::stride(),
            mamba: MambaConfig::default(),
        }
    }

    /// Tokens per sequence after embedding.
    pub fn tokens(&self) -> Result<usize> {
        match self.spec.embedding {
            Embedding::Conv => Ok(self.lookback),
            Embedding::Pi => Ok(PatchSpec::new(self.patch, self.stride, self.lookback)
                .map_err(|e| Error::Configuration(e.to_string()))?
                .num_patches()),
        }
    }
}

#[derive(Debug, Clone)]
enum Block {
    Attention(LayerNorm, MultiHeadAttention),
    Mamba(MambaBlock),
    Ffn(LayerNorm, FeedForward),
}

#[derive(Debug, Clone)]
enum Embedder {
    /// Weight `[D, M, 3]`, bias `[D]`.
    Conv { weight: ParamId, bias: ParamId },
    Pi { proj: Linear, spec: PatchSpec },
}

#[derive(Debug, Clone)]
pub struct VariantModel {
    pub config: VariantConfig,
    pub params: ParamStore,
    embed: Embedder,
    sublayers: Vec<Block>,
    head: Linear,
    tokens: usize,
    trace: RefCell<Option<Vec<SubLayer>>>,
}

impl VariantModel {
    pub fn new(config: VariantConfig, seed: u64) -> Result<Self> {
        let d = config.d_model;
        if config.spec.depth == 0 || d == 0 || config.horizon == 0 || config.variates == 0 {
            return Err(Error::Configuration("depth, width, horizon and variates must be positive".into()));
        }
        if config.spec.positional() && !d.is_multiple_of(2) {
            return Err(Error::Configuration(format!("positional encoding needs an even width, got {d}")));
        }
        let mut rng = init_rng(seed);
        let mut params = ParamStore::new();
        let m = config.variates;
        let tokens = config.tokens()?;
        let embed = match config.spec.embedding {
            Embedding::Conv => {
                let bound = 1.0 / ((3 * m) as f64).sqrt();
                Embedder::Conv {
                    weight: params.add("embed.conv.weight", uniform(&[d, m, 3], bound, &mut rng)),
                    bias: params.add("embed.conv.bias", Tensor::zeros(&[d])),
                }
            }
            Embedding::Pi => {
                let spec = PatchSpec::new(config.patch, config.stride, config.lookback)
                    .map_err(|e| Error::Configuration(e.to_string()))?;
                Embedder::Pi {
                    proj: Linear::new(&mut params, "embed.patch", spec.p, d, true, &mut rng),
                    spec,
                }
            }
        };
        let mut sublayers = Vec::new();
        for b in 0..config.spec.depth {
            for (i, kind) in config.spec.recipe.sublayers().iter().enumerate() {
                let name = format!("block{b}.{i}");
                sublayers.push(build_sublayer(&mut params, &name, *kind, &config, &mut rng)?);
            }
        }
        // conv tokens carry all variates jointly; PI rows are per variate
        let (head_in, head_out) = match config.spec.embedding {
            Embedding::Conv => (tokens * d, config.horizon * m),
            Embedding::Pi => (tokens * d, config.horizon),
        };
        let head = Linear::new(&mut params, "head", head_in, head_out, true, &mut rng);
        Ok(VariantModel {
            config,
            params,
            embed,
            sublayers,
            head,
            tokens,
            trace: RefCell::new(None),
        })
    }

    /// Run `forward` while recording which sub-layers execute, in order.
    pub fn traced_forward<T: Scalar>(&self, tape: &Tape<'_, T>, x: &Tensor) -> Result<(Forward, Vec<SubLayer>)> {
        *self.trace.borrow_mut() = Some(Vec::new());
        let out = self.forward(tape, x);
        let order = self.trace.borrow_mut().take().unwrap_or_default();
        Ok((out?, order))
    }

    /// Convolutional tokens `[B, L, D]` for a raw batch.
    pub fn conv_embed<T: Scalar>(&self, tape: &Tape<'_, T>, x: Var) -> Result<Var> {
        match &self.embed {
            Embedder::Conv { weight, bias } => tape.conv1d(x, tape.param(*weight)?, tape.param(*bias)?, 1, 1),
            Embedder::Pi { .. } => Err(Error::Contract("model uses the patched embedding".into())),
        }
    }

    /// Patch tokens `[B*M, N, D]` and the window statistics.
    pub fn pi_embed<T: Scalar>(&self, tape: &Tape<'_, T>, x: &Tensor) -> Result<(Var, RevinStats)> {
        match &self.embed {
            Embedder::Pi { proj, spec } => {
                let (xn, stats) = revin_batch(x)?;
                let rows = tape.constant(to_rows(&xn).cast());
                let pts = tape.unfold(rows, spec.p, spec.stride)?;
                Ok((proj.forward(tape, pts)?, stats))
            }
            Embedder::Conv { .. } => Err(Error::Contract("model uses the convolutional embedding".into())),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, x: &Tensor) -> Result<Forward> {
        let cfg = &self.config;
        let sh = x.shape();
        if sh.len() != 3 || sh[1] != cfg.lookback || sh[2] != cfg.variates {
            return Err(Error::dim(format!(
                "model expects [B, {}, {}] windows, got {sh:?}",
                cfg.lookback, cfg.variates
            )));
        }
        let (b, m, d) = (sh[0], cfg.variates, cfg.d_model);
        let (mut z, stats) = match cfg.spec.embedding {
            Embedding::Conv => (self.conv_embed(tape, tape.constant(x.cast()))?, None),
            Embedding::Pi => {
                let (z, s) = self.pi_embed(tape, x)?;
                (z, Some(s))
            }
        };
        if cfg.spec.positional() {
            let pos = tape.constant(sinusoidal_positions(self.tokens, d)?.cast());
            z = tape.add(z, pos)?;
        }
        for layer in &self.sublayers {
            z = self.apply(tape, layer, z)?;
        }
        let flat = tape.flatten_from(z, 1)?;
        let y = self.head.forward(tape, flat)?;
        let pred = match cfg.spec.embedding {
            Embedding::Conv => tape.reshape(y, &[b, cfg.horizon, m])?,
            Embedding::Pi => tape.permute(tape.reshape(y, &[b, m, cfg.horizon])?, &[0, 2, 1])?,
        };
        Ok(Forward {
            pred,
            stats,
            router: None,
        })
    }

    fn apply<T: Scalar>(&self, tape: &Tape<'_, T>, layer: &Block, z: Var) -> Result<Var> {
        let kind = match layer {
            Block::Attention(..) => SubLayer::Attention,
            Block::Mamba(_) => SubLayer::Mamba,
            Block::Ffn(..) => SubLayer::Ffn,
        };
        if let Some(t) = self.trace.borrow_mut().as_mut() {
            t.push(kind);
        }
        match layer {
            Block::Attention(norm, attn) => {
                let a = attn.forward(tape, norm.forward(tape, z)?, Reach::Full)?;
                tape.add(z, a)
            }
            Block::Mamba(block) => block.forward(tape, z),
            Block::Ffn(norm, ffn) => {
                let f = ffn.forward(tape, norm.forward(tape, z)?)?;
                tape.add(z, f)
            }
        }
    }
}

fn build_sublayer(
    store: &mut ParamStore,
    name: &str,
    kind: SubLayer,
    cfg: &VariantConfig,
    rng: &mut impl Rng,
) -> Result<Block> {
    let d = cfg.d_model;
    Ok(match kind {
        SubLayer::Attention => Block::Attention(
            LayerNorm::new(store, &format!("{name}.norm"), d),
            MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.heads, rng)?,
        ),
        SubLayer::Mamba => Block::Mamba(MambaBlock::new(store, &format!("{name}.mamba"), d, &cfg.mamba, rng)?),
        SubLayer::Ffn => Block::Ffn(
            LayerNorm::new(store, &format!("{name}.norm"), d),
            FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_mult, rng),
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(recipe: Recipe, embedding: Embedding) -> VariantConfig {
        VariantConfig {
            lookback: 32,
            horizon: 4,
            variates: 2,
            d_model: 8,
            heads: 2,
            patch: 8,
            stride: 4,
            mamba: MambaConfig {
                d_state: 4,
                ..MambaConfig::default()
            },
            ..VariantConfig::new(VariantSpec::new(recipe, embedding))
        }
    }

    #[test]
    fn mambaformer_order() {
        let cfg = VariantConfig {
            spec: VariantSpec {
                depth: 1,
                ..VariantSpec::new(Recipe::Mambaformer, Embedding::Pi)
            },
            ..small(Recipe::Mambaformer, Embedding::Pi)
        };
        let m = VariantModel::new(cfg, 0).unwrap();
        let tape = Tape::with_params(&m.params);
        let x = Tensor::from_fn(&[1, 32, 2], |i| (i as f64).sin());
        let (_, order) = m.traced_forward(&tape, &x).unwrap();
        assert_eq!(order, vec![SubLayer::Mamba, SubLayer::Attention, SubLayer::Mamba]);
    }

    #[test]
    fn positional_defaults() {
        let expect = [
            (Recipe::Transformer, true),
            (Recipe::Mamba, false),
            (Recipe::AttentionMamba, true),
            (Recipe::MambaAttention, false),
            (Recipe::Mambaformer, false),
        ];
        for (r, p) in expect {
            let s = VariantSpec::new(r, Embedding::Conv);
            assert_eq!(s.positional(), p, "{r}");
            let forced = VariantSpec {
                use_positional: Some(!p),
                ..s
            };
            assert_eq!(forced.positional(), !p);
        }
    }

    #[test]
    fn unknown_recipe() {
        assert!(matches!("hyena".parse::<Recipe>(), Err(Error::Configuration(_))));
        assert_eq!("mamba_attention".parse::<Recipe>().unwrap(), Recipe::MambaAttention);
    }

    #[test]
    fn conv_shapes() {
        let cfg = VariantConfig {
            lookback: 196,
            variates: 7,
            d_model: 64,
            ..VariantConfig::new(VariantSpec::new(Recipe::Mamba, Embedding::Conv))
        };
        let m = VariantModel::new(cfg, 0).unwrap();
        let tape = Tape::with_params(&m.params);
        let x = tape.constant(Tensor::from_fn(&[1, 196, 7], |i| i as f64 * 0.01));
        let z = m.conv_embed(&tape, x).unwrap();
        assert_eq!(tape.shape(z), vec![1, 196, 64]);
    }

    #[test]
    fn conv_zero_weights_give_bias() {
        let mut m = VariantModel::new(small(Recipe::Mamba, Embedding::Conv), 1).unwrap();
        let Embedder::Conv { weight, bias } = m.embed.clone() else { unreachable!() };
        m.params.get_mut(weight).data_mut().fill(0.0);
        m.params.get_mut(bias).data_mut().copy_from_slice(&[1., 2., 3., 4., 5., 6., 7., 8.]);
        let tape = Tape::with_params(&m.params);
        let x = tape.constant(Tensor::from_fn(&[2, 32, 2], |i| (i as f64).cos()));
        let z = tape.to_tensor(m.conv_embed(&tape, x).unwrap());
        for (i, &v) in z.data().iter().enumerate() {
            assert_eq!(v, (i % 8 + 1) as f64);
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let cfg = VariantConfig {
            variates: 8,
            ..small(Recipe::Mamba, Embedding::Conv)
        };
        let mut m = VariantModel::new(cfg, 1).unwrap();
        let Embedder::Conv { weight, .. } = m.embed.clone() else { unreachable!() };
        let w = m.params.get_mut(weight);
        w.data_mut().fill(0.0);
        for c in 0..8 {
            w.set(&[c, c, 1], 1.0);
        }
        let tape = Tape::with_params(&m.params);
        let xt = Tensor::from_fn(&[1, 32, 8], |i| (i as f64 * 0.3).sin());
        let z = tape.to_tensor(m.conv_embed(&tape, tape.constant(xt.clone())).unwrap());
        assert_eq!(z, xt);
    }

    #[test]
    fn pi_constant_input_is_bias() {
        let m = VariantModel::new(small(Recipe::Transformer, Embedding::Pi), 2).unwrap();
        let tape = Tape::with_params(&m.params);
        let x = Tensor::full(&[1, 32, 2], 3.5);
        let (z, stats) = m.pi_embed(&tape, &x).unwrap();
        let Embedder::Pi { proj, .. } = &m.embed else { unreachable!() };
        let bias = m.params.get(proj.bias.unwrap()).data().to_vec();
        let z = tape.to_tensor(z);
        assert_eq!(z.shape(), &[2, 7, 8]);
        for (i, &v) in z.data().iter().enumerate() {
            assert_eq!(v, bias[i % 8]);
        }
        assert_eq!(stats.mean.data(), &[3.5, 3.5]);
    }

    #[test]
    fn all_variants_forward() {
        for r in Recipe::ALL {
            for e in [Embedding::Conv, Embedding::Pi] {
                let m = VariantModel::new(small(r, e), 3).unwrap();
                let tape = Tape::with_params(&m.params);
                let x = Tensor::from_fn(&[3, 32, 2], |i| (i as f64 * 0.2).sin());
                let out = m.forward(&tape, &x).unwrap();
                assert_eq!(tape.shape(out.pred), vec![3, 4, 2], "{r} {e:?}");
                assert_eq!(out.stats.is_some(), e == Embedding::Pi);
            }
        }
    }
}
