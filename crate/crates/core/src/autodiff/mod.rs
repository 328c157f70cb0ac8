//! Tape-based reverse-mode automatic differentiation.

mod gradcheck;
pub(crate) mod ops;
mod tape;

use std::rc::Rc;

pub use gradcheck::{
    check_input_gradients, check_param_gradients, finite_difference_gradient, relative_error, DEFAULT_STEP,
};
pub use ops::SOFTPLUS_THRESHOLD;
pub use tape::{Backward, Gradients, ParamId, ParamStore, Tape, Var};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Attributes for [`Tape::apply`]. Unused fields are ignored by primitives
/// that do not take them.
#[derive(Debug, Clone, Default)]
pub struct Attrs {
    pub eps: Option<f64>,
    pub value: Option<f64>,
    pub axis: Option<usize>,
    pub start: Option<usize>,
    pub len: Option<usize>,
    pub shape: Option<Vec<usize>>,
    pub perm: Option<Vec<usize>>,
    pub mask: Option<Rc<[bool]>>,
    pub padding: Option<(usize, usize)>,
}

/// Names accepted by [`Tape::apply`].
pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "matmul",
    "exp",
    "softplus",
    "sigmoid",
    "silu",
    "tanh",
    "gelu",
    "softmax",
    "layer_norm",
    "causal_depthwise_conv1d",
    "conv1d",
    "reshape",
    "flatten",
    "permute",
    "concat",
    "slice",
    "masked_fill",
    "sum",
    "mean",
];

impl<'p, T: Scalar> Tape<'p, T> {
    /// Apply a primitive by name.
    pub fn apply(&self, op: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::dim(format!("{op} takes {n} inputs, got {}", inputs.len())))
            }
        };
        let need = |v: Option<f64>, what: &str| {
            v.ok_or_else(|| Error::Contract(format!("{op} needs attribute `{what}`")))
        };
        let need_usize = |v: Option<usize>, what: &str| {
            v.ok_or_else(|| Error::Contract(format!("{op} needs attribute `{what}`")))
        };
        match op {
            "add" | "sub" | "mul" | "matmul" => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match op {
                    "add" => self.add(a, b),
                    "sub" => self.sub(a, b),
                    "mul" => self.mul(a, b),
                    _ => self.matmul(a, b),
                }
            }
            "scale" => {
                arity(1)?;
                self.scale(inputs[0], need(attrs.value, "value")?)
            }
            "add_scalar" => {
                arity(1)?;
                self.add_scalar(inputs[0], need(attrs.value, "value")?)
            }
            "exp" | "softplus" | "sigmoid" | "silu" | "tanh" | "gelu" | "softmax" | "sum"
            | "mean" => {
                arity(1)?;
                let x = inputs[0];
                match op {
                    "exp" => self.exp(x),
                    "softplus" => self.softplus(x),
                    "sigmoid" => self.sigmoid(x),
                    "silu" => self.silu(x),
                    "tanh" => self.tanh(x),
                    "gelu" => self.gelu(x),
                    "softmax" => self.softmax(x),
                    "sum" => self.sum(x),
                    _ => self.mean(x),
                }
            }
            "layer_norm" => {
                arity(3)?;
                self.layer_norm(inputs[0], inputs[1], inputs[2], attrs.eps.unwrap_or(1e-5))
            }
            "causal_depthwise_conv1d" => {
                arity(3)?;
                self.causal_depthwise_conv1d(inputs[0], inputs[1], inputs[2])
            }
            "conv1d" => {
                arity(3)?;
                let (l, r) = attrs.padding.unwrap_or((0, 0));
                self.conv1d(inputs[0], inputs[1], inputs[2], l, r)
            }
            "reshape" => {
                arity(1)?;
                let shape = attrs
                    .shape
                    .as_deref()
                    .ok_or_else(|| Error::Contract("reshape needs attribute `shape`".into()))?;
                self.reshape(inputs[0], shape)
            }
            "flatten" => {
                arity(1)?;
                self.flatten_from(inputs[0], attrs.axis.unwrap_or(0))
            }
            "permute" => {
                arity(1)?;
                let perm = attrs
                    .perm
                    .as_deref()
                    .ok_or_else(|| Error::Contract("permute needs attribute `perm`".into()))?;
                self.permute(inputs[0], perm)
            }
            "concat" => self.concat(inputs, attrs.axis.unwrap_or(0)),
            "slice" => {
                arity(1)?;
                self.slice(
                    inputs[0],
                    attrs.axis.unwrap_or(0),
                    attrs.start.unwrap_or(0),
                    need_usize(attrs.len, "len")?,
                )
            }
            "masked_fill" => {
                arity(1)?;
                let mask = attrs
                    .mask
                    .clone()
                    .ok_or_else(|| Error::Contract("masked_fill needs attribute `mask`".into()))?;
                self.masked_fill(inputs[0], mask, need(attrs.value, "value")?)
            }
            other => Err(Error::UnsupportedPrimitive(other.to_string())),
        }
    }
}
