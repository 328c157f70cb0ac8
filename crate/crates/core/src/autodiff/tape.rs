//! Reverse-mode differentiation over a linear tape.
//!
//! Primitives append a node holding their output value, the indices of their
//! inputs and a backward rule. Because a node can only reference nodes that
//! already exist, the tape is topologically ordered by construction and the
//! backward pass is a single reverse sweep.

use std::borrow::Cow;
use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::memory;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a parameter held by a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded primitive.
///
/// Receives the forward inputs, the forward output and the gradient flowing
/// into the output; returns one gradient per input (`None` when the input does
/// not need one).
pub trait Backward<T: Scalar> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<'p, T: Scalar> {
    op: &'static str,
    value: Cow<'p, Tensor<T>>,
    inputs: Vec<usize>,
    backward: Option<Box<dyn Backward<T> + 'p>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Default)]
pub struct ParamStore<T: Scalar = f64> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.names.len())
            .field("scalars", &self.num_scalars())
            .finish()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> ParamId {
        tensor.set_requires_grad(true);
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Same parameters at another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            out.add(name, t.cast());
        }
        out
    }

    /// Replace every value with the matching entry of `other`, which must
    /// have been built by the same constructor.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Contract("parameter stores differ in layout".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::dim("parameter shape changed"));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Gradients produced by [`Tape::backward`], retained for leaves only.
pub struct Gradients<T: Scalar> {
    leaves: Vec<(usize, Option<ParamId>, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves
            .iter()
            .find(|(i, _, _)| *i == var.0)
            .map(|(_, _, g)| g)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.leaves
            .iter()
            .find(|(_, p, _)| *p == Some(id))
            .map(|(_, _, g)| g)
    }

    /// Add the parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (_, p, g) in &self.leaves {
            if let Some(id) = p {
                store.get_mut(*id).accumulate_grad(g.data())?;
            }
        }
        Ok(())
    }
}

/// Records primitive applications for one forward pass.
///
/// Single-threaded: the node list sits behind a `RefCell`. Independent
/// workers build independent tapes.
pub struct Tape<'p, T: Scalar = f64> {
    nodes: RefCell<Vec<Node<'p, T>>>,
    params: Option<&'p ParamStore<T>>,
    checked: bool,
}

impl<'p, T: Scalar> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: None,
            checked: true,
        }
    }

    /// A tape whose [`param`](Self::param) leaves borrow from `store`.
    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Tape {
            params: Some(store),
            ..Self::new()
        }
    }

    /// In checked mode (the default) any primitive that produces a NaN or an
    /// infinity fails with [`Error::NumericDomain`].
    pub fn checked(mut self, on: bool) -> Self {
        self.checked = on;
        self
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names of recorded primitives in tape order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(Node {
            op: "leaf",
            value: Cow::Owned(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            param: None,
        })
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf borrowing a parameter from the store the tape was built with.
    pub fn param(&self, id: ParamId) -> Result<Var> {
        let store = self
            .params
            .ok_or_else(|| Error::Contract("tape was created without a parameter store".into()))?;
        if id.0 >= store.len() {
            return Err(Error::Contract(format!("unknown parameter {}", id.0)));
        }
        Ok(self.push_node(Node {
            op: "param",
            value: Cow::Borrowed(store.get(id)),
            inputs: Vec::new(),
            backward: None,
            requires_grad: true,
            param: Some(id),
        }))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_ref())
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let mut t = self.value(v).clone();
        t.set_requires_grad(false);
        t.clear_grad();
        t
    }

    pub fn item(&self, v: Var) -> Result<T> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push_node(&self, node: Node<'p, T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Run `forward` on the values of `inputs` and record the result.
    pub(crate) fn record<F, B>(&self, op: &'static str, inputs: &[Var], forward: F) -> Result<Var>
    where
        F: FnOnce(&[&Tensor<T>]) -> Result<(Tensor<T>, B)>,
        B: Backward<T> + 'p,
    {
        self.record_inner(op, inputs, true, forward)
    }

    /// Like [`record`](Self::record) but the output is exempt from the
    /// finite-value check (used where non-finite values are requested, such as
    /// masking with negative infinity).
    pub(crate) fn record_unchecked<F, B>(
        &self,
        op: &'static str,
        inputs: &[Var],
        forward: F,
    ) -> Result<Var>
    where
        F: FnOnce(&[&Tensor<T>]) -> Result<(Tensor<T>, B)>,
        B: Backward<T> + 'p,
    {
        self.record_inner(op, inputs, false, forward)
    }

    fn record_inner<F, B>(
        &self,
        op: &'static str,
        inputs: &[Var],
        check: bool,
        forward: F,
    ) -> Result<Var>
    where
        F: FnOnce(&[&Tensor<T>]) -> Result<(Tensor<T>, B)>,
        B: Backward<T> + 'p,
    {
        let (value, backward, requires_grad) = {
            let nodes = self.nodes.borrow();
            let mut vals = Vec::with_capacity(inputs.len());
            for v in inputs {
                let n = nodes
                    .get(v.0)
                    .ok_or_else(|| Error::Contract(format!("{op}: unknown tape variable {}", v.0)))?;
                vals.push(n.value.as_ref());
            }
            let requires_grad = inputs.iter().any(|v| nodes[v.0].requires_grad);
            let (value, backward) = forward(&vals)?;
            (value, backward, requires_grad)
        };
        if let Some(limit) = memory::exceeded() {
            return Err(Error::OutOfMemory { limit });
        }
        if check && self.checked && !value.all_finite() {
            return Err(Error::NumericDomain { op: op.to_string() });
        }
        Ok(self.push_node(Node {
            op,
            value: Cow::Owned(value),
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
            param: None,
        }))
    }

    /// Record a primitive whose output has already been computed.
    pub fn custom(
        &self,
        op: &'static str,
        inputs: &[Var],
        output: Tensor<T>,
        backward: Box<dyn Backward<T> + 'p>,
    ) -> Result<Var> {
        self.record(op, inputs, move |_| Ok((output, BoxedBackward(backward))))
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires one. Intermediate gradients are released as soon as they have
    /// been propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract("loss is not on this tape".into()))?;
        if root.value.rank() != 0 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut leaves = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(rule) = &node.backward else {
                if node.inputs.is_empty() {
                    leaves.push((i, node.param, g));
                }
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|&j| nodes[j].requires_grad).collect();
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| nodes[j].value.as_ref()).collect();
            let input_grads = rule.backward(&inputs, &node.value, &g, &needs)?;
            drop(g);
            if input_grads.len() != node.inputs.len() {
                return Err(Error::Contract(format!(
                    "{}: backward returned {} gradients for {} inputs",
                    node.op,
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for ((&j, gj), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(gj) = gj else { continue };
                if !need {
                    continue;
                }
                if gj.shape() != nodes[j].value.shape() {
                    return Err(Error::Contract(format!(
                        "{}: gradient shape {:?} for input of shape {:?}",
                        node.op,
                        gj.shape(),
                        nodes[j].value.shape()
                    )));
                }
                match &mut grads[j] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(gj.data())
                        .for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(gj),
                }
            }
            if let Some(limit) = memory::exceeded() {
                return Err(Error::OutOfMemory { limit });
            }
        }
        leaves.reverse();
        Ok(Gradients { leaves })
    }
}

struct BoxedBackward<'p, T: Scalar>(Box<dyn Backward<T> + 'p>);

impl<T: Scalar> Backward<T> for BoxedBackward<'_, T> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        self.0.backward(inputs, output, grad, needs)
    }
}
