//! Reverse-mode differentiation over a linear tape.
//!
//! Every recorded value gets an index; an op's inputs always carry smaller
//! indices than its output, so walking the tape backwards is a valid
//! topological order and each node is visited exactly once.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule sees.
pub struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// `needs[i]` is false when input `i` does not require a gradient; the
    /// rule may return `None` for it.
    pub needs: Vec<bool>,
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    name: &'static str,
}

pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    counters: BTreeMap<&'static str, u64>,
    /// First op that produced a NaN or infinity.
    non_finite: Option<&'static str>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            counters: BTreeMap::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_node(&mut self, node: Node<T>) -> Var {
        if self.non_finite.is_none() && !node.value.all_finite() {
            self.non_finite = Some(node.name);
        }
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Records a value that takes no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(Node {
            value,
            inputs: vec![],
            backward: None,
            requires_grad: false,
            name: "constant",
        })
    }

    /// Records a leaf whose gradient is accumulated by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node(Node {
            value,
            inputs: vec![],
            backward: None,
            requires_grad: true,
            name: "leaf",
        })
    }

    /// Records the result of an op. The backward rule is dropped when no
    /// input requires a gradient.
    pub fn push_op(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        backward: BackwardFn<T>,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            name,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf. Leaves that
    /// the loss does not depend on get zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !self.backward_done || !node.requires_grad || node.backward.is_some() {
            return None;
        }
        Some(
            self.grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec())),
        )
    }

    /// Name of the first recorded op whose output is not finite.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.non_finite
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if let Some(name) = self.non_finite {
            return Err(Error::NonFinite(name.into()));
        }
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this tape".into()));
        }
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Graph(
                "loss does not depend on any differentiable leaf".into(),
            ));
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(root.value.shape().to_vec()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|&i| &self.nodes[i].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node
                    .inputs
                    .iter()
                    .map(|&i| self.nodes[i].requires_grad)
                    .collect(),
            };
            let input_grads = rule(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.name);
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    self.nodes[input].value.shape(),
                    "gradient shape from {}",
                    node.name
                );
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }

        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    /// Adds to a named instrumentation counter (e.g. attention FLOPs).
    pub fn count(&mut self, key: &'static str, amount: u64) {
        *self.counters.entry(key).or_default() += amount;
    }

    pub fn counter(&self, key: &str) -> u64 {
        self.counters.get(key).copied().unwrap_or(0)
    }
}
