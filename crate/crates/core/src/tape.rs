//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass in execution
//! order. Each recorded node owns its output value, the indices of its
//! inputs and (when any input requires a gradient) a backward rule that
//! maps the output gradient to input gradients. [`Tape::backward`] walks the
//! nodes in exact reverse order and accumulates gradients additively, so a
//! value used twice receives the sum of both contributions.
//!
//! Trainable parameters live outside the tape (see [`crate::params`]) and
//! enter each forward pass as leaves tagged with their [`ParamId`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stable identifier of a parameter tensor in a [`crate::params::ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Backward rule: `(grad_out, inputs, output, needs_grad) -> input grads`.
///
/// The returned vector has one entry per input; entries whose input does
/// not need a gradient may be `None`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, op: &'static str, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { op, value, inputs: Vec::new(), backward: None, requires_grad, param });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf("constant", value, false, None)
    }

    /// A free leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf("leaf", value, true, None)
    }

    /// A leaf bound to a stored parameter.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push_leaf("param", value, true, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Record an operation. `backward` is dropped when no input requires a
    /// gradient, which is how frozen computations stay off the gradient path.
    pub fn record(&mut self, op: &'static str, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("forward of {}", op)));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagate from a scalar `loss` back to every leaf that requires a
    /// gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(rule) = &node.backward else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let input_grads = rule(&g, &inputs, &node.value, &needs)?;
            for ((&input, ig), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(ig) = ig else { continue };
                if !need {
                    continue;
                }
                if ig.shape() != self.nodes[input].value.shape() {
                    return Err(Error::Shape {
                        op: node.op,
                        detail: format!(
                            "backward produced grad {:?} for input {:?}",
                            ig.shape(),
                            self.nodes[input].value.shape()
                        ),
                    });
                }
                if !ig.all_finite() {
                    return Err(Error::NonFinite(format!("backward of {}", node.op)));
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&ig)?,
                    slot @ None => *slot = Some(ig),
                }
            }
            // keep gradients of leaves and of the inspected intermediate values
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient per parameter, summed over every leaf bound to it. Parameters
    /// that entered the tape but received no gradient map to zeros.
    pub fn param_grads(&self, tape: &Tape) -> BTreeMap<ParamId, Tensor> {
        let mut out: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for &(pid, node) in &self.params {
            let g = match &self.grads[node] {
                Some(g) => g.clone(),
                None => Tensor::zeros(tape.nodes[node].value.shape()),
            };
            match out.get_mut(&pid) {
                Some(acc) => acc.add_assign(&g).expect("param leaves share a shape"),
                None => {
                    out.insert(pid, g);
                }
            }
        }
        out
    }
}
