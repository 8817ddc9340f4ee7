//! Operation tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value, its parent indices and a
//! backward rule. Because nodes can only reference earlier nodes, the tape is
//! already in topological order and `backward` simply walks it in reverse.

use crate::{NumError, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a backward rule.
pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub out: &'a Tensor,
    pub parents: Vec<&'a Tensor>,
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + Send + Sync>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when no path reached it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
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

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Seeds `d output / d output = 1` and propagates to every tracked node.
    ///
    /// A node reached along several paths receives the sum of the path
    /// gradients.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let out_shape = self.nodes[output.0].value.shape().to_vec();
        grads[output.0] = Some(Tensor::ones(&out_shape));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let ctx = BackwardCtx {
                grad: &grad,
                out: &node.value,
                parents: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
            };
            let parent_grads = rule(&ctx);
            if parent_grads.len() != node.parents.len() {
                return Err(NumError::Internal(format!(
                    "backward rule of node {i} returned {} grads for {} parents",
                    parent_grads.len(),
                    node.parents.len()
                )));
            }
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[p].value.shape() {
                    return Err(NumError::Internal(format!(
                        "gradient shape {:?} does not match value shape {:?} at node {p}",
                        g.shape(),
                        self.nodes[p].value.shape()
                    )));
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Leaves keep their gradients; intermediate entries were consumed above.
        Ok(Gradients { grads })
    }
}
