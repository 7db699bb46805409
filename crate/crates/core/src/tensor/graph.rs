use std::cell::{Ref, RefCell};

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Backward rule: given the output gradient, parent values, the output value
/// and which parents need gradients, returns one gradient per parent.
pub(crate) type BackwardFn =
    Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// A single-threaded tape. Nodes are appended in evaluation order, which is
/// a topological order by construction.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: Tensor, param: Option<ParamId>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            param,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// A constant input; no gradient flows to it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, None, false)
    }

    /// An input whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&self, value: Tensor) -> Var {
        self.leaf(value, None, true)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        self.leaf(store.get(id).clone(), Some(id), true)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    /// Evaluates `forward` on the parent values and records the node.
    pub(crate) fn record(
        &self,
        parents: &[Var],
        forward: impl FnOnce(&[&Tensor]) -> Result<(Tensor, BackwardFn)>,
    ) -> Result<Var> {
        let (value, backward, requires_grad) = {
            let nodes = self.nodes.borrow();
            let inputs: Vec<&Tensor> = parents.iter().map(|p| &nodes[p.0].value).collect();
            let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
            let (value, backward) = forward(&inputs)?;
            (value, backward, requires_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            param: None,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&root.value.shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(backward) = &node.backward {
                let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &nodes[p].value).collect();
                let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                let parent_grads = backward(&g, &inputs, &node.value, &needs);
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    if let (Some(pg), true) = (pg, nodes[p].requires_grad) {
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot => *slot = Some(pg),
                        }
                    }
                }
            }
            if node.backward.is_none() {
                grads[i] = Some(g);
            }
        }
        let mut by_param: Vec<(ParamId, Tensor)> = Vec::new();
        let mut leaves = Vec::new();
        for (i, g) in grads.into_iter().enumerate() {
            let node = &nodes[i];
            if node.backward.is_some() || !node.requires_grad {
                continue;
            }
            let g = g.unwrap_or_else(|| Tensor::zeros(&node.value.shape));
            match node.param {
                Some(id) => match by_param.iter_mut().find(|(pid, _)| *pid == id) {
                    Some((_, acc)) => acc.add_assign(&g),
                    None => by_param.push((id, g)),
                },
                None => leaves.push((i, g)),
            }
        }
        Ok(Gradients { by_param, leaves })
    }
}

/// Gradients of one backward sweep, keyed by parameter or input leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_param: Vec<(ParamId, Tensor)>,
    leaves: Vec<(usize, Tensor)>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(i, _)| *i == v.0).map(|(_, t)| t)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(p, t)| (*p, t))
    }

    /// Drops gradients of parameters outside `keep`.
    pub fn retain(mut self, keep: &[ParamId]) -> Self {
        self.by_param.retain(|(p, _)| keep.contains(p));
        self
    }

    /// Global L2 norm over all parameter gradients.
    pub fn norm(&self) -> f64 {
        self.by_param
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}
