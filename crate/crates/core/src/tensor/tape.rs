use std::collections::HashMap;
use std::sync::Arc;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Maps the output gradient to one optional gradient per parent. The mask
/// says which parents actually need one.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Records one computation graph. A tape is built by a single thread and
/// dropped after its backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of the leaves of a tape after [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    /// Adds parameter gradients into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            store.get_mut(*id).accumulate_grad(g);
        }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub(crate) fn shared(&self, v: Var) -> Arc<Vec<f64>> {
        self.nodes[v.0].value.shared_data()
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t.detached(), false, None)
    }

    /// Tracked leaf that is not part of a parameter store.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_leaf(t.detached(), true, None)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_leaf(store.get(id).detached(), true, Some(id));
        self.params.insert(id, v);
        v
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_op(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[Var],
        backward: BackwardFn,
    ) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let value = Tensor::from_parts(shape, Arc::new(data));
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: needs_grad.then_some(backward),
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Result that shares its parent's buffer (reshape and friends).
    pub(crate) fn push_view(&mut self, shape: Vec<usize>, parent: Var) -> Var {
        let data = self.shared(parent);
        let needs_grad = self.nodes[parent.0].needs_grad;
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            parents: vec![parent],
            backward: needs_grad.then(|| -> BackwardFn { Box::new(|g, _| vec![Some(g.to_vec())]) }),
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.backward {
                Some(f) => {
                    let mask: Vec<bool> = node
                        .parents
                        .iter()
                        .map(|p| self.nodes[p.0].needs_grad)
                        .collect();
                    let parent_grads = f(&g, &mask);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !self.nodes[p.0].needs_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), self.nodes[p.0].value.numel());
                        match &mut grads[p.0] {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
                None if node.needs_grad => match node.param {
                    Some(id) => out.params.push((id, g)),
                    None => {
                        out.leaves.insert(i, g);
                    }
                },
                None => {}
            }
        }
        Ok(out)
    }

    /// Runs backward and accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let g = self.backward(loss)?;
        g.accumulate_into(store);
        Ok(g)
    }
}
