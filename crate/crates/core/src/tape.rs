//! Reverse-mode autodiff tape.
//!
//! Operations record one node per output: the forward value, the parent node
//! ids, and a VJP closure that maps the upstream gradient to per-parent
//! gradients. [`Tape::backward`] walks the nodes in reverse creation order and
//! accumulates gradients; creation order is deterministic, so gradient
//! accumulation is too.
//!
//! Gradients are kept only for leaves created through [`Tape::leaf`]
//! (parameters and checked inputs); intermediate gradients are freed as the
//! sweep passes them. Constants ([`Tape::constant`]) never require gradients
//! and prune the backward walk early.

use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a specific tape. Only valid on the tape that made it;
/// every op checks the tape id and rejects foreign handles.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    /// A handle that belongs to no tape. Parameter traversals that only
    /// enumerate tensors (flatten, assign) use it to fill the `Vars`
    /// structures they never evaluate; any op rejects it.
    pub(crate) fn dangling() -> Var {
        Var { tape: 0, idx: u32::MAX }
    }
}

/// Arguments handed to a VJP closure during the backward sweep.
pub struct VjpArgs<'a> {
    /// Forward value of this node.
    pub output: &'a Tensor,
    /// Upstream gradient with the node's shape.
    pub grad: &'a Tensor,
    /// Forward values of the parents, in recorded order.
    pub parents: Vec<&'a Tensor>,
    /// Which parents actually need a gradient; entries may be skipped with `None`.
    pub needs: Vec<bool>,
}

type Vjp = Box<dyn Fn(&VjpArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<u32>,
    needs_grad: bool,
    vjp: Option<Vjp>,
}

static TAPE_IDS: AtomicU32 = AtomicU32::new(1);

pub struct Tape {
    id: u32,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes.
    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.record(value, Vec::new(), false, None)
    }

    /// Records a gradient-carrying leaf (parameter or checked input).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.record(value, Vec::new(), true, None)
    }

    /// Shared read access to a node's forward value.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        self.check(v).expect("Var used on a foreign tape");
        Ref::map(self.nodes.borrow(), |nodes| &nodes[v.idx as usize].value)
    }

    /// Clone of the node's shape (cheap; shapes are short).
    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id {
            return Err(Error::arg(
                "Var belongs to a different tape; handles cannot cross tapes",
            ));
        }
        Ok(())
    }

    pub(crate) fn record(
        &self,
        value: Tensor,
        parents: Vec<Var>,
        leaf_grad: bool,
        vjp: Option<Vjp>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = leaf_grad
            || parents
                .iter()
                .any(|p| nodes[p.idx as usize].needs_grad);
        let idx = nodes.len() as u32;
        nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.idx).collect(),
            needs_grad,
            // A node whose ancestors are all constants can never be asked for
            // a gradient; dropping the closure prunes the backward sweep.
            vjp: if needs_grad { vjp } else { None },
        });
        Var {
            tape: self.id,
            idx,
        }
    }

    /// Convenience for ops: records `value` with `parents` and a VJP.
    pub(crate) fn push(&self, value: Tensor, parents: Vec<Var>, vjp: Vjp) -> Var {
        self.record(value, parents, false, Some(vjp))
    }

    /// Backward from a single-element root, seeding with 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.shape_of(root);
        let n: usize = shape.iter().product();
        if n != 1 {
            return Err(Error::shape(format!(
                "backward root must hold exactly one value, has shape {shape:?}"
            )));
        }
        self.backward_seeded(root, Tensor::ones(&shape))
    }

    /// Backward from any node, seeding the sweep with `seed` (same shape as
    /// the root value). Equivalent to the gradient of `sum(seed * root)`.
    pub fn backward_seeded(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        self.check(root)?;
        let nodes = self.nodes.borrow();
        let root_idx = root.idx as usize;
        if seed.shape() != nodes[root_idx].value.shape() {
            return Err(Error::shape(format!(
                "seed shape {:?} != root shape {:?}",
                seed.shape(),
                nodes[root_idx].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root_idx + 1);
        grads.resize_with(root_idx + 1, || None);
        if nodes[root_idx].needs_grad {
            grads[root_idx] = Some(seed);
        }
        for idx in (0..=root_idx).rev() {
            let node = &nodes[idx];
            let Some(vjp) = node.vjp.as_ref() else {
                continue; // leaf or constant: gradient (if any) stays in place
            };
            let Some(grad) = grads[idx].take() else {
                continue; // nothing flowed into this node
            };
            let args = VjpArgs {
                output: &node.value,
                grad: &grad,
                parents: node
                    .parents
                    .iter()
                    .map(|&p| &nodes[p as usize].value)
                    .collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|&p| nodes[p as usize].needs_grad)
                    .collect(),
            };
            let contributions = (vjp)(&args);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (&p, contribution) in node.parents.iter().zip(contributions) {
                let p = p as usize;
                if !nodes[p].needs_grad {
                    continue;
                }
                let Some(c) = contribution else { continue };
                debug_assert_eq!(c.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

/// Result of a backward sweep; holds gradients for leaves.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. a leaf, or `None` if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        assert_eq!(v.tape, self.tape, "Var belongs to a different tape");
        self.grads.get(v.idx as usize).and_then(|g| g.as_ref())
    }

    /// Gradient moved out of the store.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        assert_eq!(v.tape, self.tape, "Var belongs to a different tape");
        self.grads.get_mut(v.idx as usize).and_then(|g| g.take())
    }
}
