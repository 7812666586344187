use std::cell::RefCell;
use std::rc::Rc;

use crate::Tensor;

/// Maps the gradient of a node's output to gradients of its parents.
/// The mask says which parents need a gradient; others may be `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Define-by-run recording of a computation.
///
/// Every value created through a [`Var`] is appended to the tape; calling
/// [`Tape::backward`] walks the record in reverse. A tape is single-use per
/// forward pass and is not shared across threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A differentiable input (parameter or probe point).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Vec::new(), None, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Vec::new(), None, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records an operation. The closure is dropped when no parent needs a
    /// gradient, so frozen sub-graphs cost nothing on the way back.
    pub(crate) fn push_op<'t>(
        &'t self,
        value: Tensor,
        parents: &[Var<'t>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let ids = parents
            .iter()
            .map(|p| {
                debug_assert!(std::ptr::eq(p.tape, self), "mixing tapes");
                p.id
            })
            .collect();
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(value, ids, backward, requires_grad)
    }

    fn push_node(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.len(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let out_shape = nodes[output.id].value.shape().to_vec();
        grads[output.id] = Some(Tensor::full(out_shape, 1.0));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            // Interior gradients are consumed here; leaves never reach this point.
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&mask) {
                if !need {
                    continue;
                }
                let Some(pg) = pg else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a leaf (or `None` if the output does not
    /// depend on it).
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but materializes zeros for unreachable leaves.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.shape()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_branch_records_no_backward() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let y = c.square();
        assert!(!y.requires_grad());
        let x = tape.leaf(Tensor::scalar(3.0));
        let z = x.mul(&y);
        let g = tape.backward(z);
        assert_eq!(g.get(x).unwrap().item(), 4.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(&x).add(&x);
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap().item(), 7.0);
    }
}
