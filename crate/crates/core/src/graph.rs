//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation on a [`Var`] appends a node that
//! holds the forward value and a closure mapping the output gradient to
//! gradients of its parents. [`Graph::backward`] walks the tape in reverse.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Backward closure: receives the output gradient and, per parent, whether
/// that parent needs a gradient. Returns one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    needs_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
    macs: Cell<u64>,
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
            macs: Cell::new(0),
        }
    }

    /// A graph for inference only; `backward` on it yields no gradients.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    /// Differentiable leaf (parameters, inputs under gradient check).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.insert(Rc::new(value), Vec::new(), self.record, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.insert(Rc::new(value), Vec::new(), false, None)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-accumulate operations performed by matrix products and
    /// convolutions on this graph so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub(crate) fn count_macs(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    fn insert(
        &self,
        value: Rc<Tensor<T>>,
        parents: Vec<usize>,
        needs_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            needs_grad,
            backward,
        });
        Var { graph: self, id }
    }

    /// Appends an operation node. `backward` is dropped when no parent
    /// needs a gradient or the graph is not recording.
    pub(crate) fn op(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        self.op_shared(Rc::new(value), parents, backward)
    }

    /// Like [`Graph::op`] for closures that keep a handle on the output.
    pub(crate) fn op_shared(
        &self,
        value: Rc<Tensor<T>>,
        parents: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        let needs = self.record && parents.iter().any(|p| self.needs_grad(p.id));
        let ids = parents.iter().map(|p| p.id).collect();
        self.insert(value, ids, needs, needs.then_some(backward))
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Gradients of the scalar `root` with respect to every leaf it
    /// depends on.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let root_value = &nodes[root.id].value;
        assert_eq!(
            root_value.numel(),
            1,
            "backward needs a scalar root, got shape {:?}",
            root_value.shape()
        );
        if !nodes[root.id].needs_grad {
            return Gradients { grads };
        }
        grads[root.id] = Some(Tensor::ones(root_value.shape()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].needs_grad).collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }
}

/// Result of [`Graph::backward`]: gradients of the leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, zero-filled when it did not influence the root.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}
