use std::cell::RefCell;
use std::ops::Deref;
use std::rc::Rc;

use super::ops::Op;
use super::{Element, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Node storage: parameters are borrowed for the graph's lifetime,
/// intermediates are reference counted so reshapes share their buffer.
pub(crate) enum Value<'p, T> {
    Borrowed(&'p [T]),
    Owned(Rc<Vec<T>>),
}

impl<T> Clone for Value<'_, T> {
    fn clone(&self) -> Self {
        match self {
            Value::Borrowed(s) => Value::Borrowed(s),
            Value::Owned(rc) => Value::Owned(Rc::clone(rc)),
        }
    }
}

impl<T> Deref for Value<'_, T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        match self {
            Value::Borrowed(s) => s,
            Value::Owned(rc) => rc,
        }
    }
}

pub(crate) struct Node<'p, T> {
    pub(crate) value: Value<'p, T>,
    pub(crate) shape: Vec<usize>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// Gradient tape. Ops append nodes in execution order; [`Graph::backward`]
/// walks them in reverse.
///
/// A graph is single-threaded (`!Sync`); build one per forward pass.
pub struct Graph<'p, T: Element> {
    pub(crate) nodes: RefCell<Vec<Node<'p, T>>>,
}

impl<T: Element> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Element> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an owned tensor. Gradients are tracked if the tensor has
    /// `requires_grad` set.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(tensor.into_data(), shape, Op::Leaf, requires_grad)
    }

    /// Records a constant (never differentiated) from shape and data.
    pub fn constant(&self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    /// Binds a tensor by reference, typically a model parameter.
    pub fn param(&self, tensor: &'p Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Value::Borrowed(tensor.data()),
            shape: tensor.shape().to_vec(),
            requires_grad: tensor.requires_grad(),
            op: Op::Leaf,
        });
        Var(nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Copies a recorded value out as a tensor.
    pub fn value(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        Tensor::new(&node.shape, node.value.to_vec()).expect("node shape matches its data")
    }

    /// The single element of a one-element value.
    pub fn scalar(&self, v: Var) -> Result<T> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        if node.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(node.shape.clone()));
        }
        Ok(node.value[0])
    }

    pub(crate) fn push(&self, data: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(data.len(), super::numel(&shape));
        self.push_value(Value::Owned(Rc::new(data)), shape, op, requires_grad)
    }

    pub(crate) fn push_value(
        &self,
        value: Value<'p, T>,
        shape: Vec<usize>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            shape,
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    /// Reverse-mode sweep from a one-element `loss`.
    ///
    /// Consumes the graph; gradients of intermediates are released as soon
    /// as their node has been processed, so only leaf gradients survive.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.into_inner();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            node.op.backward(&nodes, i, &gout, &mut grads);
        }
        // only leaves keep gradients
        for (g, node) in grads.iter_mut().zip(&nodes) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss w.r.t. a leaf, or `None` when the leaf does not
    /// require gradients or does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Buffer for accumulating into input `j`'s gradient, created zeroed on
/// first use. `None` when `j` does not require gradients.
pub(crate) fn grad_slot<'a, T: Element>(
    nodes: &[Node<'_, T>],
    grads: &'a mut [Option<Vec<T>>],
    j: usize,
) -> Option<&'a mut Vec<T>> {
    if !nodes[j].requires_grad {
        return None;
    }
    let len = nodes[j].value.len();
    Some(grads[j].get_or_insert_with(|| vec![T::zero(); len]))
}
