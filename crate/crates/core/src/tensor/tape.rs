use std::cell::{Ref, RefCell};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
///
/// Handles are plain indices; using one with a tape other than the one that
/// produced it is a logic error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward function sees: the incoming gradient, the forward output,
/// the forward inputs, and which inputs actually need a gradient.
pub struct BackwardCtx<'a, T> {
    pub grad: &'a [T],
    pub output: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub needs: Vec<bool>,
}

/// Maps an output gradient to one gradient per input (`None` = not needed).
pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Ordered record of executed operations.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it can be differentiated.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records a tensor as a leaf. It is tracked iff `tensor.requires_grad`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad && self.grad_enabled;
        self.insert(Node {
            op: "leaf",
            value: tensor,
            inputs: Vec::new(),
            requires_grad,
            backward: None,
        })
    }

    pub fn constant(&self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn param(&self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = true;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes.borrow()[v.0].op
    }

    /// Copies a recorded value out of the tape.
    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let mut t = self.value(v).clone();
        t.requires_grad = false;
        t.grad = None;
        t
    }

    /// Runs `f` over borrowed input values; the borrow ends before recording.
    pub fn with_values<R>(&self, vars: &[Var], f: impl FnOnce(&[&Tensor<T>]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let vals: Vec<&Tensor<T>> = vars.iter().map(|v| &nodes[v.0].value).collect();
        f(&vals)
    }

    /// Records the result of a differentiable operation.
    ///
    /// Fails if `value` contains a NaN or infinity.
    pub fn push(
        &self,
        op: &'static str,
        inputs: &[Var],
        mut value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|&v| self.nodes.borrow()[v.0].requires_grad);
        value.requires_grad = requires_grad;
        value.grad = None;
        Ok(self.insert(Node {
            op,
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        }))
    }

    fn insert(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::DetachedLoss);
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &g,
                output: &node.value,
                inputs: node.inputs.iter().map(|&i| &nodes[i].value).collect(),
                needs: node.inputs.iter().map(|&i| nodes[i].requires_grad).collect(),
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.len(), nodes[input].value.len(), "op {}", node.op);
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients of a loss with respect to the tracked leaves of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the loss does not depend on `v`.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        match self.get(v) {
            Some(g) => Tensor::from_vec(&self.shapes[v.0], g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Adds the gradient of `v` into `target.grad`.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor<T>) {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => {
                if target.grad.is_none() {
                    target.zero_grad();
                }
            }
        }
    }
}
