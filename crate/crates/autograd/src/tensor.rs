//! The [`Tensor`] type and the reverse pass over its define-by-run graph.
//!
//! Every op allocates a fresh output tensor holding a [`Node`] that points
//! back at its inputs, so the graph reachable from any tensor is acyclic by
//! construction. Dropping the last handle to a loss frees the whole graph.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard, RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};

/// Reverse rule of one differentiable op.
///
/// `backward` receives the op inputs, the forward output values and the
/// gradient flowing into the output, and returns one gradient per input.
/// Entries for inputs whose `needs` flag is false may be `None`.
pub trait Backward<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[Tensor<T>],
        output: &[T],
        grad_out: &[T],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<T>>>>;
}

/// Link from an op output back to the op and its inputs.
pub struct Node<T: Element> {
    op: Box<dyn Backward<T>>,
    inputs: Vec<Tensor<T>>,
}

struct Inner<T: Element> {
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    grad: Mutex<Option<Vec<T>>>,
    requires_grad: bool,
    node: Option<Node<T>>,
}

/// Dense row-major tensor taking part in reverse-mode differentiation.
///
/// Cloning is cheap and yields another handle to the same storage.
pub struct Tensor<T: Element = f32> {
    inner: Arc<Inner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self { inner: Arc::clone(&self.inner) }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.inner.shape).field("requires_grad", &self.inner.requires_grad);
        if let Some(node) = &self.inner.node {
            d.field("op", &node.op.name());
        }
        if data.len() <= 16 {
            d.field("data", &&data[..]);
        }
        d.finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        Self { inner: Arc::new(Inner { shape, data: RwLock::new(data), grad: Mutex::new(None), requires_grad, node }) }
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err(format!("dims must be positive, got {shape:?}"));
        }
        if numel(shape) != data.len() {
            return shape_err(format!("shape {shape:?} holds {} values but {} were given", numel(shape), data.len()));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates a gradient during [`Tensor::backward`].
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(Self::build(t.inner.shape.clone(), t.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::from_vec(vec![T::zero(); numel(shape)], shape)
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        Self::from_vec(vec![value; numel(shape)], shape)
    }

    /// Rank-0 tensor.
    pub fn scalar(value: T) -> Self {
        Self::build(Vec::new(), vec![value], false, None)
    }

    /// Output of a differentiable op. `requires_grad` is inherited from the inputs.
    ///
    /// This is the extension point for ops defined outside this crate.
    pub fn from_op(data: Vec<T>, shape: Vec<usize>, op: Box<dyn Backward<T>>, inputs: Vec<Tensor<T>>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return shape_err(format!("op {} produced {} values for shape {shape:?}", op.name(), data.len()));
        }
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let node = requires_grad.then(|| Node { op, inputs });
        Ok(Self::build(shape, data, requires_grad, node))
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Name of the producing op, if this tensor is a tracked op output.
    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.node.as_ref().map(|n| n.op.name())
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.inner.data.read().expect("tensor data lock poisoned")
    }

    /// Mutable access to the values, used by optimizers and finite differencing.
    pub fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<T>> {
        self.inner.data.write().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        let data = self.data();
        if data.len() != 1 {
            return Err(TensorError::Contract(format!("item() on tensor of shape {:?}", self.shape())));
        }
        Ok(data[0])
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.grad_lock().clone()
    }

    pub fn zero_grad(&self) {
        *self.grad_lock() = None;
    }

    fn grad_lock(&self) -> MutexGuard<'_, Option<Vec<T>>> {
        self.inner.grad.lock().expect("tensor grad lock poisoned")
    }

    /// Same values, cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.inner.shape.clone(), self.to_vec(), false, None)
    }

    pub fn same_storage(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.grad_lock();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Propagates `d self / d t` into every reachable tensor `t` with
    /// `requires_grad`, adding to whatever gradient `t` already holds.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!("backward() needs a scalar loss, got shape {:?}", self.shape())));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topological_order();
        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.key(), vec![T::one()]);

        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.key()) else {
                continue;
            };
            t.accumulate_grad(&g);
            let Some(node) = &t.inner.node else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Tensor::requires_grad).collect();
            let input_grads = {
                let out = t.data();
                node.op.backward(&node.inputs, &out, &g, &needs)?
            };
            if input_grads.len() != node.inputs.len() {
                return Err(TensorError::Contract(format!(
                    "op {} returned {} gradients for {} inputs",
                    node.op.name(),
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for ((input, need), grad) in node.inputs.iter().zip(&needs).zip(input_grads) {
                if !need {
                    continue;
                }
                let Some(grad) = grad else {
                    return Err(TensorError::Contract(format!(
                        "op {} skipped a required input gradient",
                        node.op.name()
                    )));
                };
                if grad.len() != input.numel() {
                    return Err(TensorError::Contract(format!(
                        "op {} gradient has {} values for input of shape {:?}",
                        node.op.name(),
                        grad.len(),
                        input.shape()
                    )));
                }
                match pending.get_mut(&input.key()) {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &b)| *a = *a + b),
                    None => {
                        pending.insert(input.key(), grad);
                    }
                }
            }
        }
        Ok(())
    }

    /// Tracked tensors reachable from `self`, inputs before consumers.
    fn topological_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (tensor, children already pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for input in node.inputs.iter().filter(|i| i.requires_grad()) {
                    if !visited.contains(&input.key()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}
