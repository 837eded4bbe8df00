//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle (`Arc`) onto a value buffer, an optional
//! gradient buffer and, for results of differentiable ops, the node that
//! produced it. Calling [`Tensor::backward`] on a scalar walks the graph in
//! reverse topological order and accumulates gradients into every leaf that
//! requires them.

mod activation;
mod conv;
mod linalg;
mod norm;
mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{DType, Scalar};

pub use norm::{BatchNormState, Mode};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording the autodiff graph on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Per-input gradient rule. Receives the op inputs, the op output and the
/// gradient flowing into the output; returns one entry per input (`None`
/// for inputs that do not require gradients).
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[Tensor<T>], &[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Scalar> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    id: usize,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    grad: RwLock<Option<Vec<T>>>,
    requires_grad: bool,
    node: Option<Node<T>>,
}

pub struct Tensor<T: Scalar> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad);
        if let Some(node) = &self.inner.node {
            s.field("op", &node.op);
        }
        if data.len() <= 16 {
            s.field("data", &*data);
        }
        s.finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn new_leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: RwLock::new(None),
                requires_grad,
                node: None,
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::new_leaf(shape.to_vec(), data, false))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Self::new_leaf(vec![1], vec![v], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::new_leaf(shape.to_vec(), vec![v; numel(shape)], false)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self::new_leaf(vec![n, n], data, false)
    }

    /// Independent draws from uniform(-bound, +bound).
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| T::lit(rng.random_range(-bound..=bound)))
            .collect();
        Self::new_leaf(shape.to_vec(), data, false)
    }

    /// A new leaf sharing no storage with `self`, with the given grad flag.
    pub fn detach_with_grad(&self, requires_grad: bool) -> Self {
        Self::new_leaf(self.inner.shape.clone(), self.to_vec(), requires_grad)
    }

    /// Marks a freshly built leaf as trainable.
    pub fn requires_grad(self) -> Self {
        if self.inner.requires_grad {
            return self;
        }
        self.detach_with_grad(true)
    }

    pub fn detach(&self) -> Self {
        self.detach_with_grad(false)
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// Name of the op that produced this tensor, if any.
    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.node.as_ref().map(|n| n.op)
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.inner.data.read().expect("tensor data lock poisoned")
    }

    /// Mutable access to the values. Only meaningful on leaves (parameters).
    pub fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<T>> {
        self.inner.data.write().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.as_f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        let d = self.data();
        if d.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor with {} elements",
                d.len()
            )));
        }
        Ok(d[0])
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.read().expect("grad lock poisoned").clone()
    }

    pub fn set_grad(&self, g: Option<Vec<T>>) {
        *self.inner.grad.write().expect("grad lock poisoned") = g;
    }

    pub fn zero_grad(&self) {
        let n = self.numel();
        let mut g = self.inner.grad.write().expect("grad lock poisoned");
        match g.as_mut() {
            Some(buf) => buf.iter_mut().for_each(|v| *v = T::zero()),
            None => *g = Some(vec![T::zero(); n]),
        }
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.write().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Builds the result of a differentiable op. The graph node is only
    /// recorded when some input requires a gradient and recording is enabled.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "{op} produced a bad buffer");
        let track = is_grad_enabled() && inputs.iter().any(|t| t.inner.requires_grad);
        if !track {
            return Self::new_leaf(shape, data, false);
        }
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: RwLock::new(None),
                requires_grad: true,
                node: Some(Node {
                    op,
                    inputs,
                    backward,
                }),
            }),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into the
    /// `grad` buffer of every reachable leaf that requires one; callers zero
    /// them between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.requires_grad {
            return Ok(());
        }

        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);

        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.inner.node {
                None => t.accumulate_grad(&g),
                Some(node) => {
                    let out = t.data();
                    let grads = (node.backward)(&node.inputs, &out, &g);
                    debug_assert_eq!(grads.len(), node.inputs.len(), "{}", node.op);
                    for (input, grad) in node.inputs.iter().zip(grads) {
                        let Some(grad) = grad else { continue };
                        if !input.inner.requires_grad {
                            continue;
                        }
                        debug_assert_eq!(grad.len(), input.numel(), "{} grad size", node.op);
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &b)| *a += b),
                            None => {
                                pending.insert(input.id(), grad);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` that require grad, inputs before outputs.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (tensor, children already pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for input in &node.inputs {
                    if input.inner.requires_grad && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}
