//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tensor`] is an immutable node in a dynamically built graph. Every
//! operation that touches a tensor requiring gradients records a backward
//! closure; [`Tensor::backward`] walks the graph in reverse topological
//! order and accumulates gradients for every node that requires them.
//!
//! Gradients are keyed by node identity, so a parameter leaf must be reused
//! (not re-created) within one graph for its gradient to be collected in one
//! place. [`crate::nn::Param`] takes care of that.

mod conv;
pub mod gradcheck;
mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

pub use conv::ConvSpec;

pub type Array = ArrayD<f64>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD_DEPTH: Cell<usize> = const { Cell::new(0) };
}

/// Disables graph recording on the current thread while the guard lives.
pub struct NoGradGuard {
    _private: (),
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

pub fn no_grad() -> NoGradGuard {
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    NoGradGuard { _private: () }
}

fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

pub(crate) trait Backward: Send + Sync {
    fn inputs(&self) -> &[Tensor];
    /// One entry per input; `None` means no gradient flows to that input.
    fn backward(&self, output: &Array, grad: &Array) -> Vec<Option<Array>>;
}

struct Node {
    id: u64,
    value: Array,
    requires_grad: bool,
    grad_fn: Option<Box<dyn Backward>>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn with_node(value: Array, requires_grad: bool, grad_fn: Option<Box<dyn Backward>>) -> Self {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            grad_fn,
        }))
    }

    /// A constant leaf.
    pub fn new(value: Array) -> Self {
        Self::with_node(value, false, None)
    }

    /// A leaf that collects gradients.
    pub fn leaf(value: Array) -> Self {
        Self::with_node(value, true, None)
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Self::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data length mismatch"))
    }

    /// Records an operation result. The backward closure is only kept when
    /// grad mode is on and at least one input needs a gradient.
    pub(crate) fn from_op<B: Backward + 'static>(value: Array, op: B) -> Self {
        let needs = grad_enabled() && op.inputs().iter().any(|t| t.requires_grad());
        if needs {
            Self::with_node(value, true, Some(Box::new(op)))
        } else {
            Self::new(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Array {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.0.value.clone())
    }

    /// Back-propagates from this tensor, seeding its gradient with ones.
    pub fn backward(&self) -> Gradients {
        self.backward_with(Array::ones(self.0.value.raw_dim()))
    }

    pub fn backward_with(&self, seed: Array) -> Gradients {
        assert_eq!(seed.shape(), self.shape(), "seed gradient shape");
        let order = self.topo_order();
        let mut grads: HashMap<u64, Array> = HashMap::new();
        if self.requires_grad() {
            grads.insert(self.id(), seed);
        }
        for node in order.iter().rev() {
            let Some(grad_fn) = node.0.grad_fn.as_ref() else {
                continue;
            };
            let Some(grad) = grads.remove(&node.id()) else {
                continue;
            };
            let input_grads = grad_fn.backward(&node.0.value, &grad);
            for (input, g) in grad_fn.inputs().iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.shape(), input.shape(), "gradient shape for input");
                match grads.get_mut(&input.id()) {
                    Some(acc) => *acc += &g,
                    None => {
                        grads.insert(input.id(), g);
                    }
                }
            }
        }
        Gradients { map: grads }
    }

    /// Nodes reachable from `self`, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(f) = t.0.grad_fn.as_ref() {
                for input in f.inputs() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Gradients produced by one backward pass, keyed by tensor identity.
/// Only leaves keep their gradients; intermediate ones are released during
/// propagation.
#[derive(Default)]
pub struct Gradients {
    map: HashMap<u64, Array>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Array> {
        self.map.get(&t.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
