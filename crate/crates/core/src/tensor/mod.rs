//! Dense row-major `f64` tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is a cheap handle to an immutable node of a dynamically built
//! computation graph. Every op returns a new node that remembers its parents
//! and a closure mapping the output gradient to parent gradients. Calling
//! [`Tensor::backward`] on a scalar walks the graph in reverse creation order
//! and accumulates gradients into every reachable leaf that requires them.
//!
//! Leaves are the only nodes whose data may change after construction, and
//! only through [`Tensor::update_leaf`] (used by the optimizer between steps).

mod kernels;
mod ops;
mod param;

use std::cell::{Ref, RefCell};
use std::cmp::Reverse;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use param::Parameter;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape {0:?}: every extent must be positive")]
    InvalidShape(Vec<usize>),
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: window {window:?} does not fit input {shape:?}")]
    BadWindow {
        op: &'static str,
        window: Vec<usize>,
        shape: Vec<usize>,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("cannot update a non-leaf tensor")]
    NotALeaf,
    #[error("{0}")]
    Invalid(String),
}

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct GradFn {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if data.len() <= 16 {
            s.field("data", &*data);
        } else {
            s.field("data", &format_args!("[{} values]", data.len()));
        }
        s.field("requires_grad", &self.0.requires_grad).finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tensor {
    fn leaf(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if shape.contains(&0) {
            return Err(TensorError::InvalidShape(shape.to_vec()));
        }
        let expected = numel(shape);
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        check_finite("constructor", &data)?;
        Ok(Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: shape.to_vec(),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            grad_fn: None,
        })))
    }

    /// Constant tensor that does not take part in differentiation.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape, data, false)
    }

    /// Leaf tensor that accumulates a gradient during `backward`.
    pub fn variable(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape, data, true)
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Self::new(shape, vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        Self::new(shape, vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Result<Tensor> {
        Self::new(&[], vec![value])
    }

    pub fn vector(data: &[f64]) -> Result<Tensor> {
        Self::new(&[data.len()], data.to_vec())
    }

    /// Internal constructor for op outputs.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Result<Tensor> {
        debug_assert_eq!(numel(&shape), data.len(), "{op} output size");
        check_finite(op, &data)?;
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let grad_fn = requires_grad.then(|| GradFn {
            op,
            parents,
            backward: Box::new(backward),
        });
        Ok(Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            grad_fn,
        })))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        let d = self.0.data.borrow();
        (d.len() == 1).then(|| d[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Name of the op that produced this tensor, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.op)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// True when both handles point at the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Copy of the values as a constant, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new(&self.0.shape, self.to_vec()).expect("existing tensor is valid")
    }

    /// Mutate the values of a leaf in place. Non-finite results are rejected
    /// and leave the tensor unchanged.
    pub fn update_leaf(&self, f: impl FnOnce(&mut [f64])) -> Result<()> {
        if !self.is_leaf() {
            return Err(TensorError::NotALeaf);
        }
        let mut next = self.0.data.borrow().clone();
        f(&mut next);
        check_finite("update_leaf", &next)?;
        *self.0.data.borrow_mut() = next;
        Ok(())
    }

    /// Reverse-mode sweep from a scalar. Gradients of leaves that require
    /// them are added to whatever they already hold.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let mut nodes = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.0.id) {
                continue;
            }
            if let Some(gf) = &t.0.grad_fn {
                stack.extend(gf.parents.iter().cloned());
            }
            nodes.push(t);
        }
        // Parents are always created before their children.
        nodes.sort_by_key(|n| Reverse(n.0.id));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.0.id, vec![1.0]);
        for node in nodes {
            let Some(g) = pending.remove(&node.0.id) else {
                continue;
            };
            match &node.0.grad_fn {
                Some(gf) => {
                    let parent_grads = (gf.backward)(&g);
                    for (parent, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        match pending.get_mut(&parent.0.id) {
                            Some(acc) => kernels::add_assign(acc, &pg),
                            None => {
                                pending.insert(parent.0.id, pg);
                            }
                        }
                    }
                }
                None => {
                    check_finite("backward", &g)?;
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => kernels::add_assign(acc, &g),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}
