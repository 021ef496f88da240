//! Dense f32 tensors recorded on a reverse-mode differentiation tape.
//!
//! A [`Tape`] owns every value produced during a forward pass together with
//! the operation that produced it. [`Tensor`] is a cheap handle into a tape.
//! Calling [`Tape::backward`] on a scalar walks the recorded operations in
//! reverse and fills in `grad` for every tensor that requires it.
//!
//! A tape belongs to a single thread. Independent tapes may run on separate
//! threads; merging their results is up to the caller.

mod backward;
pub mod gradcheck;
pub(crate) mod kernels;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use ops::{BinaryOp, ReduceOp, UnaryOp};

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Unary { x: usize, op: UnaryOp },
    Binary { a: usize, b: usize, op: BinaryOp },
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Reshape { x: usize },
    Reduce { x: usize, op: ReduceOp, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    IndexSelect { x: usize, indices: Rc<[usize]> },
    Conv1d { x: usize, w: usize, b: usize, stride: usize, padding: usize },
    GroupNorm { x: usize, gamma: usize, beta: usize, groups: usize, stats: Rc<[(f32, f32)]> },
    CosineRows { a: usize, b: usize },
    StraightThrough { soft: usize },
    /// Scalar output whose gradient w.r.t. `x` was computed during the forward pass.
    Precomputed { x: usize, grad: Rc<[f32]> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary { .. } => "unary",
            Op::Binary { .. } => "binary",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Reduce { .. } => "reduce",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::IndexSelect { .. } => "index_select",
            Op::Conv1d { .. } => "conv1d",
            Op::GroupNorm { .. } => "group_norm",
            Op::CosineRows { .. } => "cosine_rows",
            Op::StraightThrough { .. } => "straight_through",
            Op::Precomputed { .. } => "precomputed",
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Vec<f32>,
    pub(crate) shape: Vec<usize>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
    pub(crate) grad: Option<Vec<f32>>,
}

#[derive(Default)]
pub(crate) struct TapeInner {
    pub(crate) nodes: Vec<Node>,
    epoch: u64,
    check_finite: bool,
    no_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("ops", &self.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which nothing requires gradients; used for feature extraction.
    pub fn inference() -> Self {
        let tape = Self::default();
        tape.inner.borrow_mut().no_grad = true;
        tape
    }

    /// Asserts after every recorded op that its output is finite.
    pub fn set_check_finite(&self, on: bool) {
        self.inner.borrow_mut().check_finite = on;
    }

    pub fn is_inference(&self) -> bool {
        self.inner.borrow().no_grad
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded operation. Tensors created before the call become
    /// invalid.
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.epoch += 1;
    }

    pub fn leaf(&self, data: Vec<f32>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {numel} elements but {} were supplied",
                data.len()
            )));
        }
        let requires_grad = requires_grad && !self.is_inference();
        Ok(self.push(data, shape.to_vec(), Op::Leaf, requires_grad))
    }

    pub fn constant(&self, data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&self, value: f32) -> Tensor {
        self.push(vec![value], vec![], Op::Leaf, false)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        self.push(vec![0.0; numel], shape.to_vec(), Op::Leaf, false)
    }

    pub(crate) fn push(&self, value: Vec<f32>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        if inner.check_finite {
            if let Some(bad) = value.iter().find(|v| !v.is_finite()) {
                panic!("non-finite value {bad} produced by {} op #{}", op.name(), inner.nodes.len());
            }
        }
        let id = inner.nodes.len();
        let epoch = inner.epoch;
        let requires_grad = requires_grad && !inner.no_grad;
        inner.nodes.push(Node {
            value,
            shape,
            requires_grad,
            op,
            grad: None,
        });
        Tensor {
            tape: self.clone(),
            id,
            epoch,
        }
    }

    pub(crate) fn with_inner<R>(&self, f: impl FnOnce(&TapeInner) -> R) -> R {
        f(&self.inner.borrow())
    }

    pub(crate) fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Runs reverse-mode differentiation from a scalar loss with seed 1.0.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        self.backward_traced(loss).map(|_| ())
    }

    /// Like [`Tape::backward`], returning the ids of the visited operations in
    /// visiting order.
    pub fn backward_traced(&self, loss: &Tensor) -> Result<Vec<usize>> {
        loss.check_tape(self)?;
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        Ok(backward::run(&mut self.inner.borrow_mut(), loss.id))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
    epoch: u64,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tensor {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    fn node<R>(&self, f: impl FnOnce(&Node) -> R) -> R {
        self.tape.with_inner(|inner| {
            assert_eq!(inner.epoch, self.epoch, "tensor used after its tape was cleared");
            f(&inner.nodes[self.id])
        })
    }

    pub(crate) fn check_tape(&self, tape: &Tape) -> Result<()> {
        if !self.tape.same(tape) {
            return Err(Error::Contract("tensors belong to different tapes".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node(|n| n.shape.clone())
    }

    pub fn rank(&self) -> usize {
        self.node(|n| n.shape.len())
    }

    pub fn numel(&self) -> usize {
        self.node(|n| n.value.len())
    }

    pub fn requires_grad(&self) -> bool {
        self.node(|n| n.requires_grad)
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.node(|n| n.value.clone())
    }

    pub fn with_values<R>(&self, f: impl FnOnce(&[f32]) -> R) -> R {
        self.node(|n| f(&n.value))
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        self.node(|n| {
            assert_eq!(n.value.len(), 1, "item() on tensor of shape {:?}", n.shape);
            n.value[0]
        })
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.node(|n| n.grad.clone())
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        let shape = self.shape();
        match shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::dim(format!("expected a rank-2 tensor, got shape {shape:?}"))),
        }
    }
}
