//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted value. Operations on
//! tensors that require gradients record a node holding the parent handles
//! and a backward rule; [`Tensor::backward`] sweeps the recorded graph in
//! reverse creation order. Tensor ids are allocated from a monotonically
//! increasing counter, so a parent always has a smaller id than its child and
//! sorting by id is a valid topological order.
//!
//! The set of differentiable operations is closed and enumerated by
//! [`Primitive`]; every loss and model in this crate is built from them.

mod conv;
mod gradcheck;
mod linalg;
mod norm;
mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::real::Real;

pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use conv::conv_out_extent;
pub use linalg::{gemm, gemm_nt, gemm_tn};
pub use norm::{BatchNormMode, BatchNormOutput, BatchNormState, BN_EPS};

/// Stabilizer added inside every square root that can receive zero.
pub const SQRT_EPS: f64 = 1e-12;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// The closed set of differentiable primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    MatMul,
    Conv2d,
    BatchNorm,
    Relu,
    MaxScalar,
    Sum,
    Mean,
    SqrtStable,
    Square,
    PairwiseSqDist,
    Reshape,
    CrossEntropy,
}

impl Primitive {
    pub const ALL: [Primitive; 18] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Div,
        Primitive::Scale,
        Primitive::AddScalar,
        Primitive::MatMul,
        Primitive::Conv2d,
        Primitive::BatchNorm,
        Primitive::Relu,
        Primitive::MaxScalar,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::SqrtStable,
        Primitive::Square,
        Primitive::PairwiseSqDist,
        Primitive::Reshape,
        Primitive::CrossEntropy,
    ];
}

/// Inputs handed to a backward rule.
pub(crate) struct BackwardCtx<'a, T: Real> {
    /// Forward output of the node.
    pub out: &'a [T],
    /// Upstream gradient, same length as `out`.
    pub grad: &'a [T],
    pub parents: &'a [Tensor<T>],
    /// Which parents need a gradient.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T: Real> {
    op: Primitive,
    parents: Vec<Tensor<T>>,
    rule: BackwardFn<T>,
}

struct Inner<T: Real> {
    id: usize,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    node: Option<Node<T>>,
    grad: RefCell<Option<Vec<T>>>,
}

/// Dense row-major tensor, cheap to clone (shared handle).
pub struct Tensor<T: Real> {
    inner: Rc<Inner<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("op", &self.op())
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    /// Creates a constant tensor. Fails if `data.len()` does not match `shape`.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// Creates a leaf tensor, optionally tracked for gradients.
    pub fn leaf(data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if data.len() != numel(shape) {
            return Err(Error::shape("tensor", &[data.len()], shape));
        }
        Ok(Self::raw(data, shape.to_vec(), requires_grad, None))
    }

    pub fn scalar(value: T) -> Self {
        Self::raw(vec![value], vec![1], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::raw(vec![T::zero(); numel(shape)], shape.to_vec(), false, None)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::of(v)).collect(), shape)
    }

    fn raw(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                node,
                grad: RefCell::new(None),
            }),
        }
    }

    /// Builds the output of a primitive. A graph node is recorded only when
    /// some parent requires a gradient.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        op: Primitive,
        parents: Vec<Tensor<T>>,
        rule: BackwardFn<T>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| Node { op, parents, rule });
        Self::raw(data, shape, requires_grad, node)
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// Primitive that produced this tensor, `None` for leaves and untracked values.
    pub fn op(&self) -> Option<Primitive> {
        self.inner.node.as_ref().map(|n| n.op)
    }

    /// Parents recorded in the backward graph.
    pub fn parents(&self) -> &[Tensor<T>] {
        self.inner
            .node
            .as_ref()
            .map(|n| n.parents.as_slice())
            .unwrap_or(&[])
    }

    /// Accumulated gradient of a leaf after [`Tensor::backward`].
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on a tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::raw(self.to_vec(), self.shape().to_vec(), false, None)
    }

    /// Reverse sweep from a scalar root. Gradients of every reachable leaf
    /// that requires a gradient are accumulated into the leaf and returned.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        let mut grads = Gradients::default();
        if !self.requires_grad() {
            return Ok(grads);
        }

        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            for p in t.parents() {
                stack.push(p.clone());
            }
            order.push(t);
        }
        order.sort_by(|a, b| b.id().cmp(&a.id()));

        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for t in &order {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.inner.node {
                None => {
                    {
                        let mut slot = t.inner.grad.borrow_mut();
                        match slot.as_mut() {
                            Some(acc) => add_into(acc, &g),
                            None => *slot = Some(g.clone()),
                        }
                    }
                    grads.map.insert(t.id(), g);
                }
                Some(node) => {
                    let needs: Vec<bool> = node.parents.iter().map(|p| p.requires_grad()).collect();
                    let ctx = BackwardCtx {
                        out: t.data(),
                        grad: &g,
                        parents: &node.parents,
                        needs: &needs,
                    };
                    let parent_grads = (node.rule)(&ctx);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "{:?} grad size", node.op);
                        match pending.get_mut(&p.id()) {
                            Some(acc) => add_into(acc, &pg),
                            None => {
                                pending.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Gradients of the leaves reached by one backward sweep.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    map: HashMap<usize, Vec<T>>,
}

impl<T: Real> Default for Gradients<T> {
    fn default() -> Self {
        Gradients {
            map: HashMap::new(),
        }
    }
}

impl<T: Real> Gradients<T> {
    /// Gradient for `leaf`; leaves the graph never touched get zeros.
    pub fn get(&self, leaf: &Tensor<T>) -> Vec<T> {
        self.map
            .get(&leaf.id())
            .cloned()
            .unwrap_or_else(|| vec![T::zero(); leaf.numel()])
    }

    pub fn contains(&self, leaf: &Tensor<T>) -> bool {
        self.map.contains_key(&leaf.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
