//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape of operation records built dynamically during the
//! forward pass. [`DiffValue`] handles point into the tape; calling
//! [`DiffValue::backward`] on a scalar loss walks the tape in reverse
//! (which is a topological order by construction) and accumulates exact
//! analytic partials into every node that has a parameter among its
//! ancestors. A graph can be differentiated once and is freed by dropping
//! its handles.
//!
//! All primitives are checked against central finite differences; see
//! [`gradcheck`].

mod backward;
pub(crate) mod forward;
pub mod gradcheck;
#[cfg(test)]
mod tests;

use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::tensor::Tensor;

pub use gradcheck::{grad_check, GradCheckReport, FD_STEP, KINK_MARGIN};

/// Errors raised while building or differentiating a graph.
#[derive(Debug, Clone, PartialEq)]
pub enum DiffError {
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    NonFinite {
        op: &'static str,
    },
    NonScalarLoss {
        shape: Vec<usize>,
    },
    BackwardTwice,
    /// 3x3 normal system with |det| below the singularity floor.
    SingularMatrix {
        det: f64,
    },
    KernelTooLarge {
        kernel: (usize, usize),
        padded: (usize, usize),
    },
    /// Gradient-check sampler kept producing near-kink inputs.
    KinkResampleExhausted {
        op: String,
    },
}

impl core::fmt::Display for DiffError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DiffError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            DiffError::NonFinite { op } => write!(f, "{op}: non-finite output"),
            DiffError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            DiffError::BackwardTwice => write!(f, "backward called twice on the same graph"),
            DiffError::SingularMatrix { det } => {
                write!(f, "solve3x3: singular system (det = {det:e})")
            }
            DiffError::KernelTooLarge { kernel, padded } => {
                write!(
                    f,
                    "conv2d: kernel {}x{} larger than padded input {}x{}",
                    kernel.0, kernel.1, padded.0, padded.1
                )
            }
            DiffError::KinkResampleExhausted { op } => {
                write!(f, "grad_check({op}): sampler exhausted kink-free retries")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for DiffError {}

pub type Result<T> = core::result::Result<T, DiffError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Neg,
    Recip,
    Log,
    Exp,
    Sqrt,
    Tanh,
    Sigmoid,
    Softplus,
    Elu,
    Abs,
}

impl UnaryKind {
    pub(crate) fn name(self) -> &'static str {
        match self {
            UnaryKind::Neg => "neg",
            UnaryKind::Recip => "recip",
            UnaryKind::Log => "log",
            UnaryKind::Exp => "exp",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Elu => "elu",
            UnaryKind::Abs => "abs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    pub(crate) fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }
}

/// Operation record: inputs by node id plus whatever the backward rule needs.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Unary {
        kind: UnaryKind,
        input: usize,
    },
    /// mul * x + add with constant coefficients; only `mul` matters to
    /// the backward rule.
    Affine {
        input: usize,
        mul: f64,
    },
    Clamp {
        input: usize,
        lo: f64,
        hi: f64,
    },
    Binary {
        kind: BinaryKind,
        lhs: usize,
        rhs: usize,
    },
    Sum {
        input: usize,
    },
    Mean {
        input: usize,
    },
    SumAxis {
        input: usize,
        axis: usize,
    },
    MeanAxis {
        input: usize,
        axis: usize,
    },
    Reshape {
        input: usize,
    },
    SliceChannels {
        input: usize,
        c0: usize,
    },
    Crop2d {
        input: usize,
        y0: usize,
        x0: usize,
    },
    ConcatChannels {
        inputs: Vec<usize>,
    },
    StackScalars {
        inputs: Vec<usize>,
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
        pad: usize,
    },
    GridSample {
        map: usize,
        positions: usize,
    },
    NormalizeChannels {
        input: usize,
    },
    /// Solves (mat) x = rhs; the inverse is saved for the backward rule
    /// d(M^-1) = -M^-1 dM M^-1.
    Solve3x3 {
        mat: usize,
        rhs: usize,
        inv: [f64; 9],
    },
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(usize)) {
        match self {
            Op::Leaf => {}
            Op::Unary { input, .. }
            | Op::Affine { input, .. }
            | Op::Clamp { input, .. }
            | Op::Sum { input }
            | Op::Mean { input }
            | Op::SumAxis { input, .. }
            | Op::MeanAxis { input, .. }
            | Op::Reshape { input }
            | Op::SliceChannels { input, .. }
            | Op::Crop2d { input, .. }
            | Op::NormalizeChannels { input } => f(*input),
            Op::Binary { lhs, rhs, .. } => {
                f(*lhs);
                f(*rhs);
            }
            Op::ConcatChannels { inputs } | Op::StackScalars { inputs } => {
                for &i in inputs {
                    f(i);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                f(*input);
                f(*weight);
                f(*bias);
            }
            Op::GridSample { map, positions } => {
                f(*map);
                f(*positions);
            }
            Op::Solve3x3 { mat, rhs, .. } => {
                f(*mat);
                f(*rhs);
            }
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) grad: Option<Tensor>,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

pub(crate) struct GraphInner {
    pub(crate) nodes: Vec<Node>,
    pub(crate) backward_done: bool,
}

/// Shared handle to a dynamically built computation tape.
#[derive(Clone)]
pub struct Graph {
    pub(crate) inner: Rc<RefCell<GraphInner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                backward_done: false,
            })),
        }
    }

    /// A differentiable leaf (parameter or input we want gradients for).
    pub fn leaf(&self, value: Tensor) -> DiffValue {
        self.push(value, Op::Leaf, true)
    }

    /// A constant; gradients are neither stored nor propagated into it.
    pub fn constant(&self, value: Tensor) -> DiffValue {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> DiffValue {
        self.constant(Tensor::scalar(v))
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> DiffValue {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        DiffValue {
            graph: self.clone(),
            id,
        }
    }

    pub(crate) fn needs_grad_of(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].needs_grad)
    }

    fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Handle to one tensor in a [`Graph`]; the unit every differentiable
/// operation consumes and produces.
#[derive(Clone)]
pub struct DiffValue {
    pub(crate) graph: Graph,
    pub(crate) id: usize,
}

impl core::fmt::Debug for DiffValue {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "DiffValue(id={}, shape={:?})", self.id, self.shape())
    }
}

impl DiffValue {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.inner.borrow().nodes[self.id].value.numel()
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    /// Scalar forward value.
    pub fn item(&self) -> f64 {
        self.graph.inner.borrow().nodes[self.id].value.item()
    }

    /// Accumulated gradient (zeros when this value is off every path to the
    /// loss or backward has not run).
    pub fn grad(&self) -> Tensor {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub(crate) fn expect_same_graph(&self, other: &DiffValue) {
        assert!(
            self.graph.same_graph(&other.graph),
            "DiffValues from different graphs cannot be combined"
        );
    }

    /// Reverse pass from this scalar loss. Fails on non-scalar or non-finite
    /// losses and on a second call for the same graph.
    pub fn backward(&self) -> Result<()> {
        backward::run(self)
    }
}
