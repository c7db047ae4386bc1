//! Reverse-mode differentiation over an append-only node arena.
//!
//! Every operation appends a node holding its forward value and the
//! information its adjoint needs. Nodes are created in topological order,
//! so `backward` walks the arena once in reverse.

mod backward;
pub mod gradcheck;
mod ops;
mod shape;

pub use gradcheck::{grad_check, grad_check_at, GradCheckReport};
pub use ops::{sq_dist_matrix, UnfoldSpec};

use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum UnaryKind {
    Exp,
    Log,
    Sqrt,
    Recip,
    Neg,
    Square,
    Relu,
    Sigmoid,
    Gelu,
    Softplus,
    Tanh,
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Operand index maps for a broadcast binary op. `None` means the operand
/// already has the output shape.
#[derive(Clone, Debug)]
pub(crate) struct Broadcast {
    pub a_idx: Option<Vec<usize>>,
    pub b_idx: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
        plan: Broadcast,
    },
    Unary {
        x: Var,
        kind: UnaryKind,
    },
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaxAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        cols: usize,
        rstd: Vec<f64>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    BroadcastTo {
        x: Var,
        idx: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        sizes: Vec<usize>,
        inner: usize,
    },
    Narrow {
        x: Var,
        outer: usize,
        len: usize,
        start: usize,
        width: usize,
        inner: usize,
    },
    Unfold {
        x: Var,
        spec: UnfoldSpec,
        in_shape: [usize; 4],
        out_hw: (usize, usize),
    },
    Take {
        x: Var,
        indices: Vec<usize>,
    },
    PairwiseSqDist {
        a: Var,
        b: Var,
    },
    L2Norm {
        x: Var,
        cols: usize,
    },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
    pub grad: Option<Tensor>,
}

/// A differentiation graph. Leaves created with [`Graph::variable`] collect
/// gradients across `backward` calls until [`Graph::zero_grad`].
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that participates in differentiation.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }
}

#[cfg(test)]
mod tests;
