//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order, so the tape is topologically sorted by construction. Values are
//! addressed through copyable [`Var`] handles. [`Graph::backward`] walks
//! the tape once in reverse and accumulates gradients into every leaf that
//! requires them; calling it again without [`Graph::zero_grad`] adds to
//! the previous result. Dropping the graph frees the recording.

mod backward;
pub mod kernels;
mod ops;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use kernels::ConvGeom;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the smaller operand of a binary op is broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Bcast {
    Same,
    /// rhs repeats with period `n` over the output
    Rhs(usize),
    /// lhs repeats with period `n` over the output
    Lhs(usize),
}

impl Bcast {
    #[inline]
    pub(crate) fn lhs(self, i: usize) -> usize {
        match self {
            Bcast::Lhs(n) => i % n,
            _ => i,
        }
    }

    #[inline]
    pub(crate) fn rhs(self, i: usize) -> usize {
        match self {
            Bcast::Rhs(n) => i % n,
            _ => i,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Ln(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    ChannelSum(Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        out_ch: usize,
    },
    AvgPool2(Var),
    Upsample2(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    GatherTokens {
        src: Var,
        idx: Vec<usize>,
    },
    StraightThrough {
        con: Var,
    },
    NchwToTokens(Var),
    TokensToNchw(Var),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Ln(_) => "ln",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ChannelSum(_) => "channel_sum",
            Op::MatMul(..) => "matmul",
            Op::Bmm(..) => "bmm",
            Op::TransposeLast2(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2(_) => "avg_pool2x",
            Op::Upsample2(_) => "upsample_nearest2x",
            Op::GroupNorm { .. } => "group_norm",
            Op::Concat { .. } => "concat",
            Op::GatherRows { .. } => "gather_rows",
            Op::GatherTokens { .. } => "gather_tokens",
            Op::StraightThrough { .. } => "straight_through",
            Op::NchwToTokens(_) => "to_tokens",
            Op::TokensToNchw(_) => "from_tokens",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) | Op::Div(a, b, _) => {
                vec![*a, *b]
            }
            Op::MatMul(a, b) | Op::Bmm(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Ln(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::ChannelSum(a)
            | Op::TransposeLast2(a)
            | Op::Reshape(a)
            | Op::AvgPool2(a)
            | Op::Upsample2(a)
            | Op::NchwToTokens(a)
            | Op::TokensToNchw(a) => vec![*a],
            Op::Softmax { x, .. } => vec![*x],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::GatherTokens { src, .. } => vec![*src],
            Op::StraightThrough { con } => vec![*con],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Vec<f64>,
    pub(crate) shape: Vec<usize>,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
    /// Accumulated gradient; only kept for leaves that require it.
    pub(crate) grad: Option<Vec<f64>>,
}

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

    pub(crate) fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it is differentiable iff `t.is_requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            value: t.data().to_vec(),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            needs_grad: t.is_requires_grad(),
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Constant)
    }

    pub fn constant_raw(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.into_data(), shape.to_vec(), Op::Constant))
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (value, shape) = (n.value.clone(), n.shape.clone());
        self.push(value, shape, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Copies the value of `v` out as a tensor (no gradient attached).
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        if n.shape.is_empty() {
            Tensor::scalar(n.value[0])
        } else {
            Tensor::new(&n.shape, n.value.clone()).expect("graph shapes are valid")
        }
    }

    /// Accumulated gradient of a differentiable leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Returns an error naming the first node, in execution order, whose
    /// value is not finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.nodes.iter().position(|n| n.value.iter().any(|x| !x.is_finite())) {
            Some(i) => Err(Error::NonFinite {
                op: self.nodes[i].op.name(),
                node: i,
            }),
            None => Ok(()),
        }
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rn = &self.nodes[root.0];
        if rn.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rn.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::Constant => {}
                _ => backward::vjp(&self.nodes, i, &g, &mut grads),
            }
        }
        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}
