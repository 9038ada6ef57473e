//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every operation appends one node holding its forward value and whatever it
//! needs for its local gradient. Nodes can only reference earlier nodes, so the
//! recording order is a topological order and [`Graph::backward`] simply walks
//! it in reverse. The graph is rebuilt for every forward pass.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{axis_split, broadcast_index_map, broadcast_shape, gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Abs,
    Exp,
    Log,
    Sigmoid,
    Relu,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

/// Deliberate gradient bugs for negative-control tests of the checker.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    FlipSigmoidBackward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn rows(&self) -> usize {
        self.batch * self.oh * self.ow
    }
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of values each channel statistic was computed from.
    pub count: usize,
}

enum Op {
    Leaf,
    Unary(UnaryOp, NodeId),
    Binary(BinaryOp, NodeId, NodeId),
    Scale(NodeId, f64),
    Reduce {
        op: Reduction,
        input: NodeId,
        axis: Option<usize>,
        argmax: Vec<usize>,
    },
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Transpose(NodeId),
    Reshape(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        widths: Vec<usize>,
    },
    Column {
        input: NodeId,
        col: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool2d {
        x: NodeId,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    LeafProbs {
        d: NodeId,
        depth: usize,
        reach: Vec<f64>,
    },
    Mixture {
        experts: Vec<NodeId>,
        gate: NodeId,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary(u, _) => match u {
                UnaryOp::Neg => "neg",
                UnaryOp::Abs => "abs",
                UnaryOp::Exp => "exp",
                UnaryOp::Log => "log",
                UnaryOp::Sigmoid => "sigmoid",
                UnaryOp::Relu => "relu",
                UnaryOp::Sqrt => "sqrt",
            },
            Op::Binary(b, _, _) => match b {
                BinaryOp::Add => "add",
                BinaryOp::Sub => "sub",
                BinaryOp::Mul => "mul",
                BinaryOp::Div => "div",
            },
            Op::Scale(..) => "scale",
            Op::Reduce { op, .. } => match op {
                Reduction::Sum => "sum",
                Reduction::Mean => "mean",
                Reduction::Max => "max",
            },
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Column { .. } => "column",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::LeafProbs { .. } => "leaf_probabilities",
            Op::Mixture { .. } => "mixture",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recorded computation. Also known as the tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    buffer_updates: Vec<(ParamId, Vec<f64>)>,
    fault: Option<Fault>,
}

pub type TapeGraph = Graph;

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!("{} produced a non-finite value", op.name())));
        }
        value.requires_grad = requires_grad;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A leaf whose gradient is tracked iff `t.requires_grad`.
    pub fn input(&mut self, t: Tensor) -> Result<NodeId> {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Result<NodeId> {
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    /// Places a stored parameter on the tape. Trainable entries become
    /// gradient leaves linked back to `id`; frozen entries and buffers are
    /// constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        let mut t = store.get(id).clone();
        t.grad = None;
        let trainable = store.kind(id) == ParamKind::Trainable;
        let node = self.push(t, Op::Leaf, trainable)?;
        if trainable {
            self.nodes[node.0].param = Some(id);
        }
        Ok(node)
    }

    pub(crate) fn record_buffer_update(&mut self, id: ParamId, values: Vec<f64>) {
        self.buffer_updates.push((id, values));
    }

    /// Running-statistic updates recorded by training-mode layers, in
    /// recording order.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Vec<f64>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    // ------------------------------------------------------------------
    // Elementwise

    pub fn unary(&mut self, op: UnaryOp, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let data: Vec<f64> = match op {
            UnaryOp::Neg => x.data().iter().map(|v| -v).collect(),
            UnaryOp::Abs => x.data().iter().map(|v| v.abs()).collect(),
            UnaryOp::Exp => x.data().iter().map(|v| v.exp()).collect(),
            UnaryOp::Log => {
                if let Some(v) = x.data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Numeric(format!("log of non-positive value {v}")));
                }
                x.data().iter().map(|v| v.ln()).collect()
            }
            UnaryOp::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
            UnaryOp::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
            UnaryOp::Sqrt => {
                if let Some(v) = x.data().iter().find(|&&v| v < 0.0) {
                    return Err(Error::Numeric(format!("sqrt of negative value {v}")));
                }
                x.data().iter().map(|v| v.sqrt()).collect()
            }
        };
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.requires_grad(a);
        self.push(value, Op::Unary(op, a), rg)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn binary(&mut self, op: BinaryOp, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (xa, xb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(xa.shape(), xb.shape())?;
        let f = |u: f64, v: f64| match op {
            BinaryOp::Add => u + v,
            BinaryOp::Sub => u - v,
            BinaryOp::Mul => u * v,
            BinaryOp::Div => u / v,
        };
        if op == BinaryOp::Div && xb.data().contains(&0.0) {
            return Err(Error::Numeric("division by exact zero".into()));
        }
        let data: Vec<f64> = if xa.shape() == xb.shape() {
            xa.data().iter().zip(xb.data()).map(|(&u, &v)| f(u, v)).collect()
        } else {
            let ma = broadcast_index_map(xa.shape(), &shape);
            let mb = broadcast_index_map(xb.shape(), &shape);
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| f(xa.data()[i], xb.data()[j]))
                .collect()
        };
        let value = Tensor::new(shape, data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Op::Binary(op, a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Div, a, b)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect())?;
        let rg = self.requires_grad(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    // ------------------------------------------------------------------
    // Reductions

    pub fn reduce(&mut self, op: Reduction, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let (outer, n, inner, out_shape) = match axis {
            None => (1, x.numel(), 1, vec![1]),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::dim(format!(
                        "reduction axis {ax} out of range for shape {shape:?}"
                    )));
                }
                let (o, n, i) = axis_split(&shape, ax);
                let mut s: Vec<usize> = shape.clone();
                s.remove(ax);
                if s.is_empty() {
                    s.push(1);
                }
                (o, n, i, s)
            }
        };
        if n == 0 {
            return Err(Error::dim("reduction over an empty axis"));
        }
        let src = x.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if op == Reduction::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let slot = o * inner + i;
                let base = o * n * inner + i;
                match op {
                    Reduction::Sum | Reduction::Mean => {
                        let mut s = 0.0;
                        for k in 0..n {
                            s += src[base + k * inner];
                        }
                        out[slot] = if op == Reduction::Mean { s / n as f64 } else { s };
                    }
                    Reduction::Max => {
                        let mut best = base;
                        for k in 1..n {
                            let idx = base + k * inner;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                        out[slot] = src[best];
                        argmax[slot] = best;
                    }
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.requires_grad(a);
        self.push(
            value,
            Op::Reduce {
                op,
                input: a,
                axis,
                argmax,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce(Reduction::Sum, a, axis)
    }

    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce(Reduction::Mean, a, axis)
    }

    pub fn max(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce(Reduction::Max, a, axis)
    }

    // ------------------------------------------------------------------
    // Linear algebra and shape

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xa.rank() != 2 || xb.rank() != 2 || xa.shape()[1] != xb.shape()[0] {
            return Err(Error::dim(format!("matmul of {:?} by {:?}", xa.shape(), xb.shape())));
        }
        let (m, k, n) = (xa.shape()[0], xa.shape()[1], xb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(xa.data(), xb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// Dense layer `x·wᵀ + b` for `x[B×in]`, `w[out×in]`, `b[out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[1] || bv.numel() != wv.shape()[0] {
            return Err(Error::dim(format!(
                "linear layer: input {:?}, weight {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let (batch, fan_in, fan_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let mut out = Vec::with_capacity(batch * fan_out);
        for _ in 0..batch {
            out.extend_from_slice(bv.data());
        }
        gemm_bt_acc(xv.data(), wv.data(), &mut out, batch, fan_in, fan_out);
        let value = Tensor::new(vec![batch, fan_out], out)?;
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        self.push(value, Op::Linear { x, w, b }, rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::dim(format!("transpose of rank-{} tensor", x.rank())));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        let rg = self.requires_grad(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.requires_grad(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Flattens everything after the leading batch dimension.
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a);
        let batch = shape[0];
        let rest = shape[1..].iter().product::<usize>().max(1);
        self.reshape(a, vec![batch, rest])
    }

    /// Concatenates 2-D tensors along the feature axis.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = inputs.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let batch = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != 2 || s[0] != batch {
                return Err(Error::dim(format!("concat input {s:?} with batch {batch}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; batch * total];
        let mut offset = 0;
        for (&id, &w) in inputs.iter().zip(&widths) {
            let src = self.value(id).data();
            for r in 0..batch {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::new(vec![batch, total], out)?;
        let rg = inputs.iter().any(|&i| self.requires_grad(i));
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
            },
            rg,
        )
    }

    /// Column `col` of a 2-D tensor, as a vector.
    pub fn column(&mut self, a: NodeId, col: usize) -> Result<NodeId> {
        let x = self.value(a);
        if x.rank() != 2 || col >= x.shape()[1] {
            return Err(Error::dim(format!("column {col} of {:?}", x.shape())));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let out: Vec<f64> = (0..r).map(|i| x.data()[i * c + col]).collect();
        let value = Tensor::new(vec![r], out)?;
        let rg = self.requires_grad(a);
        self.push(value, Op::Column { input: a, col }, rg)
    }

    // ------------------------------------------------------------------
    // Convolutional layers

    /// Cross-correlation of `x[B×C×H×W]` with `w[O×C×kh×kw]` plus `b[O]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: Padding) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 4 || wv.rank() != 4 {
            return Err(Error::dim(format!(
                "conv2d input {:?} and kernels {:?} must be rank 4",
                xv.shape(),
                wv.shape()
            )));
        }
        let (batch, in_ch, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (out_ch, k_in, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        if k_in != in_ch {
            return Err(Error::dim(format!(
                "conv2d input has {in_ch} channels, kernels {:?} expect {k_in}",
                wv.shape()
            )));
        }
        if bv.numel() != out_ch {
            return Err(Error::dim(format!(
                "conv2d bias {:?} for {out_ch} output channels",
                bv.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let (pad_h, pad_w) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::Contract(format!(
                        "same padding needs odd kernels, got {kh}x{kw}"
                    )));
                }
                (kh / 2, kw / 2)
            }
        };
        if kh > h + 2 * pad_h || kw > wd + 2 * pad_w {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} larger than padded input {h}x{wd}"
            )));
        }
        let geom = ConvGeom {
            batch,
            in_ch,
            h,
            w: wd,
            out_ch,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            oh: (h + 2 * pad_h - kh) / stride + 1,
            ow: (wd + 2 * pad_w - kw) / stride + 1,
        };
        let cols = im2col(xv.data(), &geom);
        let mut mat = vec![0.0; geom.rows() * out_ch];
        gemm_bt_acc(&cols, wv.data(), &mut mat, geom.rows(), geom.patch(), out_ch);
        let plane = geom.oh * geom.ow;
        let mut out = vec![0.0; batch * out_ch * plane];
        for bi in 0..batch {
            for p in 0..plane {
                let row = &mat[(bi * plane + p) * out_ch..(bi * plane + p + 1) * out_ch];
                for (o, &v) in row.iter().enumerate() {
                    out[(bi * out_ch + o) * plane + p] = v + bv.data()[o];
                }
            }
        }
        let value = Tensor::new(vec![batch, out_ch, geom.oh, geom.ow], out)?;
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg)
    }

    /// 2×2 max-pooling with stride 2. Odd extents are padded with −∞, so the
    /// output is `ceil(H/2)×ceil(W/2)`. Ties go to the lowest flat index.
    pub fn maxpool2d(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::dim(format!("maxpool2d input {:?}", xv.shape())));
        }
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let src = xv.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = usize::MAX;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (y, xx) = (oy * 2 + dy, ox * 2 + dx);
                            if y >= h || xx >= w {
                                continue;
                            }
                            let idx = base + y * w + xx;
                            if best == usize::MAX || src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        let rg = self.requires_grad(x);
        self.push(value, Op::MaxPool2d { x, argmax }, rg)
    }

    /// Batch normalization over axis 1 of `x[B×C×…]`.
    ///
    /// With `running = None` the batch statistics are used and returned;
    /// otherwise the given (mean, var) pair normalizes the input.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(Error::dim(format!("batch norm input {:?}", xv.shape())));
        }
        let (outer, ch, inner) = axis_split(xv.shape(), 1);
        if self.value(gamma).numel() != ch || self.value(beta).numel() != ch {
            return Err(Error::dim(format!(
                "batch norm over {ch} channels with gamma {:?}, beta {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let src = xv.data();
        let count = outer * inner;
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != ch || v.len() != ch {
                    return Err(Error::dim("running statistics width"));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                if outer < 2 {
                    return Err(Error::Contract(
                        "batch norm in training mode needs a batch of at least 2".into(),
                    ));
                }
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for c in 0..ch {
                    let mut s = 0.0;
                    for o in 0..outer {
                        let base = (o * ch + c) * inner;
                        s += src[base..base + inner].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut sq = 0.0;
                    for o in 0..outer {
                        let base = (o * ch + c) * inner;
                        sq += src[base..base + inner].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[c] = m;
                    var[c] = sq / count as f64;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bta) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for i in base..base + inner {
                    let xh = (src[i] - mean[c]) * inv_std[c];
                    xhat[i] = xh;
                    out[i] = g[c] * xh + bta[c];
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let batch_stats = stats.is_some();
        let id = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        )?;
        Ok((id, stats))
    }

    // ------------------------------------------------------------------
    // Model-specific fused operations

    /// Mean cross-entropy of `logits[B×K]` against class indices, via the
    /// log-sum-exp form.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let z = self.value(logits);
        if z.rank() != 2 || z.shape()[0] != targets.len() {
            return Err(Error::dim(format!(
                "cross entropy of logits {:?} with {} targets",
                z.shape(),
                targets.len()
            )));
        }
        let (b, k) = (z.shape()[0], z.shape()[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Contract(format!("target class {t} outside {k} classes")));
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &z.data()[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + s.ln();
            loss += lse - row[t];
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / b as f64);
        let rg = self.requires_grad(logits);
        self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Leaf-reach probabilities of a complete binary soft tree.
    ///
    /// `d[B×(2^depth−1)]` holds each internal node's probability of routing
    /// left, in heap order (children of `n` are `2n+1` and `2n+2`). The left
    /// child takes factor `d_n`, the right child `1−d_n`. Output is
    /// `[B×2^depth]` with leaves ordered left to right.
    pub fn leaf_probabilities(&mut self, d: NodeId, depth: usize) -> Result<NodeId> {
        let dv = self.value(d);
        let internal = (1usize << depth) - 1;
        if depth == 0 || dv.rank() != 2 || dv.shape()[1] != internal {
            return Err(Error::dim(format!(
                "depth-{depth} tree needs {internal} routing columns, got {:?}",
                dv.shape()
            )));
        }
        let b = dv.shape()[0];
        let total = 2 * internal + 1;
        let leaves = internal + 1;
        let mut reach = vec![0.0; b * total];
        let mut out = vec![0.0; b * leaves];
        for r in 0..b {
            let dr = &dv.data()[r * internal..(r + 1) * internal];
            let rr = &mut reach[r * total..(r + 1) * total];
            rr[0] = 1.0;
            for n in 0..internal {
                rr[2 * n + 1] = rr[n] * dr[n];
                rr[2 * n + 2] = rr[n] * (1.0 - dr[n]);
            }
            out[r * leaves..(r + 1) * leaves].copy_from_slice(&rr[internal..]);
        }
        let value = Tensor::new(vec![b, leaves], out)?;
        let rg = self.requires_grad(d);
        self.push(value, Op::LeafProbs { d, depth, reach }, rg)
    }

    /// `z = Σ_l g[:,l]·z_l` for expert logits `z_l[B×K]` and gate `g[B×L]`.
    pub fn mixture(&mut self, experts: &[NodeId], gate: NodeId) -> Result<NodeId> {
        let gv = self.value(gate);
        let l = experts.len();
        if gv.rank() != 2 || gv.shape()[1] != l || l == 0 {
            return Err(Error::dim(format!("gate {:?} for {l} experts", gv.shape())));
        }
        let b = gv.shape()[0];
        let k = self.shape(experts[0]).get(1).copied().unwrap_or(0);
        for &e in experts {
            if self.shape(e) != [b, k] {
                return Err(Error::dim(format!(
                    "expert logits {:?}, expected [{b}, {k}]",
                    self.shape(e)
                )));
            }
        }
        let mut out = vec![0.0; b * k];
        for (li, &e) in experts.iter().enumerate() {
            let zv = self.value(e).data();
            for r in 0..b {
                let w = gv.data()[r * l + li];
                for j in 0..k {
                    out[r * k + j] += w * zv[r * k + j];
                }
            }
        }
        let value = Tensor::new(vec![b, k], out)?;
        let rg = self.requires_grad(gate) || experts.iter().any(|&e| self.requires_grad(e));
        self.push(
            value,
            Op::Mixture {
                experts: experts.to_vec(),
                gate,
            },
            rg,
        )
    }

    // ------------------------------------------------------------------
    // Reverse pass

    /// Propagates `∂loss/∂node` to every node that requires gradient.
    /// Contributions along multiple paths are summed.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient reaching {} node {i}",
                    node.op.name()
                )));
            }
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, a) => {
                let x = self.value(*a).data();
                let local: Vec<f64> = match op {
                    UnaryOp::Neg => g.iter().map(|v| -v).collect(),
                    UnaryOp::Abs => g
                        .iter()
                        .zip(x)
                        .map(|(gv, &xv)| {
                            if xv > 0.0 {
                                *gv
                            } else if xv < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                    UnaryOp::Exp => g.iter().zip(y).map(|(gv, yv)| gv * yv).collect(),
                    UnaryOp::Log => g.iter().zip(x).map(|(gv, xv)| gv / xv).collect(),
                    UnaryOp::Sigmoid => {
                        let sign = if self.fault == Some(Fault::FlipSigmoidBackward) {
                            -1.0
                        } else {
                            1.0
                        };
                        g.iter().zip(y).map(|(gv, yv)| sign * gv * yv * (1.0 - yv)).collect()
                    }
                    UnaryOp::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                    UnaryOp::Sqrt => g.iter().zip(y).map(|(gv, yv)| gv * 0.5 / yv).collect(),
                };
                self.accumulate(grads, *a, &local);
            }
            Op::Binary(op, a, b) => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                let out_shape = node.value.shape();
                let same = xa.shape() == out_shape && xb.shape() == out_shape;
                let (ma, mb) = if same {
                    (None, None)
                } else {
                    (
                        Some(broadcast_index_map(xa.shape(), out_shape)),
                        Some(broadcast_index_map(xb.shape(), out_shape)),
                    )
                };
                let ia = |i: usize| ma.as_ref().map_or(i, |m| m[i]);
                let ib = |i: usize| mb.as_ref().map_or(i, |m| m[i]);
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; xa.numel()];
                    for (i, gv) in g.iter().enumerate() {
                        let d = match op {
                            BinaryOp::Add | BinaryOp::Sub => *gv,
                            BinaryOp::Mul => gv * xb.data()[ib(i)],
                            BinaryOp::Div => gv / xb.data()[ib(i)],
                        };
                        ga[ia(i)] += d;
                    }
                    self.accumulate(grads, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; xb.numel()];
                    for (i, gv) in g.iter().enumerate() {
                        let d = match op {
                            BinaryOp::Add => *gv,
                            BinaryOp::Sub => -gv,
                            BinaryOp::Mul => gv * xa.data()[ia(i)],
                            BinaryOp::Div => {
                                let bv = xb.data()[ib(i)];
                                -gv * xa.data()[ia(i)] / (bv * bv)
                            }
                        };
                        gb[ib(i)] += d;
                    }
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::Scale(a, c) => {
                let local: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(grads, *a, &local);
            }
            Op::Reduce {
                op,
                input,
                axis,
                argmax,
            } => {
                let x = self.value(*input);
                let mut local = vec![0.0; x.numel()];
                match op {
                    Reduction::Max => {
                        for (slot, &idx) in argmax.iter().enumerate() {
                            local[idx] += g[slot];
                        }
                    }
                    Reduction::Sum | Reduction::Mean => {
                        let (outer, n, inner) = match axis {
                            None => (1, x.numel(), 1),
                            Some(ax) => axis_split(x.shape(), *ax),
                        };
                        let f = if *op == Reduction::Mean { 1.0 / n as f64 } else { 1.0 };
                        for o in 0..outer {
                            for k in 0..n {
                                for i in 0..inner {
                                    local[(o * n + k) * inner + i] = g[o * inner + i] * f;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, &local);
            }
            Op::MatMul(a, b) => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (xa.shape()[0], xa.shape()[1], xb.shape()[1]);
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_bt_acc(g, xb.data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_at_acc(xa.data(), g, &mut gb, k, m, n);
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, fan_in, fan_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; batch * fan_in];
                    gemm_acc(g, wv.data(), &mut gx, batch, fan_out, fan_in);
                    self.accumulate(grads, *x, &gx);
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; fan_out * fan_in];
                    gemm_at_acc(g, xv.data(), &mut gw, fan_out, batch, fan_in);
                    self.accumulate(grads, *w, &gw);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; fan_out];
                    for r in 0..batch {
                        for (o, gbv) in gb.iter_mut().enumerate() {
                            *gbv += g[r * fan_out + o];
                        }
                    }
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let mut local = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        local[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(grads, *a, &local);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g),
            Op::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let batch = node.value.shape()[0];
                let mut offset = 0;
                for (&id, &w) in inputs.iter().zip(widths) {
                    if self.requires_grad(id) {
                        let mut local = vec![0.0; batch * w];
                        for r in 0..batch {
                            local[r * w..(r + 1) * w].copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, id, &local);
                    }
                    offset += w;
                }
            }
            Op::Column { input, col } => {
                let s = self.shape(*input);
                let (r, c) = (s[0], s[1]);
                let mut local = vec![0.0; r * c];
                for i in 0..r {
                    local[i * c + col] = g[i];
                }
                self.accumulate(grads, *input, &local);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let plane = geom.oh * geom.ow;
                let rows = geom.rows();
                let mut gmat = vec![0.0; rows * geom.out_ch];
                for bi in 0..geom.batch {
                    for o in 0..geom.out_ch {
                        let src = &g[(bi * geom.out_ch + o) * plane..(bi * geom.out_ch + o + 1) * plane];
                        for (p, &v) in src.iter().enumerate() {
                            gmat[(bi * plane + p) * geom.out_ch + o] = v;
                        }
                    }
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; geom.out_ch * geom.patch()];
                    gemm_at_acc(&gmat, cols, &mut gw, geom.out_ch, rows, geom.patch());
                    self.accumulate(grads, *w, &gw);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; geom.out_ch];
                    for r in 0..rows {
                        for (o, gbv) in gb.iter_mut().enumerate() {
                            *gbv += gmat[r * geom.out_ch + o];
                        }
                    }
                    self.accumulate(grads, *b, &gb);
                }
                if self.requires_grad(*x) {
                    let mut gcols = vec![0.0; rows * geom.patch()];
                    gemm_acc(
                        &gmat,
                        self.value(*w).data(),
                        &mut gcols,
                        rows,
                        geom.out_ch,
                        geom.patch(),
                    );
                    let gx = col2im(&gcols, geom);
                    self.accumulate(grads, *x, &gx);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut local = vec![0.0; self.value(*x).numel()];
                for (slot, &idx) in argmax.iter().enumerate() {
                    local[idx] += g[slot];
                }
                self.accumulate(grads, *x, &local);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xv = self.value(*x);
                let (outer, ch, inner) = axis_split(xv.shape(), 1);
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; ch];
                let mut sum_gx = vec![0.0; ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for i in base..base + inner {
                            sum_g[c] += g[i];
                            sum_gx[c] += g[i] * xhat[i];
                        }
                    }
                }
                if self.requires_grad(*gamma) {
                    self.accumulate(grads, *gamma, &sum_gx);
                }
                if self.requires_grad(*beta) {
                    self.accumulate(grads, *beta, &sum_g);
                }
                if self.requires_grad(*x) {
                    let n = (outer * inner) as f64;
                    let mut gx = vec![0.0; xv.numel()];
                    for o in 0..outer {
                        for c in 0..ch {
                            let base = (o * ch + c) * inner;
                            let k = gam[c] * inv_std[c];
                            for i in base..base + inner {
                                gx[i] = if *batch_stats {
                                    k * (g[i] - sum_g[c] / n - xhat[i] * sum_gx[c] / n)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, &gx);
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let b = targets.len();
                let k = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut local = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    local[r * k + t] -= 1.0;
                }
                local.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, &local);
            }
            Op::LeafProbs { d, depth, reach } => {
                let internal = (1usize << depth) - 1;
                let total = 2 * internal + 1;
                let dv = self.value(*d).data();
                let b = dv.len() / internal;
                let mut local = vec![0.0; b * internal];
                let mut dreach = vec![0.0; total];
                for r in 0..b {
                    let rr = &reach[r * total..(r + 1) * total];
                    let dr = &dv[r * internal..(r + 1) * internal];
                    dreach[internal..].copy_from_slice(&g[r * (internal + 1)..(r + 1) * (internal + 1)]);
                    for n in (0..internal).rev() {
                        let (dl, dright) = (dreach[2 * n + 1], dreach[2 * n + 2]);
                        local[r * internal + n] = rr[n] * (dl - dright);
                        dreach[n] = dl * dr[n] + dright * (1.0 - dr[n]);
                    }
                }
                self.accumulate(grads, *d, &local);
            }
            Op::Mixture { experts, gate } => {
                let gv = self.value(*gate).data();
                let l = experts.len();
                let (b, k) = (node.value.shape()[0], node.value.shape()[1]);
                for (li, &e) in experts.iter().enumerate() {
                    if self.requires_grad(e) {
                        let mut local = vec![0.0; b * k];
                        for r in 0..b {
                            let w = gv[r * l + li];
                            for j in 0..k {
                                local[r * k + j] = w * g[r * k + j];
                            }
                        }
                        self.accumulate(grads, e, &local);
                    }
                }
                if self.requires_grad(*gate) {
                    let mut local = vec![0.0; b * l];
                    for (li, &e) in experts.iter().enumerate() {
                        let zv = self.value(e).data();
                        for r in 0..b {
                            local[r * l + li] = (0..k).map(|j| zv[r * k + j] * g[r * k + j]).sum();
                        }
                    }
                    self.accumulate(grads, *gate, &local);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Gradients of trainable parameter leaves, in recording order.
    pub fn param_grads<'a>(&'a self, grads: &'a Gradients) -> impl Iterator<Item = (ParamId, &'a [f64])> + 'a {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| {
            let pid = n.param?;
            grads.get(NodeId(i)).map(|g| (pid, g))
        })
    }

    /// Adds parameter gradients from `grads` into the matching entries of
    /// `store`.
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParamStore) {
        for (pid, g) in self.param_grads(grads) {
            store.get_mut(pid).accumulate_grad(g);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = (b * g.oh + oy) * g.ow + ox;
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for c in 0..g.in_ch {
                    let plane = &x[(b * g.in_ch + c) * g.h * g.w..(b * g.in_ch + c + 1) * g.h * g.w];
                    for ky in 0..g.kh {
                        let y = (oy * g.stride + ky) as isize - g.pad_h as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let xx = (ox * g.stride + kx) as isize - g.pad_w as isize;
                            if xx < 0 || xx >= g.w as isize {
                                continue;
                            }
                            dst[(c * g.kh + ky) * g.kw + kx] = plane[y as usize * g.w + xx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut x = vec![0.0; g.batch * g.in_ch * g.h * g.w];
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = (b * g.oh + oy) * g.ow + ox;
                let src = &cols[row * patch..(row + 1) * patch];
                for c in 0..g.in_ch {
                    let base = (b * g.in_ch + c) * g.h * g.w;
                    for ky in 0..g.kh {
                        let y = (oy * g.stride + ky) as isize - g.pad_h as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let xx = (ox * g.stride + kx) as isize - g.pad_w as isize;
                            if xx < 0 || xx >= g.w as isize {
                                continue;
                            }
                            x[base + y as usize * g.w + xx as usize] += src[(c * g.kh + ky) * g.kw + kx];
                        }
                    }
                }
            }
        }
    }
    x
}
