//! Eagerly recorded computation graph with a single reverse sweep.
//!
//! Every primitive evaluates immediately, checks its output for non-finite
//! values and appends a node. [`Graph::backward`] walks the nodes in exact
//! reverse order, accumulating gradients additively at fan-out. A graph is
//! meant to live for one forward/backward pass and then be dropped.

use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::gemm::{gemm, Mat};
use crate::kernels::conv::{self, ConvParams};
use crate::kernels::norm;
use crate::kernels::resample::{self, PoolKind};
use crate::kernels::{gelu, gelu_grad, split_axis};
use crate::tensor::{strides_of, Tensor};

/// Sentinel in a gather index meaning "emit zero".
pub const GATHER_ZERO: usize = usize::MAX;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation whose forward and reverse rules are supplied by
/// the caller, for fused losses that are awkward to express with primitives.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Vector-Jacobian product: one entry per input, `None` for inputs that
    /// receive no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, p: ConvParams },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize },
    Upsample2x(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, axis: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Sin(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Softmax { x: Var, axis: usize },
    Pool { x: Var, kind: PoolKind, k: usize, s: usize },
    L2Normalize { x: Var, eps: f64, div: Vec<f64> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ChannelScale { x: Var, s: Var },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Gather { x: Var, index: Arc<[usize]> },
    MatMul { a: Var, b: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Upsample2x(x)
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::Abs(x)
            | Op::Sin(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::Pool { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::Permute { x, .. }
            | Op::Narrow { x, .. }
            | Op::Gather { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul { a, b } => vec![*a, *b],
            Op::ChannelScale { x, s } => vec![*x, *s],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Upsample2x(_) => "bilinear_upsample2x",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::Sin(_) => "sin",
            Op::Linear { .. } => "linear",
            Op::Softmax { .. } => "softmax",
            Op::Pool { .. } => "pool2d",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::ChannelScale { .. } => "channel_scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Gather { .. } => "gather",
            Op::MatMul { .. } => "matmul",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.nodes.iter().map(|n| (n.op.name(), n.value.shape()))).finish()
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn rank4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(invalid!("{what} expects an NCHW tensor, got shape {s:?}")),
    }
}

fn permute_data(src: &Tensor, perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_shape = src.shape();
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(src.numel());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    let data = src.data();
    for _ in 0..src.numel() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += mapped[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= mapped[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    (out_shape, out)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Inserts a leaf; gradients are reported for it when `requires_grad`.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Copies the value of `v` into a new constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        value.check_finite(op.name())?;
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: ConvParams) -> Result<Var> {
        let out = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), p)?;
        self.push(out, Op::Conv2d { x, w, b, p })
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = conv::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, padding)?;
        self.push(out, Op::ConvTranspose2d { x, w, b, stride, padding })
    }

    pub fn bilinear_upsample2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = rank4(self.value(x), "bilinear_upsample2x")?;
        let out = resample::upsample2x(self.value(x).data(), n * c, h, w);
        self.push(Tensor::new(&[n, c, 2 * h, 2 * w], out)?, Op::Upsample2x(x))
    }

    /// Layer normalisation over `axis` with per-channel affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if axis >= xs.len() {
            return Err(invalid!("layer_norm axis {axis} out of range for {xs:?}"));
        }
        if !(eps > 0.0) {
            return Err(invalid!("layer_norm eps must be positive, got {eps}"));
        }
        let c = xs[axis];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(invalid!("layer_norm affine parameters must have shape [{c}]"));
        }
        let (y, mean, rstd) =
            norm::layer_norm(self.value(x).data(), &xs, axis, self.value(gamma).data(), self.value(beta).data(), eps);
        self.push(Tensor::new(&xs, y)?, Op::LayerNorm { x, gamma, beta, axis, mean, rstd })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x))
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::sin);
        self.push(out, Op::Sin(x))
    }

    /// Affine map on the last axis: `x @ w^T + b`, `w` shaped `[Dout, Din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let &[dout, din] = self.shape(w) else {
            return Err(invalid!("linear weight must be [Dout, Din], got {:?}", self.shape(w)));
        };
        if xs.last() != Some(&din) {
            return Err(invalid!("linear input {xs:?} does not end in {din}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(invalid!("linear bias must be [{dout}]"));
            }
        }
        let m = self.value(x).numel() / din;
        let mut out = vec![0.0; m * dout];
        if let Some(b) = b {
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(self.value(b).data());
            }
        }
        gemm(
            m,
            din,
            dout,
            1.0,
            Mat::rm(self.value(x).data(), din),
            Mat::rm_t(self.value(w).data(), din),
            1.0,
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(invalid!("softmax axis {axis} out of range for {xs:?}"));
        }
        let y = norm::softmax(self.value(x).data(), &xs, axis);
        self.push(Tensor::new(&xs, y)?, Op::Softmax { x, axis })
    }

    /// Mean or sum pooling with a square `k x k` kernel and stride `s`, or a
    /// global spatial mean (kernel and stride ignored).
    pub fn pool2d(&mut self, x: Var, kind: PoolKind, k: usize, s: usize) -> Result<Var> {
        let [n, c, h, w] = rank4(self.value(x), "pool2d")?;
        if kind != PoolKind::GlobalMean && (k == 0 || s == 0 || k > h || k > w) {
            return Err(invalid!("pool2d kernel {k} stride {s} invalid for {h}x{w}"));
        }
        let (ho, wo) = resample::pool_out(kind, h, w, k, s);
        let out = resample::pool2d(self.value(x).data(), n * c, h, w, kind, k, s);
        self.push(Tensor::new(&[n, c, ho, wo], out)?, Op::Pool { x, kind, k, s })
    }

    /// Scales each last-axis vector to unit Euclidean norm (divisor floored at `eps`).
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| invalid!("l2_normalize needs rank >= 1"))?;
        let (y, div) = norm::l2_normalize(self.value(x).data(), c, eps);
        self.push(Tensor::new(&xs, y)?, Op::L2Normalize { x, eps, div })
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(invalid!("{op}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor::new(ta.shape(), ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip(a, b, |x, y| x + y)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip(a, b, |x, y| x - y)?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip(a, b, |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x))
    }

    /// Multiplies channel `c` (axis 1) of `x` by `s[c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(s) != [xs[1]] {
            return Err(invalid!("channel_scale of {xs:?} by {:?}", self.shape(s)));
        }
        let (_, c, inner) = split_axis(&xs, 1);
        let sv = self.value(s).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv[(i / inner) % c])
            .collect();
        self.push(Tensor::new(&xs, data)?, Op::ChannelScale { x, s })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(out, Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.value(x).rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid!("permutation {perm:?} invalid for rank {rank}"));
        }
        let (shape, data) = permute_data(self.value(x), perm);
        self.push(Tensor::new(&shape, data)?, Op::Permute { x, perm: perm.to_vec() })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| invalid!("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(invalid!("concat axis {axis} out of range"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(invalid!("concat shapes {first:?} and {s:?} disagree off axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Tensor::new(&shape, data)?, Op::Concat { xs: xs.to_vec(), axis })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(invalid!("narrow [{start}, {}) on axis {axis} of {xs:?}", start + len));
        }
        let (outer, n, inner) = split_axis(&xs, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        self.push(Tensor::new(&shape, data)?, Op::Narrow { x, axis, start })
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if index.iter().any(|&i| i != GATHER_ZERO && i >= src.len()) {
            return Err(invalid!("gather index out of range for {} elements", src.len()));
        }
        let data = index.iter().map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i] }).collect();
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Gather { x, index })
    }

    /// Batched product of `[B, M, K]` and `[B, K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[ba, m, k], &[bb, kb, n]) = (self.shape(a), self.shape(b)) else {
            return Err(invalid!("matmul expects rank-3 operands"));
        };
        if ba != bb || k != kb {
            return Err(invalid!("matmul of [{ba},{m},{k}] and [{bb},{kb},{n}]"));
        }
        let mut out = vec![0.0; ba * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..ba {
            gemm(
                m,
                k,
                n,
                1.0,
                Mat::rm(&ad[i * m * k..(i + 1) * m * k], k),
                Mat::rm(&bd[i * k * n..(i + 1) * k * n], n),
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(Tensor::new(&[ba, m, n], out)?, Op::MatMul { a, b })
    }

    pub fn custom(&mut self, inputs: &[Var], mut op: Box<dyn CustomOp>) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&values)?;
        self.push(out, Op::Custom { inputs: inputs.to_vec(), op })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(invalid!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (v, dv) in self.vjp(node, &g)? {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(dv.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(dv),
                }
            }
        }
        for g in grads.iter().flatten() {
            g.check_finite("backward")?;
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let need = |v: Var| self.nodes[v.0].needs_grad;
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape(), data);
        let mut out: Vec<(Var, Tensor)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, p } => {
                let flags = [need(*x), need(*w), b.is_some_and(need)];
                let (dx, dw, db) = conv::conv2d_backward(val(*x), val(*w), *p, g, flags)?;
                out.extend(dx.map(|t| (*x, t)));
                out.extend(dw.map(|t| (*w, t)));
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, db));
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, padding } => {
                let flags = [need(*x), need(*w), b.is_some_and(need)];
                let (dx, dw, db) = conv::conv_transpose2d_backward(val(*x), val(*w), *stride, *padding, g, flags)?;
                out.extend(dx.map(|t| (*x, t)));
                out.extend(dw.map(|t| (*w, t)));
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, db));
                }
            }
            Op::Upsample2x(x) => {
                let [n, c, h, w] = rank4(val(*x), "bilinear_upsample2x")?;
                out.push((*x, like(*x, resample::upsample2x_backward(g.data(), n * c, h, w))?));
            }
            Op::LayerNorm { x, gamma, beta, axis, mean, rstd } => {
                let (dx, dg, db) = norm::layer_norm_backward(
                    val(*x).data(),
                    val(*x).shape(),
                    *axis,
                    val(*gamma).data(),
                    mean,
                    rstd,
                    g.data(),
                );
                out.push((*x, like(*x, dx)?));
                out.push((*gamma, like(*gamma, dg)?));
                out.push((*beta, like(*beta, db)?));
            }
            Op::Gelu(x) => {
                let d = val(*x).data().iter().zip(g.data()).map(|(v, gv)| gelu_grad(*v) * gv).collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Relu(x) => {
                let d = val(*x).data().iter().zip(g.data()).map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 }).collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Abs(x) => {
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(v, gv)| if *v > 0.0 { *gv } else if *v < 0.0 { -gv } else { 0.0 })
                    .collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Sin(x) => {
                let d = val(*x).data().iter().zip(g.data()).map(|(v, gv)| v.cos() * gv).collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Linear { x, w, b } => {
                let &[dout, din] = val(*w).shape() else { unreachable!() };
                let m = val(*x).numel() / din;
                if need(*x) {
                    let mut dx = vec![0.0; m * din];
                    gemm(m, dout, din, 1.0, Mat::rm(g.data(), dout), Mat::rm(val(*w).data(), din), 0.0, &mut dx);
                    out.push((*x, like(*x, dx)?));
                }
                if need(*w) {
                    let mut dw = vec![0.0; dout * din];
                    gemm(dout, m, din, 1.0, Mat::rm_t(g.data(), dout), Mat::rm(val(*x).data(), din), 0.0, &mut dw);
                    out.push((*w, like(*w, dw)?));
                }
                if let Some(b) = b.filter(|b| need(*b)) {
                    let mut db = vec![0.0; dout];
                    for row in g.data().chunks_exact(dout) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    out.push((b, like(b, db)?));
                }
            }
            Op::Softmax { x, axis } => {
                let d = norm::softmax_backward(node.value.data(), node.value.shape(), *axis, g.data());
                out.push((*x, like(*x, d)?));
            }
            Op::Pool { x, kind, k, s } => {
                let [n, c, h, w] = rank4(val(*x), "pool2d")?;
                out.push((*x, like(*x, resample::pool2d_backward(g.data(), n * c, h, w, *kind, *k, *s))?));
            }
            Op::L2Normalize { x, eps, div } => {
                let c = *val(*x).shape().last().unwrap();
                let d = norm::l2_normalize_backward(val(*x).data(), node.value.data(), div, c, *eps, g.data());
                out.push((*x, like(*x, d)?));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    let d = val(*b).data().iter().zip(g.data()).map(|(x, y)| x * y).collect();
                    out.push((*a, like(*a, d)?));
                }
                if need(*b) {
                    let d = val(*a).data().iter().zip(g.data()).map(|(x, y)| x * y).collect();
                    out.push((*b, like(*b, d)?));
                }
            }
            Op::Scale(x, f) => out.push((*x, g.map(|v| v * f))),
            Op::AddScalar(x) => out.push((*x, g.clone())),
            Op::ChannelScale { x, s } => {
                let xs = val(*x).shape();
                let (_, c, inner) = split_axis(xs, 1);
                let sv = val(*s).data();
                if need(*x) {
                    let d = g.data().iter().enumerate().map(|(i, gv)| gv * sv[(i / inner) % c]).collect();
                    out.push((*x, like(*x, d)?));
                }
                if need(*s) {
                    let mut ds = vec![0.0; c];
                    for (i, (gv, xv)) in g.data().iter().zip(val(*x).data()).enumerate() {
                        ds[(i / inner) % c] += gv * xv;
                    }
                    out.push((*s, like(*s, ds)?));
                }
            }
            Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape(), g.item()))),
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                out.push((*x, Tensor::full(val(*x).shape(), g.item() / n)));
            }
            Op::Reshape(x) => out.push((*x, g.clone().reshape(val(*x).shape())?)),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (shape, data) = permute_data(g, &inverse);
                out.push((*x, Tensor::new(&shape, data)?));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = val(v).shape()[*axis];
                    if need(v) {
                        let mut d = Vec::with_capacity(val(v).numel());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        out.push((v, like(v, d)?));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = val(*x).shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let len = g.shape()[*axis];
                let mut d = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, like(*x, d)?));
            }
            Op::Gather { x, index } => {
                let mut d = vec![0.0; val(*x).numel()];
                for (&i, gv) in index.iter().zip(g.data()) {
                    if i != GATHER_ZERO {
                        d[i] += gv;
                    }
                }
                out.push((*x, like(*x, d)?));
            }
            Op::MatMul { a, b } => {
                let &[bs, m, k] = val(*a).shape() else { unreachable!() };
                let n = val(*b).shape()[2];
                let (ad, bd, gd) = (val(*a).data(), val(*b).data(), g.data());
                if need(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            Mat::rm(&gd[i * m * n..(i + 1) * m * n], n),
                            Mat::rm_t(&bd[i * k * n..(i + 1) * k * n], n),
                            0.0,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    out.push((*a, like(*a, da)?));
                }
                if need(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            Mat::rm_t(&ad[i * m * k..(i + 1) * m * k], k),
                            Mat::rm(&gd[i * m * n..(i + 1) * m * n], n),
                            0.0,
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    out.push((*b, like(*b, db)?));
                }
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let grads = op.backward(&values, &node.value, g)?;
                if grads.len() != inputs.len() {
                    return Err(invalid!("custom op {} returned {} gradients for {} inputs", op.name(), grads.len(), inputs.len()));
                }
                for (&v, d) in inputs.iter().zip(grads) {
                    if let Some(d) = d {
                        if d.shape() != val(v).shape() {
                            return Err(invalid!("custom op {} gradient shape mismatch", op.name()));
                        }
                        out.push((v, d));
                    }
                }
            }
        }
        Ok(out)
    }
}
