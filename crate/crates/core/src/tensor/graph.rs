//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, so node indices are
//! already a topological order: inputs always precede the nodes that use them.
//! [`Graph::backward`] walks the tape in reverse and returns fresh, zeroed
//! accumulators on every call.

use std::fmt;

use super::{linalg, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Probabilities are clamped to this floor before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag of a graph node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Mul,
    Scale,
    Sum,
    AddRowBias,
    Reshape,
    ConcatRows,
    Conv2d,
    Tanh,
    Relu,
    MaxPool2x2,
    Softmax,
    CrossEntropy,
    RowGradScale,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::AddRowBias => "add_row_bias",
            OpKind::Reshape => "reshape",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Conv2d => "conv2d",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::MaxPool2x2 => "maxpool2x2",
            OpKind::Softmax => "softmax",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::RowGradScale => "row_grad_scale",
        }
    }

    pub fn parse(name: &str) -> Option<OpKind> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

pub const ALL_KINDS: [OpKind; 17] = [
    OpKind::Leaf,
    OpKind::MatMul,
    OpKind::Transpose,
    OpKind::Add,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::Sum,
    OpKind::AddRowBias,
    OpKind::Reshape,
    OpKind::ConcatRows,
    OpKind::Conv2d,
    OpKind::Tanh,
    OpKind::Relu,
    OpKind::MaxPool2x2,
    OpKind::Softmax,
    OpKind::CrossEntropy,
    OpKind::RowGradScale,
];

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernels: usize,
    size: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    AddRowBias(Var, Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Tanh(Var),
    Relu(Var),
    MaxPool2x2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Softmax(Var),
    CrossEntropy {
        target: Vec<T>,
        q: Var,
    },
    RowGradScale {
        input: Var,
        factors: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(_) => OpKind::Sum,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::Reshape(_) => OpKind::Reshape,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::MaxPool2x2 { .. } => OpKind::MaxPool2x2,
            Op::Softmax(_) => OpKind::Softmax,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::RowGradScale { .. } => OpKind::RowGradScale,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRowBias(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Reshape(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softmax(a) => vec![*a],
            Op::ConcatRows(vs) => vs.clone(),
            Op::Conv2d {
                input,
                kernels,
                bias,
                ..
            } => vec![*input, *kernels, *bias],
            Op::MaxPool2x2 { input, .. } | Op::RowGradScale { input, .. } => vec![*input],
            Op::CrossEntropy { q, .. } => vec![*q],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient accumulators produced by one [`Graph::backward`] call.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` does not require
    /// gradients or is not reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Recording of tensor operations for reverse-mode differentiation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Multiplies every backward contribution of `kind` nodes by 1.01.
    /// Only exists so the gradient checker can be shown to catch a broken rule.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `[m×k] · [k×n] → [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        linalg::gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.derived(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let value = Tensor::new(vec![cols, rows], transposed(rows, cols, self.value(a).data()))?;
        Ok(self.derived(value, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.derived(value, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.derived(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| x * factor).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        self.derived(value, Op::Scale(a, factor))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let mut total = T::zero();
        for &x in self.value(a).data() {
            total += x;
        }
        self.derived(Tensor::scalar(total), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).len() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// `x[m×n] + b[n]`, broadcasting the bias over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape("add_row_bias", sx, sb));
        }
        let n = sx[1];
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.derived(value, Op::AddRowBias(x, b)))
    }

    /// `x · w + b` with `w` stored as `[in×out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_bias(xw, b)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.derived(value, Op::Reshape(a)))
    }

    /// Stacks rank-2 tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat_rows of zero tensors".into()))?;
        let cols = match self.shape(*first) {
            [_, c] => *c,
            s => return Err(Error::shape("concat_rows", s, &[])),
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::shape("concat_rows", self.shape(*first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.derived(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Valid (unpadded) cross-correlation plus per-kernel bias.
    ///
    /// `input` is `[c×h×w]` or a batch `[n×c×h×w]`; `kernels` is `[k×c×r×r]`;
    /// `bias` is `[k]`. Output spatial size is `⌊(h−r)/stride⌋+1`.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        let (sx, sk, sb) = (self.shape(input), self.shape(kernels), self.shape(bias));
        let (batch, batched, c, h, w) = match *sx {
            [c, h, w] => (1, false, c, h, w),
            [n, c, h, w] => (n, true, c, h, w),
            _ => return Err(Error::shape("conv2d", sx, sk)),
        };
        if sk.len() != 4 || sk[1] != c || sk[2] != sk[3] {
            return Err(Error::shape("conv2d", sx, sk));
        }
        if sb != [sk[0]] {
            return Err(Error::shape("conv2d bias", sk, sb));
        }
        let (k, r) = (sk[0], sk[2]);
        if r > h || r > w {
            return Err(Error::shape("conv2d kernel larger than input", sx, sk));
        }
        if stride == 0 {
            return Err(Error::Argument("conv2d stride must be at least 1".into()));
        }
        let geom = ConvGeom {
            batch,
            channels: c,
            height: h,
            width: w,
            kernels: k,
            size: r,
            stride,
            out_h: (h - r) / stride + 1,
            out_w: (w - r) / stride + 1,
        };
        let (plen, olen, ilen) = (geom.patch_len(), geom.out_len(), geom.in_len());
        let mut cols = vec![T::zero(); batch * plen * olen];
        let mut out = vec![T::zero(); batch * k * olen];
        let x = self.value(input).data();
        let kd = self.value(kernels).data();
        let bd = self.value(bias).data();
        for b in 0..batch {
            let col = &mut cols[b * plen * olen..(b + 1) * plen * olen];
            im2col(&x[b * ilen..(b + 1) * ilen], &geom, col);
            let o = &mut out[b * k * olen..(b + 1) * k * olen];
            for (row, &bv) in o.chunks_exact_mut(olen).zip(bd) {
                row.fill(bv);
            }
            linalg::gemm(k, plen, olen, kd, col, o);
        }
        let shape = if batched {
            vec![batch, k, geom.out_h, geom.out_w]
        } else {
            vec![k, geom.out_h, geom.out_w]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.derived(
            value,
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                cols,
            },
        ))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|x| x.tanh()).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        self.derived(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| x.max(T::zero())).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        self.derived(value, Op::Relu(a))
    }

    /// 2×2 max pooling with stride 2 over the last two axes. An odd trailing
    /// row or column is dropped. Ties go to the first element in row-major order.
    pub fn maxpool2x2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 || s[s.len() - 2] < 2 || s[s.len() - 1] < 2 {
            return Err(Error::shape("maxpool2x2", &s, &[2, 2]));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let (oh, ow) = (h / 2, w / 2);
        let planes = s[..s.len() - 2].iter().product::<usize>();
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([oh, ow]);
        let value = Tensor::new(shape, out)?;
        Ok(self.derived(value, Op::MaxPool2x2 { input: a, argmax }))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let Some(&n) = src.shape().last() else {
            return Err(Error::Argument("softmax of a rank-0 tensor".into()));
        };
        let mut data = src.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.derived(value, Op::Softmax(a)))
    }

    /// Cross entropy `−Σ p_k log q_k` over the last axis; `q` is clamped to
    /// 1e-12 before the logarithm. A rank-1 `q` gives a scalar, a `[n×k]` `q`
    /// gives one value per row.
    pub fn cross_entropy(&mut self, target: &Tensor<T>, q: Var) -> Result<Var> {
        let sq = self.shape(q);
        if target.shape() != sq || sq.is_empty() {
            return Err(Error::Argument(format!(
                "cross_entropy length mismatch: target {:?} vs prediction {:?}",
                target.shape(),
                sq
            )));
        }
        let k = sq[sq.len() - 1];
        let clamp = T::of(LOG_CLAMP);
        let out: Vec<T> = target
            .data()
            .chunks_exact(k)
            .zip(self.value(q).data().chunks_exact(k))
            .map(|(p, q)| {
                let mut acc = T::zero();
                for (&pk, &qk) in p.iter().zip(q) {
                    if pk != T::zero() {
                        acc -= pk * qk.max(clamp).ln();
                    }
                }
                acc
            })
            .collect();
        let shape = sq[..sq.len() - 1].to_vec();
        let value = Tensor::new(shape, out)?;
        Ok(self.derived(
            value,
            Op::CrossEntropy {
                target: target.data().to_vec(),
                q,
            },
        ))
    }

    /// Identity in the forward pass; in the backward pass row `i` of the
    /// incoming gradient is multiplied by `factors[i]`. A negative factor
    /// reverses the gradient for that row.
    pub fn row_grad_scale(&mut self, a: Var, factors: Vec<T>) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != factors.len() {
            return Err(Error::shape("row_grad_scale", s, &[factors.len()]));
        }
        let value = self.value(a).clone();
        Ok(self.derived(value, Op::RowGradScale { input: a, factors }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].as_ref() else { continue };
            let mut contributions = self.node_backward(node, g.data());
            if self.fault == Some(node.op.kind()) {
                let bump = T::of(1.01);
                for (_, c) in contributions.iter_mut() {
                    c.iter_mut().for_each(|v| *v *= bump);
                }
            }
            for (v, c) in contributions {
                let slot = &mut grads[v.0];
                match slot {
                    Some(acc) => {
                        for (a, x) in acc.data_mut().iter_mut().zip(c) {
                            *a += x;
                        }
                    }
                    None => {
                        let shape = self.nodes[v.0].value.shape().to_vec();
                        *slot = Some(Tensor::new(shape, c)?);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient contributions of one node to each of its inputs that
    /// requires a gradient.
    fn node_backward(&self, node: &Node<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    linalg::gemm_nt(m, n, k, g, self.value(*b).data(), &mut da);
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    linalg::gemm_tn(k, m, n, self.value(*a).data(), g, &mut db);
                    out.push((*b, db));
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                out.push((*a, transposed(s[0], s[1], g)));
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        out.push((*v, g.to_vec()));
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, zip_map(g, self.value(*b).data(), |x, y| x * y)));
                }
                if self.wants(*b) {
                    out.push((*b, zip_map(g, self.value(*a).data(), |x, y| x * y)));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.iter().map(|&x| x * *c).collect())),
            Op::Sum(a) => out.push((*a, vec![g[0]; self.value(*a).len()])),
            Op::AddRowBias(x, b) => {
                let n = self.shape(*b)[0];
                if self.wants(*x) {
                    out.push((*x, g.to_vec()));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks_exact(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.wants(*p) {
                        out.push((*p, g[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                cols,
            } => {
                let (k, plen, olen, ilen) =
                    (geom.kernels, geom.patch_len(), geom.out_len(), geom.in_len());
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); k];
                    for img in g.chunks_exact(k * olen) {
                        for (d, row) in db.iter_mut().zip(img.chunks_exact(olen)) {
                            for &v in row {
                                *d += v;
                            }
                        }
                    }
                    out.push((*bias, db));
                }
                if self.wants(*kernels) {
                    let mut dk = vec![T::zero(); k * plen];
                    for b in 0..geom.batch {
                        let gb = &g[b * k * olen..(b + 1) * k * olen];
                        let cb = &cols[b * plen * olen..(b + 1) * plen * olen];
                        linalg::gemm_nt(k, olen, plen, gb, cb, &mut dk);
                    }
                    out.push((*kernels, dk));
                }
                if self.wants(*input) {
                    let kd = self.value(*kernels).data();
                    let mut dx = vec![T::zero(); geom.batch * ilen];
                    let mut dcols = vec![T::zero(); plen * olen];
                    for b in 0..geom.batch {
                        dcols.fill(T::zero());
                        let gb = &g[b * k * olen..(b + 1) * k * olen];
                        linalg::gemm_tn(plen, k, olen, kd, gb, &mut dcols);
                        col2im(&dcols, geom, &mut dx[b * ilen..(b + 1) * ilen]);
                    }
                    out.push((*input, dx));
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                out.push((*a, zip_map(g, y, |gv, yv| gv * (T::one() - yv * yv))));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                out.push((
                    *a,
                    zip_map(g, x, |gv, xv| if xv > T::zero() { gv } else { T::zero() }),
                ));
            }
            Op::MaxPool2x2 { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] += gv;
                }
                out.push((*input, dx));
            }
            Op::Softmax(a) => {
                let n = *node.value.shape().last().expect("softmax rank ≥ 1");
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks_exact(n).zip(node.value.data().chunks_exact(n)) {
                    let mut inner = T::zero();
                    for (&gv, &yv) in gr.iter().zip(yr) {
                        inner += gv * yv;
                    }
                    dx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - inner)));
                }
                out.push((*a, dx));
            }
            Op::CrossEntropy { target, q } => {
                let qd = self.value(*q).data();
                let k = *self.shape(*q).last().expect("cross_entropy rank ≥ 1");
                let clamp = T::of(LOG_CLAMP);
                let mut dq = vec![T::zero(); qd.len()];
                for (r, &gr) in g.iter().enumerate() {
                    for j in r * k..(r + 1) * k {
                        if target[j] != T::zero() && qd[j] > clamp {
                            dq[j] = -gr * target[j] / qd[j];
                        }
                    }
                }
                out.push((*q, dq));
            }
            Op::RowGradScale { input, factors } => {
                let width = g.len() / factors.len();
                let mut dx = Vec::with_capacity(g.len());
                for (row, &f) in g.chunks_exact(width).zip(factors) {
                    dx.extend(row.iter().map(|&v| v * f));
                }
                out.push((*input, dx));
            }
        }
        out
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transposed<T: Scalar>(rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    let mut t = vec![T::zero(); x.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let olen = g.out_len();
    for c in 0..g.channels {
        for ky in 0..g.size {
            for kx in 0..g.size {
                let row = (c * g.size + ky) * g.size + kx;
                let dst = &mut cols[row * olen..(row + 1) * olen];
                for oy in 0..g.out_h {
                    let src = (c * g.height + oy * g.stride + ky) * g.width + kx;
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = img[src + ox * g.stride];
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let olen = g.out_len();
    for c in 0..g.channels {
        for ky in 0..g.size {
            for kx in 0..g.size {
                let row = (c * g.size + ky) * g.size + kx;
                let src = &cols[row * olen..(row + 1) * olen];
                for oy in 0..g.out_h {
                    let dst = (c * g.height + oy * g.stride + ky) * g.width + kx;
                    for ox in 0..g.out_w {
                        img[dst + ox * g.stride] += src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}
