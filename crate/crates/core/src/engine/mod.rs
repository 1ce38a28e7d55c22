//! Tape-based reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every primitive as it executes; [`Tape::backward`]
//! walks the record in strict reverse order and accumulates adjoints into
//! every node that requires a gradient. Values live in double precision.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::spectral::StftKernel;

pub mod gradcheck;
pub mod kernels;

use kernels::{axis_split, conv_out_len, for_each_permuted, ConvGeom};

/// Default ε for guarded square roots, norms and smoothed absolute values.
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Tanh(Var),
    LeakyRelu(Var, f64),
    Softmax(Var, usize),
    LayerNorm(Var, usize, f64),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Broadcast(Var),
    Dot(Var, Var),
    Norm(Var),
    Stft {
        x: Var,
        kernel: Arc<StftKernel>,
    },
    Istft {
        x: Var,
        kernel: Arc<StftKernel>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Matmul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Tanh(..) => "tanh",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Abs(..) => "abs",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Broadcast(..) => "broadcast",
            Op::Dot(..) => "dot",
            Op::Norm(..) => "norm",
            Op::Stft { .. } => "stft",
            Op::Istft { .. } => "istft",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when no gradient reached `v` (detached, constant, or unreachable).
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when none reached it.
    pub fn wrt(&self, v: Var, numel: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; numel], <[f64]>::to_vec)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Same value, cut off from the adjoint flow into its ancestry.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        let requires_grad = self.op_inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        self.nodes.push(Node {
            value: Tensor { shape, data },
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Dot(a, b) => {
                vec![*a, *b]
            }
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w, .. } | Op::ConvTranspose2d { x, w, .. } => vec![*x, *w],
            Op::Concat(vs, _) => vs.clone(),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::Softmax(a, _)
            | Op::LayerNorm(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Abs(a)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::Broadcast(a)
            | Op::Norm(a) => vec![*a],
            Op::Slice { x, .. } | Op::Stft { x, .. } | Op::Istft { x, .. } => vec![*x],
        }
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let name = op.name();
        same_shape(name, self.shape(a), self.shape(b))?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push(self.shape(a).to_vec(), data, op)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| f(*x)).collect();
        self.push(self.shape(a).to_vec(), data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.map(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Square(a), |x| x * x)
    }

    /// `sqrt(x + eps)`.
    pub fn sqrt(&mut self, a: Var, eps: f64) -> Result<Var> {
        let out = self.map(a, Op::Sqrt(a), |x| (x + eps).sqrt())?;
        Ok(out)
    }

    /// Smoothed absolute value `sqrt(x^2 + eps^2)`.
    pub fn abs(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.map(a, Op::Abs(a), |x| (x * x + eps * eps).sqrt())
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push(vec![], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.data(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.data(a).iter().sum::<f64>() / n as f64;
        self.push(vec![], vec![s], Op::Mean(a))
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("dot", self.shape(a), self.shape(b))?;
        let s = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).sum();
        self.push(vec![], vec![s], Op::Dot(a, b))
    }

    /// Guarded Euclidean norm `sqrt(sum x^2 + EPS^2)`.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().map(|x| x * x).sum::<f64>();
        self.push(vec![], vec![(s + EPS * EPS).sqrt()], Op::Norm(a))
    }

    /// Batched matrix product: `a` is `[.., m, k]`; `b` is either `[.., k, n]`
    /// with the same leading extents or a shared `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: rank < 2")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if kb != k || (!shared_b && &sb[..sb.len() - 2] != lead) {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for i in 0..batch {
                let bs = if shared_b { 0 } else { i * k * n };
                kernels::matmul_acc(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[bs..bs + k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        self.push(
            shape,
            out,
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
        )
    }

    /// 2-D convolution of `x: [B, Cin, H, W]` with `w: [Cout, Cin, KH, KW]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("conv2d", format!("input {sx:?}, kernel {sw:?}")));
        }
        let (oh, ow) = match (
            conv_out_len(sx[2], sw[2], stride.0, padding.0),
            conv_out_len(sx[3], sw[3], stride.1, padding.1),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape("conv2d", format!("kernel {sw:?} larger than padded input {sx:?}"))),
        };
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            kh: sw[2],
            kw: sw[3],
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            oh,
            ow,
        };
        let mut out = vec![0.0; geom.batch * geom.c_out * oh * ow];
        kernels::conv_forward(&geom, self.data(x), self.data(w), &mut out);
        self.push(vec![geom.batch, geom.c_out, oh, ow], out, Op::Conv2d { x, w, geom })
    }

    /// Transposed convolution of `x: [B, Cin, H, W]` with `w: [Cin, Cout, KH, KW]`
    /// to an explicit output size; it is the adjoint of [`conv2d`](Self::conv2d)
    /// mapping `[B, Cout, out_size]` to `[B, Cin, H, W]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        padding: (usize, usize),
        out_size: (usize, usize),
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("conv_transpose2d", format!("input {sx:?}, kernel {sw:?}")));
        }
        let fits = conv_out_len(out_size.0, sw[2], stride.0, padding.0) == Some(sx[2])
            && conv_out_len(out_size.1, sw[3], stride.1, padding.1) == Some(sx[3]);
        if !fits {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("output size {out_size:?} inconsistent with input {sx:?}"),
            ));
        }
        // Geometry of the forward convolution this op is the adjoint of.
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sw[1],
            h: out_size.0,
            w: out_size.1,
            c_out: sx[1],
            kh: sw[2],
            kw: sw[3],
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            oh: sx[2],
            ow: sx[3],
        };
        let mut out = vec![0.0; geom.batch * geom.c_in * geom.h * geom.w];
        kernels::conv_backward_input(&geom, self.data(x), self.data(w), &mut out);
        self.push(
            vec![geom.batch, geom.c_in, geom.h, geom.w],
            out,
            Op::ConvTranspose2d { x, w, geom },
        )
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.data(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        self.push(shape, out, Op::Softmax(a, axis))
    }

    /// `(x - mean) / sqrt(var + eps)` along `axis`, without affine terms.
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("layer_norm", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.data(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mean = (0..len).map(|j| x[at(j)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|j| (x[at(j)] - mean).powi(2)).sum::<f64>() / len as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..len {
                    out[at(j)] = (x[at(j)] - mean) * inv;
                }
            }
        }
        self.push(shape, out, Op::LayerNorm(a, axis, eps))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                out.extend_from_slice(&self.data(p)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(shape, out, Op::Concat(parts.to_vec(), axis))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        self.push(s, out, Op::Slice { x, axis, start })
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} for {shape:?}")));
        }
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for_each_permuted(&shape, perm, |o, i| out[o] = src[i]);
        let new_shape = perm.iter().map(|&p| shape[p]).collect();
        self.push(new_shape, out, Op::Permute(x, perm.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.data(x).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let data = self.data(x).to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(x))
    }

    /// Repeats size-1 axes of `x` to match `shape` (equal rank required).
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(x).to_vec();
        if from.len() != shape.len() || from.iter().zip(shape).any(|(a, b)| *a != *b && *a != 1) {
            return Err(Error::shape("broadcast", format!("{from:?} -> {shape:?}")));
        }
        let src = self.data(x);
        let out_strides = kernels::strides(shape);
        let in_strides = kernels::strides(&from);
        let total: usize = shape.iter().product();
        let out = (0..total)
            .map(|i| {
                let mut src_i = 0;
                for d in 0..shape.len() {
                    let idx = (i / out_strides[d]) % shape[d];
                    if from[d] != 1 {
                        src_i += idx * in_strides[d];
                    }
                }
                src[src_i]
            })
            .collect();
        self.push(shape.to_vec(), out, Op::Broadcast(x))
    }

    /// Adds `bias` (shape `[C]`) along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = self.shape(bias).iter().product::<usize>();
        if axis >= shape.len() || shape[axis] != c {
            return Err(Error::shape("add_bias", format!("bias of {c} on axis {axis} of {shape:?}")));
        }
        let mut view = vec![1; shape.len()];
        view[axis] = c;
        let b = self.reshape(bias, &view)?;
        let b = self.broadcast(b, &shape)?;
        self.add(x, b)
    }

    /// Multiplies `x` by `scale` (shape `[C]`) along `axis`.
    pub fn mul_channel(&mut self, x: Var, scale: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = self.shape(scale).iter().product::<usize>();
        if axis >= shape.len() || shape[axis] != c {
            return Err(Error::shape("mul_channel", format!("scale of {c} on axis {axis} of {shape:?}")));
        }
        let mut view = vec![1; shape.len()];
        view[axis] = c;
        let s = self.reshape(scale, &view)?;
        let s = self.broadcast(s, &shape)?;
        self.mul(x, s)
    }

    /// STFT of each row of `x: [B, N]`, giving `[B, 2, F, T]` (real, imaginary).
    pub fn stft(&mut self, x: Var, kernel: &Arc<StftKernel>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[1] < kernel.window_len() {
            return Err(Error::shape(
                "stft",
                format!("{shape:?}: expected [batch, >= {} samples]", kernel.window_len()),
            ));
        }
        let (b, n) = (shape[0], shape[1]);
        let (bins, frames) = (kernel.n_bins(), kernel.n_frames(n));
        let plane = bins * frames;
        let mut out = vec![0.0; b * 2 * plane];
        for i in 0..b {
            let (re, im) = out[i * 2 * plane..(i + 1) * 2 * plane].split_at_mut(plane);
            kernel.analyze(&self.data(x)[i * n..(i + 1) * n], re, im);
        }
        self.push(
            vec![b, 2, bins, frames],
            out,
            Op::Stft {
                x,
                kernel: Arc::clone(kernel),
            },
        )
    }

    /// Weighted overlap-add inverse of `[B, 2, F, T]`, giving `[B, covered_len(T)]`.
    pub fn istft(&mut self, x: Var, kernel: &Arc<StftKernel>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 2 || shape[2] != kernel.n_bins() || shape[3] == 0 {
            return Err(Error::shape(
                "istft",
                format!("{shape:?}: expected [batch, 2, {}, frames]", kernel.n_bins()),
            ));
        }
        let (b, frames) = (shape[0], shape[3]);
        let plane = shape[2] * frames;
        let len = kernel.config().covered_len(frames);
        let mut out = vec![0.0; b * len];
        for i in 0..b {
            let src = &self.data(x)[i * 2 * plane..(i + 1) * 2 * plane];
            let (re, im) = src.split_at(plane);
            kernel.synthesize(re, im, frames, &mut out[i * len..(i + 1) * len]);
        }
        self.push(
            vec![b, len],
            out,
            Op::Istft {
                x,
                kernel: Arc::clone(kernel),
            },
        )
    }

    /// Sign of every input to a non-smooth primitive (leaky ReLU, smoothed
    /// absolute value). Two evaluations with equal patterns lie on the same
    /// smooth piece of the graph.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::LeakyRelu(a, _) | Op::Abs(a) = node.op {
                out.extend(self.data(a).iter().map(|v| *v > 0.0));
            }
        }
        out
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.value.data;
        // Accumulates into an input's adjoint when that input needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / bv[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)),
            Op::AddScalar(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (av, bv) = (self.data(*a), self.data(*b));
                let (m, k, n) = (*m, *k, *n);
                acc(*a, &mut |s| {
                    for i in 0..*batch {
                        let bs = if *shared_b { 0 } else { i * k * n };
                        kernels::matmul_grad_a(
                            &g[i * m * n..(i + 1) * m * n],
                            &bv[bs..bs + k * n],
                            &mut s[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..*batch {
                        let bs = if *shared_b { 0 } else { i * k * n };
                        kernels::matmul_grad_b(
                            &av[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut s[bs..bs + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Conv2d { x, w, geom } => {
                let (xv, wv) = (self.data(*x), self.data(*w));
                acc(*x, &mut |s| kernels::conv_backward_input(geom, g, wv, s));
                acc(*w, &mut |s| kernels::conv_backward_weight(geom, g, xv, s));
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let (xv, wv) = (self.data(*x), self.data(*w));
                acc(*x, &mut |s| kernels::conv_forward(geom, g, wv, s));
                acc(*w, &mut |s| kernels::conv_backward_weight(geom, xv, g, s));
            }
            Op::Tanh(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::LeakyRelu(a, slope) => {
                let xv = self.data(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += if xv[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                })
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_split(&node.value.shape, *axis);
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dotp: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                s[at(j)] += y[at(j)] * (g[at(j)] - dotp);
                            }
                        }
                    }
                })
            }
            Op::LayerNorm(a, axis, eps) => {
                let xv = self.data(*a);
                let (outer, len, inner) = axis_split(&node.value.shape, *axis);
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let mean = (0..len).map(|j| xv[at(j)]).sum::<f64>() / len as f64;
                            let var =
                                (0..len).map(|j| (xv[at(j)] - mean).powi(2)).sum::<f64>() / len as f64;
                            let inv = 1.0 / (var + eps).sqrt();
                            let gm = (0..len).map(|j| g[at(j)]).sum::<f64>() / len as f64;
                            let gy = (0..len).map(|j| g[at(j)] * y[at(j)]).sum::<f64>() / len as f64;
                            for j in 0..len {
                                s[at(j)] += inv * (g[at(j)] - gm - y[at(j)] * gy);
                            }
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => acc(*a, &mut |s| {
                let c = g[0] / s.len() as f64;
                s.iter_mut().for_each(|s| *s += c)
            }),
            Op::Square(a) => {
                let xv = self.data(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += 2.0 * xv[i] * g[i];
                    }
                })
            }
            Op::Sqrt(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] / (2.0 * y[i]);
                }
            }),
            Op::Abs(a) => {
                let xv = self.data(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * xv[i] / y[i];
                    }
                })
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| s.iter_mut().zip(bv).for_each(|(s, b)| *s += g[0] * b));
                acc(*b, &mut |s| s.iter_mut().zip(av).for_each(|(s, a)| *s += g[0] * a));
            }
            Op::Norm(a) => {
                let xv = self.data(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[0] * xv[i] / y[0];
                    }
                })
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(&node.value.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    acc(p, &mut |s| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for j in 0..len * inner {
                                s[dst + j] += g[src + j];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = axis_split(self.shape(*x), *axis);
                let len = node.value.shape[*axis];
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        for j in 0..len * inner {
                            s[dst + j] += g[o * len * inner + j];
                        }
                    }
                })
            }
            Op::Permute(x, perm) => {
                let in_shape = self.shape(*x);
                acc(*x, &mut |s| for_each_permuted(in_shape, perm, |o, i| s[i] += g[o]))
            }
            Op::Reshape(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Broadcast(x) => {
                let from = self.shape(*x).to_vec();
                let to = &node.value.shape;
                let out_strides = kernels::strides(to);
                let in_strides = kernels::strides(&from);
                acc(*x, &mut |s| {
                    for (i, gv) in g.iter().enumerate() {
                        let mut src_i = 0;
                        for d in 0..to.len() {
                            if from[d] != 1 {
                                src_i += ((i / out_strides[d]) % to[d]) * in_strides[d];
                            }
                        }
                        s[src_i] += gv;
                    }
                })
            }
            Op::Stft { x, kernel } => {
                let shape = &node.value.shape;
                let (b, frames) = (shape[0], shape[3]);
                let plane = shape[2] * frames;
                let n = self.shape(*x)[1];
                acc(*x, &mut |s| {
                    for i in 0..b {
                        let gi = &g[i * 2 * plane..(i + 1) * 2 * plane];
                        let (gr, gim) = gi.split_at(plane);
                        kernel.analyze_adjoint(gr, gim, frames, &mut s[i * n..(i + 1) * n]);
                    }
                })
            }
            Op::Istft { x, kernel } => {
                let shape = self.shape(*x);
                let (b, frames) = (shape[0], shape[3]);
                let plane = shape[2] * frames;
                let len = node.value.shape[1];
                acc(*x, &mut |s| {
                    for i in 0..b {
                        let (sr, si) = s[i * 2 * plane..(i + 1) * 2 * plane].split_at_mut(plane);
                        kernel.synthesize_adjoint(&g[i * len..(i + 1) * len], frames, sr, si);
                    }
                })
            }
        }
    }
}
