use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Marks a scatter row that contributes nothing.
pub const SENTINEL_DROP: usize = usize::MAX;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceMode {
    Sum,
    Avg,
    Max,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sqrt(Var),
    Clamp(Var, T, T),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        shared_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reduce {
        x: Var,
        mode: ReduceMode,
        /// input flat index -> output flat index
        map: Vec<usize>,
        /// per output element, the winning input index (max only)
        argmax: Vec<usize>,
        count: usize,
    },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    ScatterAdd {
        values: Var,
        index: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::Sqrt(..) => "sqrt",
            Op::Clamp(..) => "clamp",
            Op::MatMul { .. } => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reduce { .. } => "reduce",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(..) => "upsample2x",
            Op::ScatterAdd { .. } => "scatter_add",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    tag: Option<String>,
}

/// Recording context for one forward/backward pass.
///
/// Nodes are immutable once pushed. Parameters are inserted once per name
/// and flagged trainable or frozen from the [`ParamStore`].
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (y, dy)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_of(&op).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        let id = self.nodes.len();
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite {
                node: format!("{}#{id}", op.name()),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            tag: None,
        });
        Ok(Var(id))
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::AddScalar(x)
            | Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Gelu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Abs(x)
            | Op::Sqrt(x)
            | Op::Clamp(x, ..)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Softmax(x, _)
            | Op::LogSoftmax(x, _)
            | Op::Upsample2x(x) => vec![*x],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Concat(xs, _) => xs.clone(),
            Op::Slice { x, .. } | Op::Reduce { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::ScatterAdd { values, .. } => vec![*values],
        }
    }

    /// Input tensor or other non-differentiated value.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf node; `requires_grad` leaves receive gradients in [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            tag: None,
        });
        Var(id)
    }

    /// Inserts (once) the named parameter from `store`.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let v = self.leaf(p.tensor.clone(), p.trainable);
        self.nodes[v.0].tag = Some(name.to_string());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter nodes inserted so far, by name.
    pub fn params(&self) -> &HashMap<String, Var> {
        &self.params
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    // ---- elementwise -------------------------------------------------

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(Error::shape(op, "rank", format!("{sa:?} vs {sb:?}")));
        }
        sa.iter()
            .zip(sb)
            .enumerate()
            .map(|(i, (&x, &y))| match (x, y) {
                _ if x == y => Ok(x),
                (1, y) => Ok(y),
                (x, 1) => Ok(x),
                _ => Err(Error::shape(op, format!("axis {i}"), format!("{sa:?} vs {sb:?}"))),
            })
            .collect()
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Vec<usize>)> {
        let out = self.bcast(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = kernels::bcast_strides(ta.shape(), &out);
            let sb = kernels::bcast_strides(tb.shape(), &out);
            let mut d = vec![T::zero(); numel(&out)];
            let (da, db) = (ta.data(), tb.data());
            kernels::for_each_bcast(&out, &sa, &sb, |o, i, j| d[o] = f(da[i], db[j]));
            d
        };
        Ok((Tensor::new(out.clone(), data)?, out))
    }

    /// Broadcasting sum; both operands share rank, extents equal or 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("add", a, b, |x, y| x + y)?;
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(t, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("div", a, b, |x, y| x / y)?;
        self.push(t, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(T::zero()));
        self.push(t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| gelu_parts(v).0);
        self.push(t, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.exp());
        self.push(t, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.ln());
        self.push(t, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.abs());
        self.push(t, Op::Abs(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.sqrt());
        self.push(t, Op::Sqrt(x))
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let t = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(t, Op::Clamp(x, lo, hi))
    }

    // ---- linear algebra ----------------------------------------------

    /// `[.., m, k] x [.., k, n]`; `b` may also be a shared rank-2 matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", "rank", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", "inner dimension", format!("{sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(Error::shape("matmul", "batch dimensions", format!("{sa:?} x {sb:?}")));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), batch, shared_b, m, k, n);
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let t = Tensor::new(shape, data)?;
        self.push(
            t,
            Op::MatMul {
                a,
                b,
                batch,
                shared_b,
                m,
                k,
                n,
            },
        )
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..shape.len()).collect::<Vec<_>>() {
            return Err(Error::shape(
                "permute",
                "axes",
                format!("{axes:?} for rank {}", shape.len()),
            ));
        }
        let (data, out) = kernels::permute(self.value(x).data(), &shape, axes);
        let t = Tensor::new(out, data)?;
        self.push(t, Op::Permute(x, axes.to_vec()))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                "axis",
                format!("{axis} for rank {}", first.len()),
            ));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(Error::shape(
                    "concat",
                    format!("non-concat axis of {s:?}"),
                    format!("expected {first:?} except axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &x in xs {
                let e = self.shape(x)[axis];
                let d = self.value(x).data();
                data.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::Concat(xs.to_vec(), axis))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("axis {axis}"),
                format!("[{start}, {}) of {shape:?}", start + len),
            ));
        }
        let (outer, e, inner) = kernels::axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&d[(o * e + start) * inner..(o * e + start + len) * inner]);
        }
        let mut out = shape;
        out[axis] = len;
        let t = Tensor::new(out, data)?;
        self.push(t, Op::Slice { x, axis, start })
    }

    // ---- reductions --------------------------------------------------

    /// Reduces over `axes`, keeping them with extent 1. Max ties go to the
    /// lowest flat index.
    pub fn reduce(&mut self, x: Var, axes: &[usize], mode: ReduceMode) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axes.is_empty() || axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::shape("reduce", "axes", format!("{axes:?} for {shape:?}")));
        }
        let mut out_shape = shape.clone();
        for &a in axes {
            out_shape[a] = 1;
        }
        let sa = kernels::strides(&shape);
        let so = kernels::bcast_strides(&out_shape, &shape);
        let n_out = numel(&out_shape);
        let mut map = vec![0usize; numel(&shape)];
        kernels::for_each_bcast(&shape, &sa, &so, |_, i, o| map[i] = o);
        let count = numel(&shape) / n_out;
        let src = self.value(x).data();
        let mut argmax = Vec::new();
        let data = match mode {
            ReduceMode::Sum | ReduceMode::Avg => {
                let mut acc = vec![T::zero(); n_out];
                for (i, &o) in map.iter().enumerate() {
                    acc[o] += src[i];
                }
                if mode == ReduceMode::Avg {
                    let c = T::lit(count as f64);
                    acc.iter_mut().for_each(|v| *v /= c);
                }
                acc
            }
            ReduceMode::Max => {
                let mut best = vec![T::neg_infinity(); n_out];
                argmax = vec![usize::MAX; n_out];
                for (i, &o) in map.iter().enumerate() {
                    if argmax[o] == usize::MAX || src[i] > best[o] {
                        best[o] = src[i];
                        argmax[o] = i;
                    }
                }
                best
            }
        };
        let t = Tensor::new(out_shape, data)?;
        self.push(
            t,
            Op::Reduce {
                x,
                mode,
                map,
                argmax,
                count,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.reduce(x, &axes, ReduceMode::Sum)?;
        self.reshape(s, &[1])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.reduce(x, &axes, ReduceMode::Avg)?;
        self.reshape(s, &[1])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.softmax_like(x, axis, false)?;
        self.push(t, Op::Softmax(x, axis))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.softmax_like(x, axis, true)?;
        self.push(t, Op::LogSoftmax(x, axis))
    }

    fn softmax_like(&self, x: Var, axis: usize, log: bool) -> Result<Tensor<T>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", "axis", format!("{axis} for {shape:?}")));
        }
        let (outer, e, inner) = kernels::axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| (o * e + c) * inner + i;
                let m = (0..e).map(|c| src[at(c)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..e).map(|c| (src[at(c)] - m).exp()).sum();
                let lz = z.ln();
                for c in 0..e {
                    out[at(c)] = if log {
                        src[at(c)] - m - lz
                    } else {
                        (src[at(c)] - m).exp() / z
                    };
                }
            }
        }
        Tensor::new(shape, out)
    }

    // ---- normalization -----------------------------------------------

    /// Normalizes over `axis`, then applies per-channel affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("layer_norm", "axis", format!("{axis} for {shape:?}")));
        }
        let (outer, e, inner) = kernels::axis_split(&shape, axis);
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).numel() != e {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} extent"),
                    format!("expected {e}, got {:?}", self.shape(p)),
                ));
            }
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); src.len()];
        let inv_e = T::lit(1.0 / e as f64);
        let eps = T::lit(eps);
        for o in 0..outer {
            let base = o * e * inner;
            let mut mean = vec![T::zero(); inner];
            for c in 0..e {
                for (m, &v) in mean.iter_mut().zip(&src[base + c * inner..base + (c + 1) * inner]) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_e);
            let mut var = vec![T::zero(); inner];
            for c in 0..e {
                let row = &src[base + c * inner..base + (c + 1) * inner];
                for ((v, &m), &x) in var.iter_mut().zip(&mean).zip(row) {
                    *v += (x - m) * (x - m);
                }
            }
            let rs = &mut rstd[o * inner..(o + 1) * inner];
            for (r, v) in rs.iter_mut().zip(&var) {
                *r = T::one() / (*v * inv_e + eps).sqrt();
            }
            for c in 0..e {
                let off = base + c * inner;
                for i in 0..inner {
                    let xh = (src[off + i] - mean[i]) * rs[i];
                    xhat[off + i] = xh;
                    out[off + i] = g[c] * xh + b[c];
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            },
        )
    }

    // ---- spatial -----------------------------------------------------

    /// NCHW cross-correlation with square odd kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                "input rank",
                format!("expected NCHW, got {xs:?}"),
            ));
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape(
                "conv2d",
                "weight shape",
                format!("expected [Cout, Cin/g, k, k], got {ws:?}"),
            ));
        }
        let k = ws[2];
        if k % 2 == 0 {
            return Err(Error::shape("conv2d", "kernel size", format!("{k} is even")));
        }
        if groups == 0 || xs[1] % groups != 0 || ws[0] % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                "channels (groups)",
                format!("groups {groups} must divide Cin {} and Cout {}", xs[1], ws[0]),
            ));
        }
        if ws[1] != xs[1] / groups {
            return Err(Error::shape(
                "conv2d",
                "input channels",
                format!(
                    "weight expects {} per group, input has {} in {groups} groups",
                    ws[1], xs[1]
                ),
            ));
        }
        if let Some(b) = b {
            if self.value(b).numel() != ws[0] {
                return Err(Error::shape(
                    "conv2d",
                    "bias extent",
                    format!("expected {}, got {:?}", ws[0], self.shape(b)),
                ));
            }
        }
        if stride == 0 || xs[2] + 2 * padding < k || xs[3] + 2 * padding < k {
            return Err(Error::shape(
                "conv2d",
                "spatial size",
                format!("input {xs:?} too small for k={k}, p={padding}"),
            ));
        }
        let ho = (xs[2] + 2 * padding - k) / stride + 1;
        let wo = (xs[3] + 2 * padding - k) / stride + 1;
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            k,
            stride,
            pad: padding,
            groups,
            ho,
            wo,
        };
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let t = Tensor::new(vec![geom.n, geom.cout, ho, wo], data)?;
        self.push(t, Op::Conv2d { x, w, b, geom })
    }

    /// Bilinear 2x upsampling of the last two axes (half-pixel centers).
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("upsample2x", "rank", format!("{s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = numel(&s) / (h * w);
        let data = kernels::upsample2x_forward(self.value(x).data(), planes, h, w);
        let mut out = s.clone();
        let r = out.len();
        out[r - 2] = 2 * h;
        out[r - 1] = 2 * w;
        let t = Tensor::new(out, data)?;
        self.push(t, Op::Upsample2x(x))
    }

    /// Sums rows of `values` (`[N, C]`) into cells of a `C x h x w` grid.
    pub fn scatter_add(&mut self, values: Var, index: &[usize], h: usize, w: usize) -> Result<Var> {
        let s = self.shape(values).to_vec();
        if s.len() != 2 || s[0] != index.len() {
            return Err(Error::shape(
                "scatter_add",
                "rows",
                format!("values {s:?} vs {} indices", index.len()),
            ));
        }
        let cells = h * w;
        if let Some(&bad) = index.iter().find(|&&i| i != SENTINEL_DROP && i >= cells) {
            return Err(Error::IndexOutOfRange {
                op: "scatter_add",
                index: bad,
                limit: cells,
            });
        }
        let c = s[1];
        let v = self.value(values).data();
        let mut out = vec![T::zero(); c * cells];
        for (row, &cell) in index.iter().enumerate() {
            if cell == SENTINEL_DROP {
                continue;
            }
            for ch in 0..c {
                out[ch * cells + cell] += v[row * c + ch];
            }
        }
        let t = Tensor::new(vec![c, h, w], out)?;
        self.push(
            t,
            Op::ScatterAdd {
                values,
                index: index.to_vec(),
            },
        )
    }

    // ---- backward ----------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                "loss",
                format!("expected scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if self.check_finite && g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    node: format!("grad of {}#{id}", node.op.name()),
                });
            }
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.and_then(|g| Tensor::new(n.value.shape().to_vec(), g).ok()))
            .collect();
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
            slot => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    /// Accumulates the gradient of a broadcast binary op into each operand.
    fn bcast_backward(
        &self,
        grads: &mut [Option<Vec<T>>],
        out_shape: &[usize],
        g: &[T],
        a: Var,
        b: Var,
        da: impl Fn(T, T, T) -> T,
        db: impl Fn(T, T, T) -> T,
    ) {
        let (ta, tb) = (self.value(a), self.value(b));
        let sa = kernels::bcast_strides(ta.shape(), out_shape);
        let sb = kernels::bcast_strides(tb.shape(), out_shape);
        let (xa, xb) = (ta.data(), tb.data());
        if self.nodes[a.0].requires_grad {
            self.acc_with(grads, a, |ga| {
                kernels::for_each_bcast(out_shape, &sa, &sb, |o, i, j| ga[i] += da(g[o], xa[i], xb[j]));
            });
        }
        if self.nodes[b.0].requires_grad {
            self.acc_with(grads, b, |gb| {
                kernels::for_each_bcast(out_shape, &sa, &sb, |o, i, j| gb[j] += db(g[o], xa[i], xb[j]));
            });
        }
    }

    fn unary_backward(&self, grads: &mut [Option<Vec<T>>], x: Var, g: &[T], f: impl Fn(T, T, T) -> T, y: &[T]) {
        let xv = self.value(x).data();
        let gx = g.iter().zip(xv).zip(y).map(|((&g, &x), &y)| f(g, x, y)).collect();
        self.acc(grads, x, gx);
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => self.bcast_backward(grads, out_shape, g, *a, *b, |g, _, _| g, |g, _, _| g),
            Op::Sub(a, b) => self.bcast_backward(grads, out_shape, g, *a, *b, |g, _, _| g, |g, _, _| -g),
            Op::Mul(a, b) => self.bcast_backward(grads, out_shape, g, *a, *b, |g, _, y| g * y, |g, x, _| g * x),
            Op::Div(a, b) => {
                self.bcast_backward(grads, out_shape, g, *a, *b, |g, _, y| g / y, |g, x, y| -g * x / (y * y))
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, g.to_vec()),
            Op::Scale(x, c) => self.acc(grads, *x, g.iter().map(|&v| v * *c).collect()),
            Op::Relu(x) => self.unary_backward(grads, *x, g, |g, x, _| if x > T::zero() { g } else { T::zero() }, y),
            Op::Sigmoid(x) => self.unary_backward(grads, *x, g, |g, _, y| g * y * (T::one() - y), y),
            Op::Gelu(x) => self.unary_backward(grads, *x, g, |g, x, _| g * gelu_parts(x).1, y),
            Op::Exp(x) => self.unary_backward(grads, *x, g, |g, _, y| g * y, y),
            Op::Log(x) => self.unary_backward(grads, *x, g, |g, x, _| g / x, y),
            Op::Abs(x) => self.unary_backward(grads, *x, g, |g, x, _| g * x.signum_or_zero(), y),
            Op::Sqrt(x) => self.unary_backward(grads, *x, g, |g, _, y| g / (T::lit(2.0) * y), y),
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.unary_backward(grads, *x, g, |g, x, _| if x > lo && x < hi { g } else { T::zero() }, y)
            }
            Op::MatMul {
                a,
                b,
                batch,
                shared_b,
                m,
                k,
                n,
            } => {
                let (ga, gb) = kernels::matmul_backward(
                    self.value(*a).data(),
                    self.value(*b).data(),
                    g,
                    *batch,
                    *shared_b,
                    *m,
                    *k,
                    *n,
                    self.nodes[a.0].requires_grad,
                    self.nodes[b.0].requires_grad,
                );
                if let Some(ga) = ga {
                    self.acc(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    self.acc(grads, *b, gb);
                }
            }
            Op::Permute(x, axes) => {
                let inv = kernels::inverse_axes(axes);
                let (gx, _) = kernels::permute(g, out_shape, &inv);
                self.acc(grads, *x, gx);
            }
            Op::Concat(xs, axis) => {
                let (outer, e_out, inner) = kernels::axis_split(out_shape, *axis);
                let mut off = 0;
                for &x in xs {
                    let e = self.shape(x)[*axis];
                    if self.nodes[x.0].requires_grad {
                        let mut gx = Vec::with_capacity(outer * e * inner);
                        for o in 0..outer {
                            let s = (o * e_out + off) * inner;
                            gx.extend_from_slice(&g[s..s + e * inner]);
                        }
                        self.acc(grads, x, gx);
                    }
                    off += e;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x);
                let (outer, e_in, inner) = kernels::axis_split(in_shape, *axis);
                let len = out_shape[*axis];
                let start = *start;
                self.acc_with(grads, *x, |gx| {
                    for o in 0..outer {
                        let d = (o * e_in + start) * inner;
                        let s = o * len * inner;
                        for (t, &v) in gx[d..d + len * inner].iter_mut().zip(&g[s..s + len * inner]) {
                            *t += v;
                        }
                    }
                });
            }
            Op::Reduce {
                x,
                mode,
                map,
                argmax,
                count,
            } => {
                let scale = match mode {
                    ReduceMode::Avg => T::one() / T::lit(*count as f64),
                    _ => T::one(),
                };
                self.acc_with(grads, *x, |gx| match mode {
                    ReduceMode::Sum | ReduceMode::Avg => {
                        for (i, &o) in map.iter().enumerate() {
                            gx[i] += g[o] * scale;
                        }
                    }
                    ReduceMode::Max => {
                        for (o, &i) in argmax.iter().enumerate() {
                            gx[i] += g[o];
                        }
                    }
                });
            }
            Op::Softmax(x, axis) | Op::LogSoftmax(x, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, e, inner) = kernels::axis_split(out_shape, *axis);
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |c: usize| (o * e + c) * inner + i;
                        if log {
                            let gs: T = (0..e).map(|c| g[at(c)]).sum();
                            for c in 0..e {
                                gx[at(c)] = g[at(c)] - y[at(c)].exp() * gs;
                            }
                        } else {
                            let dot: T = (0..e).map(|c| g[at(c)] * y[at(c)]).sum();
                            for c in 0..e {
                                gx[at(c)] = y[at(c)] * (g[at(c)] - dot);
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            } => {
                let (outer, e, inner) = kernels::axis_split(out_shape, *axis);
                let gam = self.value(*gamma).data();
                if self.nodes[gamma.0].requires_grad || self.nodes[beta.0].requires_grad {
                    let mut gg = vec![T::zero(); e];
                    let mut gb = vec![T::zero(); e];
                    for o in 0..outer {
                        for c in 0..e {
                            let off = (o * e + c) * inner;
                            for i in 0..inner {
                                gg[c] += g[off + i] * xhat[off + i];
                                gb[c] += g[off + i];
                            }
                        }
                    }
                    self.acc(grads, *gamma, gg);
                    self.acc(grads, *beta, gb);
                }
                if self.nodes[x.0].requires_grad {
                    let inv_e = T::lit(1.0 / e as f64);
                    let mut gx = vec![T::zero(); g.len()];
                    for o in 0..outer {
                        let mut m1 = vec![T::zero(); inner];
                        let mut m2 = vec![T::zero(); inner];
                        for c in 0..e {
                            let off = (o * e + c) * inner;
                            for i in 0..inner {
                                let dxh = g[off + i] * gam[c];
                                m1[i] += dxh;
                                m2[i] += dxh * xhat[off + i];
                            }
                        }
                        for c in 0..e {
                            let off = (o * e + c) * inner;
                            for i in 0..inner {
                                let dxh = g[off + i] * gam[c];
                                gx[off + i] =
                                    rstd[o * inner + i] * (dxh - m1[i] * inv_e - xhat[off + i] * m2[i] * inv_e);
                            }
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                    self.nodes[x.0].requires_grad,
                    self.nodes[w.0].requires_grad,
                    b.is_some_and(|b| self.nodes[b.0].requires_grad),
                );
                if let Some(gx) = gx {
                    self.acc(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.acc(grads, *w, gw);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.acc(grads, *b, gb);
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = numel(s) / (h * w);
                self.acc(grads, *x, kernels::upsample2x_backward(g, planes, h, w));
            }
            Op::ScatterAdd { values, index } => {
                let c = self.shape(*values)[1];
                let cells = out_shape[1] * out_shape[2];
                let mut gv = vec![T::zero(); index.len() * c];
                for (row, &cell) in index.iter().enumerate() {
                    if cell == SENTINEL_DROP {
                        continue;
                    }
                    for ch in 0..c {
                        gv[row * c + ch] = g[ch * cells + cell];
                    }
                }
                self.acc(grads, *values, gv);
            }
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> Self;
}

impl<T: Scalar> SignumOrZero for T {
    fn signum_or_zero(self) -> Self {
        if self > T::zero() {
            T::one()
        } else if self < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Gradients from one backward sweep, indexed by node.
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every trainable parameter inserted in `graph`, by name.
    pub fn by_param(&self, graph: &Graph<T>) -> HashMap<String, Tensor<T>> {
        graph
            .params
            .iter()
            .filter_map(|(name, &v)| self.of(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// Node tag (parameter name) if any; used in diagnostics.
impl<T: Scalar> Graph<T> {
    pub fn tag(&self, v: Var) -> Option<&str> {
        self.nodes[v.0].tag.as_deref()
    }
}
