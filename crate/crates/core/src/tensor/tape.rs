use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{bilinear_taps, col2im, gemm, im2col, ConvGeom, MatRef};
use super::params::{Gradients, ParamId, ParamStore};
use super::sparse::CsrMatrix;
use super::{strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a custom op: `(input, output, grad_output) -> grad_input`.
pub type BackwardFn = Arc<dyn Fn(&Tensor, &Tensor, &[f64]) -> Vec<f64> + Send + Sync>;
/// Forward map of a custom op.
pub type ForwardFn = dyn Fn(&Tensor) -> Tensor;

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Square,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Constant,
    Input,
    Param,
    Unary(Var, Unary),
    Binary(Var, Var, Binary),
    Sum(Var),
    SumAxis { x: Var, outer: usize, len: usize, inner: usize },
    MinAxis { x: Var, argmin: Vec<usize> },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Reshape(Var),
    Permute { x: Var, map: Vec<usize> },
    Broadcast { x: Var, map: Vec<usize> },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize, total: usize },
    IndexSelect { x: Var, indices: Arc<Vec<usize>>, outer: usize, src_len: usize, inner: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom, batch: usize, filters: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var, factor: usize },
    Bilinear { x: Var, planes: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize },
    SpMM { mat: Arc<CsrMatrix>, x: Var, batch: usize, width: usize },
    Custom { x: Var, backward: BackwardFn },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation record.
///
/// Every forward pass builds a fresh tape; a tape is confined to one worker.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
}

/// Gradients of a scalar root with respect to every leaf on the tape.
pub struct VarGrads {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl VarGrads {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Collects parameter gradients into a store-shaped set.
    pub fn into_param_grads(mut self, store: &ParamStore) -> Gradients {
        let mut out = vec![None; store.len()];
        for (id, v) in self.params.iter().copied() {
            out[id.index()] = self.grads[v.0].take();
        }
        Gradients { grads: out }
    }
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape<'static> {
    pub fn new() -> Self {
        Tape {
            params: None,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
        }
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'p> Tape<'p> {
    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Non-differentiable value.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Differentiable input leaf (gradient collected by [`Tape::backward`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Pulls a parameter onto the tape; repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("tape built without a parameter store");
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    // ---- elementwise -------------------------------------------------

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(f64, Unary) -> f64 = |v, k| match k {
            Unary::Neg => -v,
            Unary::Scale(s) => v * s,
            Unary::AddScalar(s) => v + s,
            Unary::Relu => v.max(0.0),
            Unary::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Unary::Exp => v.exp(),
            Unary::Ln => v.ln(),
            Unary::Sqrt => v.sqrt(),
            Unary::Abs => v.abs(),
            Unary::Square => v * v,
        };
        let out = self.value(x).map(|v| f(v, kind));
        let ng = self.ng(x);
        self.push(out, Op::Unary(x, kind), ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }
    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Unary::Scale(s))
    }
    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Unary::AddScalar(s))
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }
    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary, name: &'static str) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                name,
                format!("{} vs {}", shape_str(va.shape()), shape_str(vb.shape())),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            })
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Binary(a, b, kind), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div, "div")
    }

    /// Applies `f` and registers a caller-supplied vector-Jacobian product.
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: &ForwardFn,
        backward: BackwardFn,
    ) -> Result<Var> {
        let out = forward(self.value(x));
        if out.shape() != self.shape(x) {
            return Err(Error::shape("custom_unary", "output must match input shape"));
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Custom { x, backward }, ng))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(
                op,
                format!("axis {axis} out of range for {}", shape_str(self.shape(x))),
            ));
        }
        Ok(())
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "sum_axis")?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let t = Tensor::new(oshape, out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::SumAxis { x, outer, len, inner }, ng))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1).max(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Minimum over `axis` (removed); the gradient flows to the first arg-min.
    pub fn min_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "min_axis")?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 {
            return Err(Error::shape("min_axis", "empty reduction axis"));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmin = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for l in 1..len {
                    let idx = (o * len + l) * inner + i;
                    if src[idx] < src[best] {
                        best = idx;
                    }
                }
                out[o * inner + i] = src[best];
                argmin[o * inner + i] = best;
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let t = Tensor::new(oshape, out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::MinAxis { x, argmin }, ng))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Softmax { x, outer, len, inner }, ng))
    }

    // ---- linear algebra ----------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("{} x {}", shape_str(&sa), shape_str(&sb)),
            ));
        }
        self.matmul_impl(a, b, 1, sa[0], sa[1], sb[1], vec![sa[0], sb[1]])
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape(
                "bmm",
                format!("{} x {}", shape_str(&sa), shape_str(&sb)),
            ));
        }
        self.matmul_impl(a, b, sa[0], sa[1], sa[2], sb[2], vec![sa[0], sa[1], sb[2]])
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_impl(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        oshape: Vec<usize>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                MatRef::row_major(&va[bi * m * k..(bi + 1) * m * k], k),
                MatRef::row_major(&vb[bi * k * n..(bi + 1) * k * n], n),
                0.0,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let t = Tensor::new(oshape, out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMul { a, b, batch, m, k, n }, ng))
    }

    /// Sparse-dense product over the second-to-last axis:
    /// `[.., cols, C] -> [.., rows, C]`.
    pub fn spmm(&mut self, mat: &Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[shape.len() - 2] != mat.cols() {
            return Err(Error::shape(
                "spmm",
                format!("{}x{} by {}", mat.rows(), mat.cols(), shape_str(&shape)),
            ));
        }
        let width = shape[shape.len() - 1];
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; batch * mat.rows() * width];
        for b in 0..batch {
            mat.matmul_dense_into(
                &src[b * mat.cols() * width..(b + 1) * mat.cols() * width],
                width,
                &mut out[b * mat.rows() * width..(b + 1) * mat.rows() * width],
            );
        }
        let mut oshape = shape;
        let r = oshape.len() - 2;
        oshape[r] = mat.rows();
        let t = Tensor::new(oshape, out)?;
        let ng = self.ng(x);
        Ok(self.push(
            t,
            Op::SpMM {
                mat: Arc::clone(mat),
                x,
                batch,
                width,
            },
            ng,
        ))
    }

    // ---- shape manipulation ------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.nodes[x.0].value).clone().reshape(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of {}", shape_str(&shape)),
            ));
        }
        let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let istr = strides(&shape);
        let pstr: Vec<usize> = perm.iter().map(|&p| istr[p]).collect();
        let map = gather_map(&oshape, &pstr);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(oshape, data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Permute { x, map }, ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", "needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    /// Numpy-style broadcast (right-aligned, size-1 axes stretch).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ishape = self.shape(x).to_vec();
        if ishape == shape {
            return Ok(x);
        }
        if ishape.len() > shape.len() {
            return Err(Error::shape(
                "broadcast_to",
                format!("{} -> {}", shape_str(&ishape), shape_str(shape)),
            ));
        }
        let lead = shape.len() - ishape.len();
        let istr = strides(&ishape);
        let mut bstr = vec![0; shape.len()];
        for (i, &n) in ishape.iter().enumerate() {
            if n == shape[lead + i] {
                bstr[lead + i] = istr[i];
            } else if n != 1 {
                return Err(Error::shape(
                    "broadcast_to",
                    format!("{} -> {}", shape_str(&ishape), shape_str(shape)),
                ));
            }
        }
        let map = gather_map(shape, &bstr);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Broadcast { x, map }, ng))
    }

    /// Broadcasts `b` to `a`'s shape, then adds.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast_to(b, &shape)?;
        self.add(a, bb)
    }

    /// Broadcasts `b` to `a`'s shape, then multiplies.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast_to(b, &shape)?;
        self.mul(a, bb)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        self.check_axis(*first, axis, "concat")?;
        let base = self.shape(*first).to_vec();
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{} vs {} on axis {axis}", shape_str(s), shape_str(&base)),
                ));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for (&p, &len) in parts.iter().zip(&lens) {
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let mut oshape = base;
        oshape[axis] = total;
        let t = Tensor::new(oshape, out)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        let parts = parts.iter().copied().zip(lens).collect();
        Ok(self.push(t, Op::Concat { parts, outer, inner, total }, ng))
    }

    /// Gathers entries along `axis`; indices may repeat.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &Arc<Vec<usize>>) -> Result<Var> {
        self.check_axis(x, axis, "index_select")?;
        let shape = self.shape(x).to_vec();
        let (outer, src_len, inner) = split_axis(&shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= src_len) {
            return Err(Error::shape(
                "index_select",
                format!("index {bad} out of range {src_len}"),
            ));
        }
        let src = self.value(x).data();
        let n = indices.len();
        let mut out = vec![0.0; outer * n * inner];
        for o in 0..outer {
            for (j, &i) in indices.iter().enumerate() {
                let s = (o * src_len + i) * inner;
                let d = (o * n + j) * inner;
                out[d..d + inner].copy_from_slice(&src[s..s + inner]);
            }
        }
        let mut oshape = shape;
        oshape[axis] = n;
        let t = Tensor::new(oshape, out)?;
        let ng = self.ng(x);
        Ok(self.push(
            t,
            Op::IndexSelect {
                x,
                indices: Arc::clone(indices),
                outer,
                src_len,
                inner,
            },
            ng,
        ))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let idx = Arc::new((start..start + len).collect::<Vec<_>>());
        self.index_select(x, axis, &idx)
    }

    // ---- image ops ---------------------------------------------------

    /// 2D cross-correlation of `[B, C, H, W]` with `[F, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_padded(x, w, stride, pad, pad)
    }

    pub fn conv2d_padded(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad_h: usize,
        pad_w: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {} with kernel {}", shape_str(&sx), shape_str(&sw)),
            ));
        }
        let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > h + 2 * pad_h || kw > wd + 2 * pad_w {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let (span_h, span_w) = (h + 2 * pad_h - kh, wd + 2 * pad_w - kw);
        if span_h % stride != 0 || span_w % stride != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("stride {stride} does not tile input {h}x{wd} with kernel {kh}x{kw}"),
            ));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            out_h: span_h / stride + 1,
            out_w: span_w / stride + 1,
        };
        let (rows, ncol) = (geom.col_rows(), geom.col_cols());
        let (vx, vw) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; b * f * ncol];
        let mut cols = vec![0.0; rows * ncol];
        let img = c * h * wd;
        for bi in 0..b {
            im2col(&vx[bi * img..(bi + 1) * img], &geom, &mut cols);
            gemm(
                f,
                rows,
                ncol,
                MatRef::row_major(vw, rows),
                MatRef::row_major(&cols, ncol),
                0.0,
                &mut out[bi * f * ncol..(bi + 1) * f * ncol],
            );
        }
        let t = Tensor::new(vec![b, f, geom.out_h, geom.out_w], out)?;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(t, Op::Conv2d { x, w, geom, batch: b, filters: f }, ng))
    }

    /// Non-overlapping max pooling with a square window.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(Error::shape(
                "max_pool2d",
                format!("window {k} on {}", shape_str(&s)),
            ));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = vec![0.0; planes * oh * ow];
        let mut argmax = vec![0; planes * oh * ow];
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = p * h * w + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = p * h * w + (oy * k + dy) * w + ox * k + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    out[o] = src[best];
                    argmax[o] = best;
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::MaxPool { x, argmax }, ng))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::shape("upsample_nearest", shape_str(&s)));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(p * oh + y) * ow + xx] = src[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Upsample { x, factor }, ng))
    }

    /// Bilinear resampling of `[B, C, H, W]` with half-pixel (align-corners-false) centres.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::shape(
                "bilinear_resize",
                format!("{} -> {out_h}x{out_w}", shape_str(&s)),
            ));
        }
        let (planes, in_h, in_w) = (s[0] * s[1], s[2], s[3]);
        let (ty, tx) = (bilinear_taps(in_h, out_h), bilinear_taps(in_w, out_w));
        let src = self.value(x).data();
        let mut out = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let plane = &src[p * in_h * in_w..(p + 1) * in_h * in_w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = plane[y0 * in_w + x0] * (1.0 - fx) + plane[y0 * in_w + x1] * fx;
                    let bot = plane[y1 * in_w + x0] * (1.0 - fx) + plane[y1 * in_w + x1] * fx;
                    out[(p * out_h + oy) * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], out_h, out_w], out)?;
        let ng = self.ng(x);
        Ok(self.push(
            t,
            Op::Bilinear {
                x,
                planes,
                in_h,
                in_w,
                out_h,
                out_w,
            },
            ng,
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: Var) -> Result<VarGrads> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {}", shape_str(self.shape(root))),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Input | Op::Param => grads[i] = Some(g),
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        let params = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(VarGrads { grads, params })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Constant | Op::Input | Op::Param => unreachable!(),
            Op::Unary(x, kind) => {
                let xv = self.value(*x).data();
                let y = out.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..dx.len() {
                        let d = match *kind {
                            Unary::Neg => -1.0,
                            Unary::Scale(s) => s,
                            Unary::AddScalar(_) => 1.0,
                            Unary::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::Exp => y[i],
                            Unary::Ln => 1.0 / xv[i],
                            Unary::Sqrt => {
                                if y[i] > 0.0 {
                                    0.5 / y[i]
                                } else {
                                    0.0
                                }
                            }
                            Unary::Abs => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else if xv[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Square => 2.0 * xv[i],
                        };
                        dx[i] += d * g[i];
                    }
                }
            }
            Op::Binary(a, b, kind) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..da.len() {
                        da[i] += match kind {
                            Binary::Add | Binary::Sub => g[i],
                            Binary::Mul => g[i] * bv[i],
                            Binary::Div => g[i] / bv[i],
                        };
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for i in 0..db.len() {
                        db[i] += match kind {
                            Binary::Add => g[i],
                            Binary::Sub => -g[i],
                            Binary::Mul => g[i] * av[i],
                            Binary::Div => -g[i] * av[i] / (bv[i] * bv[i]),
                        };
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::SumAxis { x, outer, len, inner } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        for l in 0..*len {
                            for i in 0..*inner {
                                dx[(o * len + l) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::MinAxis { x, argmin } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (j, &src) in argmin.iter().enumerate() {
                        dx[src] += g[j];
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = out.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..*len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..*len {
                                dx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for bi in 0..*batch {
                        gemm(
                            m,
                            n,
                            k,
                            MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], n),
                            MatRef::transposed(&bv[bi * k * n..(bi + 1) * k * n], n),
                            1.0,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for bi in 0..*batch {
                        gemm(
                            k,
                            m,
                            n,
                            MatRef::transposed(&av[bi * m * k..(bi + 1) * m * k], k),
                            MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], n),
                            1.0,
                            &mut db[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                }
            }
            Op::SpMM { mat, x, batch, width } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let (rows, cols, w) = (mat.rows(), mat.cols(), *width);
                    for b in 0..*batch {
                        let gb = &g[b * rows * w..(b + 1) * rows * w];
                        let db = &mut dx[b * cols * w..(b + 1) * cols * w];
                        for r in 0..rows {
                            for (c, v) in mat.row(r) {
                                for j in 0..w {
                                    db[c * w + j] += v * gb[r * w + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Permute { x, map } | Op::Broadcast { x, map } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (j, &src) in map.iter().enumerate() {
                        dx[src] += g[j];
                    }
                }
            }
            Op::Concat { parts, outer, inner, total } => {
                let mut offset = 0;
                for &(p, len) in parts {
                    if let Some(dp) = self.slot(grads, p) {
                        for o in 0..*outer {
                            let s = (o * total + offset) * inner;
                            let d = o * len * inner;
                            for i in 0..len * inner {
                                dp[d + i] += g[s + i];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::IndexSelect { x, indices, outer, src_len, inner } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let n = indices.len();
                    for o in 0..*outer {
                        for (j, &i) in indices.iter().enumerate() {
                            let s = (o * n + j) * inner;
                            let d = (o * src_len + i) * inner;
                            for t in 0..*inner {
                                dx[d + t] += g[s + t];
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, geom, batch, filters } => {
                let (rows, ncol, f) = (geom.col_rows(), geom.col_cols(), *filters);
                let img = geom.channels * geom.height * geom.width;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut cols = vec![0.0; rows * ncol];
                if let Some(dw) = self.slot(grads, *w) {
                    for bi in 0..*batch {
                        im2col(&xv[bi * img..(bi + 1) * img], geom, &mut cols);
                        gemm(
                            f,
                            ncol,
                            rows,
                            MatRef::row_major(&g[bi * f * ncol..(bi + 1) * f * ncol], ncol),
                            MatRef::transposed(&cols, ncol),
                            1.0,
                            dw,
                        );
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    for bi in 0..*batch {
                        gemm(
                            rows,
                            f,
                            ncol,
                            MatRef::transposed(wv, rows),
                            MatRef::row_major(&g[bi * f * ncol..(bi + 1) * f * ncol], ncol),
                            0.0,
                            &mut cols,
                        );
                        col2im(&cols, geom, &mut dx[bi * img..(bi + 1) * img]);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (j, &src) in argmax.iter().enumerate() {
                        dx[src] += g[j];
                    }
                }
            }
            Op::Upsample { x, factor } => {
                let s = self.shape(*x);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h * factor, w * factor);
                if let Some(dx) = self.slot(grads, *x) {
                    for p in 0..planes {
                        for y in 0..oh {
                            for xx in 0..ow {
                                dx[(p * h + y / factor) * w + xx / factor] += g[(p * oh + y) * ow + xx];
                            }
                        }
                    }
                }
            }
            Op::Bilinear { x, planes, in_h, in_w, out_h, out_w } => {
                let (ty, tx) = (bilinear_taps(*in_h, *out_h), bilinear_taps(*in_w, *out_w));
                if let Some(dx) = self.slot(grads, *x) {
                    for p in 0..*planes {
                        let plane = &mut dx[p * in_h * in_w..(p + 1) * in_h * in_w];
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let go = g[(p * out_h + oy) * out_w + ox];
                                plane[y0 * in_w + x0] += go * (1.0 - fy) * (1.0 - fx);
                                plane[y0 * in_w + x1] += go * (1.0 - fy) * fx;
                                plane[y1 * in_w + x0] += go * fy * (1.0 - fx);
                                plane[y1 * in_w + x1] += go * fy * fx;
                            }
                        }
                    }
                }
            }
            Op::Custom { x, backward } => {
                let xv = Arc::clone(&self.nodes[x.0].value);
                if let Some(dx) = self.slot(grads, *x) {
                    let local = backward(&xv, out, g);
                    dx.iter_mut().zip(local).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}

/// For each output flat index, the source flat index given per-axis source strides.
fn gather_map(oshape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let numel: usize = oshape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; oshape.len()];
    let mut src = 0usize;
    for _ in 0..numel {
        map.push(src);
        for ax in (0..oshape.len()).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < oshape[ax] {
                break;
            }
            src -= src_strides[ax] * oshape[ax];
            idx[ax] = 0;
        }
    }
    map
}
