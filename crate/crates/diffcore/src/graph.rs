//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so creation order is a topological
//! order and `backward` walks the tape once from the end.

use std::collections::BTreeMap;

use crate::array::{numel, Array};
use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Silu,
    Gelu,
    Sigmoid,
    Softplus,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary { op: Binary, a: Var, b: Var },
    MatMul { a: Var, b: Var, b_t: bool },
    Affine { a: Var, scale: T },
    Unary { op: Unary, a: Var },
    Clamp { a: Var, lo: T, hi: T },
    Softmax { a: Var },
    LayerNorm { a: Var, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Transpose { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    AvgPool2d { a: Var, k: usize },
    Upsample2d { a: Var, k: usize },
    Mean { a: Var, axis: usize },
    SumAll { a: Var },
    Gather { a: Var, index: Vec<usize> },
    Mse { a: Var, b: Var, weight: Option<Array<T>>, norm: T },
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads<T> {
    by_node: Vec<Option<Array<T>>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of a leaf, `None` when it does not influence the loss or is not tracked.
    pub fn wrt(&self, v: Var) -> Option<&Array<T>> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of trainable parameters, keyed by name.
    pub fn by_name(&self) -> BTreeMap<String, &Array<T>> {
        self.params
            .iter()
            .filter_map(|(k, v)| self.wrt(*v).map(|g| (k.clone(), g)))
            .collect()
    }

    /// Owned gradients keyed by name; trainable parameters of `store` that the
    /// loss does not touch get explicit zeros.
    pub fn into_named(mut self, store: &ParamStore<T>) -> BTreeMap<String, Array<T>> {
        let mut out = BTreeMap::new();
        for (name, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            let g = self
                .params
                .get(name)
                .and_then(|v| self.by_node[v.0].take())
                .unwrap_or_else(|| Array::zeros(p.value.shape()));
            out.insert(name.to_string(), g);
        }
        out
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Array<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Tracked input that is not a named parameter (used by gradient checks).
    pub fn input(&mut self, value: Array<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true, "input")
    }

    /// Leaf for a stored parameter; repeated lookups return the same node so that
    /// gradients from every use are summed. Frozen parameters are untracked.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.param(name).ok_or_else(|| Error::UnknownParam(name.into()))?;
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable, "param")?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Value copy of `v` as a fresh untracked node.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = kernels::broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::Shape { op: "binary", detail: format!("{sa:?} vs {sb:?}") })?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let data = match op {
            Binary::Add => kernels::zip_broadcast(&out, &sa, &sb, xa, xb, |x, y| x + y),
            Binary::Sub => kernels::zip_broadcast(&out, &sa, &sb, xa, xb, |x, y| x - y),
            Binary::Mul => kernels::zip_broadcast(&out, &sa, &sb, xa, xb, |x, y| x * y),
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Array::from_vec(&out, data)?, Op::Binary { op, a, b }, rg, "binary")
    }

    /// Broadcasting element-wise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Broadcasting element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Result<Var> {
        let value = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(a);
        self.push(value, Op::Affine { a, scale }, rg, "affine")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.affine(a, s, T::zero())
    }

    /// Matrix product of `a: [.., m, k]` with `b: [k, n]` (shared across the
    /// leading axes of `a`) or `b: [.., k, n]` (batched, same leading axes).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Like [`matmul`](Self::matmul) with `b` transposed on its last two axes.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mm = MatMulDims::new(&sa, &sb, b_t)?;
        let mut out = vec![T::zero(); mm.batch * mm.m * mm.n];
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        for i in 0..mm.batch {
            let bo = if mm.shared { 0 } else { i * mm.k * mm.n };
            kernels::gemm(
                mm.m,
                mm.k,
                mm.n,
                &xa[i * mm.m * mm.k..(i + 1) * mm.m * mm.k],
                false,
                &xb[bo..bo + mm.k * mm.n],
                b_t,
                &mut out[i * mm.m * mm.n..(i + 1) * mm.m * mm.n],
                false,
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(mm.n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Array::from_vec(&shape, out)?, Op::MatMul { a, b, b_t }, rg, "matmul")
    }

    fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = match op {
            Unary::Silu => x.map(|x| x * sigmoid(x)),
            Unary::Gelu => x.map(gelu),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Softplus => x.map(softplus),
        };
        let rg = self.rg(a);
        self.push(value, Op::Unary { op, a }, rg, "unary")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Silu, a)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Gelu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }

    /// Clamp into `[lo, hi]`; the gradient is passed through inside the range only.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp { a, lo, hi }, rg, "clamp")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some(&d) = shape.last() else {
            return shape_err("softmax", "rank-0 input");
        };
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let rg = self.rg(a);
        self.push(Array::from_vec(&shape, data)?, Op::Softmax { a }, rg, "softmax")
    }

    /// Layer normalization over the last axis without affine parameters.
    /// Rows with zero variance map to exactly zero.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some(&d) = shape.last() else {
            return shape_err("layer_norm", "rank-0 input");
        };
        let x = self.value(a).data();
        let mut data = vec![T::zero(); x.len()];
        let rows = x.len() / d.max(1);
        let mut rstd = Vec::with_capacity(rows);
        let dn = T::of(d as f64);
        for (row, out) in x.chunks(d).zip(data.chunks_mut(d)) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            let constant = row.iter().all(|&v| v == row[0]);
            if !constant {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = (v - mean) * r;
                }
            }
        }
        let rg = self.rg(a);
        self.push(Array::from_vec(&shape, data)?, Op::LayerNorm { a, rstd }, rg, "layer_norm")
    }

    /// 2-D convolution of NHWC `x` with HWIO weights `w`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] || stride == 0 {
            return shape_err("conv2d", format!("x {sx:?}, w {sw:?}, stride {stride}"));
        }
        let (h, wd) = (sx[1] + 2 * pad, sx[2] + 2 * pad);
        if h < sw[0] || wd < sw[1] {
            return shape_err("conv2d", "kernel larger than padded input");
        }
        let geom = ConvGeom {
            batch: sx[0],
            h: sx[1],
            w: sx[2],
            cin: sx[3],
            kh: sw[0],
            kw: sw[1],
            cout: sw[3],
            stride,
            pad,
            ho: (h - sw[0]) / stride + 1,
            wo: (wd - sw[1]) / stride + 1,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut out = vec![T::zero(); geom.rows() * geom.cout];
        kernels::gemm(
            geom.rows(),
            geom.patch_len(),
            geom.cout,
            &cols,
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        let shape = [geom.batch, geom.ho, geom.wo, geom.cout];
        let rg = self.rg(x) || self.rg(w);
        self.push(Array::from_vec(&shape, out)?, Op::Conv2d { x, w, geom }, rg, "conv2d")
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err("transpose", format!("perm {perm:?} for shape {shape:?}"));
        }
        let (out_shape, data) = kernels::transpose(self.value(a).data(), &shape, perm);
        let rg = self.rg(a);
        self.push(Array::from_vec(&out_shape, data)?, Op::Transpose { a, perm: perm.to_vec() }, rg, "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push(value, Op::Reshape { a }, rg, "reshape")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return shape_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} for rank {}", base.len()));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return shape_err("concat", format!("{base:?} vs {s:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(Array::from_vec(&shape, data)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg, "concat")
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut out = shape;
        out[axis] = len;
        let rg = self.rg(a);
        self.push(Array::from_vec(&out, data)?, Op::Slice { a, axis, start }, rg, "slice")
    }

    /// Split along `axis` into pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(a, axis, start, s)?);
            start += s;
        }
        if start != self.shape(a)[axis] {
            return shape_err("split", format!("sizes {sizes:?} do not cover axis {axis}"));
        }
        Ok(out)
    }

    /// Non-overlapping `k x k` mean pooling of NHWC input.
    pub fn avg_pool2d(&mut self, a: Var, k: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || k == 0 || s[1] % k != 0 || s[2] % k != 0 {
            return shape_err("avg_pool2d", format!("{s:?} with k={k}"));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / k, w / k);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); b * ho * wo * c];
        let inv = T::one() / T::of((k * k) as f64);
        for bi in 0..b {
            for y in 0..h {
                for xw in 0..w {
                    let src = ((bi * h + y) * w + xw) * c;
                    let dst = ((bi * ho + y / k) * wo + xw / k) * c;
                    for ch in 0..c {
                        out[dst + ch] = out[dst + ch] + x[src + ch] * inv;
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(Array::from_vec(&[b, ho, wo, c], out)?, Op::AvgPool2d { a, k }, rg, "avg_pool2d")
    }

    /// Nearest-neighbour `k x` upsampling of NHWC input.
    pub fn upsample2d(&mut self, a: Var, k: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || k == 0 {
            return shape_err("upsample2d", format!("{s:?} with k={k}"));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); b * h * k * w * k * c];
        for bi in 0..b {
            for y in 0..h * k {
                for xw in 0..w * k {
                    let src = ((bi * h + y / k) * w + xw / k) * c;
                    let dst = ((bi * h * k + y) * w * k + xw) * c;
                    out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
        let rg = self.rg(a);
        self.push(Array::from_vec(&[b, h * k, w * k, c], out)?, Op::Upsample2d { a, k }, rg, "upsample2d")
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return shape_err("mean_axis", format!("axis {axis} of {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let inv = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + x[src + i];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.rg(a);
        self.push(Array::from_vec(&oshape, out)?, Op::Mean { a, axis }, rg, "mean_axis")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Array::scalar(s), Op::SumAll { a }, rg, "sum_all")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if numel(shape) != index.len() || index.iter().any(|&i| i >= n) {
            return shape_err("gather", format!("{} indices into {n} elements as {shape:?}", index.len()));
        }
        let x = self.value(a).data();
        let data = index.iter().map(|&i| x[i]).collect();
        let rg = self.rg(a);
        self.push(Array::from_vec(shape, data)?, Op::Gather { a, index }, rg, "gather")
    }

    /// Row lookup into a `[vocab, dim]` table; output `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return shape_err("embedding", format!("table shape {s:?}"));
        }
        let (vocab, dim) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return shape_err("embedding", format!("id {bad} >= vocab {vocab}"));
        }
        let index = ids.iter().flat_map(|&i| (i * dim)..(i + 1) * dim).collect();
        self.gather(table, index, &[ids.len(), dim])
    }

    /// Mean squared error, optionally weighted by a constant `weight`
    /// broadcastable to `a`: `sum(w (a-b)^2) / sum(w)`. An all-zero weight gives 0.
    pub fn mse(&mut self, a: Var, b: Var, weight: Option<&Array<T>>) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return shape_err("mse", format!("{sa:?} vs {sb:?}"));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let (weight, sum, norm) = match weight {
            None => {
                let s: T = xa.iter().zip(xb).map(|(&x, &y)| (x - y) * (x - y)).sum();
                (None, s, T::of(xa.len().max(1) as f64))
            }
            Some(w) => {
                if kernels::broadcast_shape(&sa, w.shape()).as_deref() != Some(&sa[..]) {
                    return shape_err("mse", format!("weight {:?} for {sa:?}", w.shape()));
                }
                let wfull = broadcast_to(w, &sa);
                let norm: T = wfull.sum();
                let s: T = xa
                    .iter()
                    .zip(xb)
                    .zip(wfull.data())
                    .map(|((&x, &y), &wv)| wv * (x - y) * (x - y))
                    .sum();
                (Some(wfull), s, norm)
            }
        };
        let (loss, norm) = if norm > T::zero() { (sum / norm, norm) } else { (T::zero(), T::zero()) };
        let rg = self.rg(a) || self.rg(b);
        self.push(Array::scalar(loss), Op::Mse { a, b, weight, norm }, rg, "mse")
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(lv.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (input, gi) in self.vjp(id, &g)? {
                if input.0 >= id {
                    return Err(Error::Cycle(id));
                }
                if !self.rg(input) {
                    continue;
                }
                let gi = gi.ensure_finite("backward")?;
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        // only leaf gradients survive the pass
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        let params = self.params.iter().filter(|(_, v)| self.rg(**v)).map(|(k, v)| (k.clone(), *v)).collect();
        Ok(Grads { by_node: grads, params })
    }

    /// Input gradients of node `id` given its output gradient `g`.
    fn vjp(&self, id: usize, g: &Array<T>) -> Result<Vec<(Var, Array<T>)>> {
        let node = &self.nodes[id];
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { op, a, b } => {
                let (a, b) = (*a, *b);
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let os = y.shape().to_vec();
                let gd = g.data();
                if self.rg(a) {
                    let ga = match op {
                        Binary::Add | Binary::Sub => kernels::reduce_to(&os, &sa, gd),
                        Binary::Mul => {
                            let xb = kernels::zip_broadcast(&os, &os, &sb, gd, self.value(b).data(), |g, y| g * y);
                            kernels::reduce_to(&os, &sa, &xb)
                        }
                    };
                    out.push((a, Array::from_vec(&sa, ga)?));
                }
                if self.rg(b) {
                    let gb = match op {
                        Binary::Add => kernels::reduce_to(&os, &sb, gd),
                        Binary::Sub => {
                            let mut r = kernels::reduce_to(&os, &sb, gd);
                            r.iter_mut().for_each(|v| *v = -*v);
                            r
                        }
                        Binary::Mul => {
                            let xa = kernels::zip_broadcast(&os, &os, &sa, gd, self.value(a).data(), |g, x| g * x);
                            kernels::reduce_to(&os, &sb, &xa)
                        }
                    };
                    out.push((b, Array::from_vec(&sb, gb)?));
                }
            }
            Op::MatMul { a, b, b_t } => {
                let (a, b, b_t) = (*a, *b, *b_t);
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let mm = MatMulDims::new(&sa, &sb, b_t)?;
                let (xa, xb, gd) = (self.value(a).data(), self.value(b).data(), g.data());
                let (m, k, n) = (mm.m, mm.k, mm.n);
                if self.rg(a) {
                    // dA = G @ B^T  (or G @ B when b is stored transposed)
                    let mut ga = vec![T::zero(); xa.len()];
                    for i in 0..mm.batch {
                        let bo = if mm.shared { 0 } else { i * k * n };
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &xb[bo..bo + k * n],
                            !b_t,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    out.push((a, Array::from_vec(&sa, ga)?));
                }
                if self.rg(b) {
                    let mut gb = vec![T::zero(); xb.len()];
                    if mm.shared {
                        let rows = mm.batch * m;
                        if b_t {
                            // dB[n,k] = G^T @ A
                            kernels::gemm(n, rows, k, gd, true, xa, false, &mut gb, false);
                        } else {
                            // dB[k,n] = A^T @ G
                            kernels::gemm(k, rows, n, xa, true, gd, false, &mut gb, false);
                        }
                    } else {
                        for i in 0..mm.batch {
                            let ga_ = &xa[i * m * k..(i + 1) * m * k];
                            let gg = &gd[i * m * n..(i + 1) * m * n];
                            let dst = &mut gb[i * k * n..(i + 1) * k * n];
                            if b_t {
                                kernels::gemm(n, m, k, gg, true, ga_, false, dst, false);
                            } else {
                                kernels::gemm(k, m, n, ga_, true, gg, false, dst, false);
                            }
                        }
                    }
                    out.push((b, Array::from_vec(&sb, gb)?));
                }
            }
            Op::Affine { a, scale } => {
                let s = *scale;
                out.push((*a, g.map(|v| v * s)));
            }
            Op::Unary { op, a } => {
                let x = self.value(*a).data();
                let (gd, yd) = (g.data(), y.data());
                let data: Vec<T> = match op {
                    Unary::Silu => gd
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * s * (T::one() + xv * (T::one() - s))
                        })
                        .collect(),
                    Unary::Gelu => gd.iter().zip(x).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect(),
                    Unary::Sigmoid => gd.iter().zip(yd).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect(),
                    Unary::Softplus => gd.iter().zip(x).map(|(&gv, &xv)| gv * sigmoid(xv)).collect(),
                };
                out.push((*a, Array::from_vec(y.shape(), data)?));
            }
            Op::Clamp { a, lo, hi } => {
                let x = self.value(*a).data();
                let data = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { T::zero() })
                    .collect();
                out.push((*a, Array::from_vec(y.shape(), data)?));
            }
            Op::Softmax { a } => {
                let d = *y.shape().last().unwrap_or(&1);
                let mut data = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.data().chunks(d).zip(g.data().chunks(d)).zip(data.chunks_mut(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dot);
                    }
                }
                out.push((*a, Array::from_vec(y.shape(), data)?));
            }
            Op::LayerNorm { a, rstd } => {
                let d = *y.shape().last().unwrap_or(&1);
                let dn = T::of(d as f64);
                let mut data = vec![T::zero(); y.len()];
                for (((yr, gr), dr), &r) in
                    y.data().chunks(d).zip(g.data().chunks(d)).zip(data.chunks_mut(d)).zip(rstd)
                {
                    let mg = gr.iter().copied().sum::<T>() / dn;
                    let mgy = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum::<T>() / dn;
                    for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = r * (gv - mg - yv * mgy);
                    }
                }
                out.push((*a, Array::from_vec(y.shape(), data)?));
            }
            Op::Conv2d { x, w, geom } => {
                let (x, w, geom) = (*x, *w, *geom);
                let gd = g.data();
                if self.rg(w) {
                    let cols = kernels::im2col(self.value(x).data(), &geom);
                    let mut gw = vec![T::zero(); self.value(w).len()];
                    kernels::gemm(geom.patch_len(), geom.rows(), geom.cout, &cols, true, gd, false, &mut gw, false);
                    out.push((w, Array::from_vec(self.shape(w), gw)?));
                }
                if self.rg(x) {
                    let mut gcols = vec![T::zero(); geom.rows() * geom.patch_len()];
                    kernels::gemm(
                        geom.rows(),
                        geom.cout,
                        geom.patch_len(),
                        gd,
                        false,
                        self.value(w).data(),
                        true,
                        &mut gcols,
                        false,
                    );
                    let mut gx = vec![T::zero(); self.value(x).len()];
                    kernels::col2im(&gcols, &geom, &mut gx);
                    out.push((x, Array::from_vec(self.shape(x), gx)?));
                }
            }
            Op::Transpose { a, perm } => {
                let inv = kernels::inverse_perm(perm);
                let (shape, data) = kernels::transpose(g.data(), g.shape(), &inv);
                out.push((*a, Array::from_vec(&shape, data)?));
            }
            Op::Reshape { a } => {
                out.push((*a, g.clone().reshape(self.shape(*a))?));
            }
            Op::Concat { inputs, axis } => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.rg(v) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[src..src + len * inner]);
                        }
                        out.push((v, Array::from_vec(self.shape(v), data)?));
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let shape = self.shape(*a).to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let len = y.shape()[*axis];
                let mut data = vec![T::zero(); numel(&shape)];
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    data[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*a, Array::from_vec(&shape, data)?));
            }
            Op::AvgPool2d { a, k } => {
                let s = self.shape(*a).to_vec();
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h / k, w / k);
                let inv = T::one() / T::of((k * k) as f64);
                let mut data = vec![T::zero(); numel(&s)];
                for bi in 0..b {
                    for yy in 0..h {
                        for xx in 0..w {
                            let dst = ((bi * h + yy) * w + xx) * c;
                            let src = ((bi * ho + yy / k) * wo + xx / k) * c;
                            for ch in 0..c {
                                data[dst + ch] = g.data()[src + ch] * inv;
                            }
                        }
                    }
                }
                out.push((*a, Array::from_vec(&s, data)?));
            }
            Op::Upsample2d { a, k } => {
                let s = self.shape(*a).to_vec();
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let mut data = vec![T::zero(); numel(&s)];
                for bi in 0..b {
                    for yy in 0..h * k {
                        for xx in 0..w * k {
                            let src = ((bi * h * k + yy) * w * k + xx) * c;
                            let dst = ((bi * h + yy / k) * w + xx / k) * c;
                            for ch in 0..c {
                                data[dst + ch] = data[dst + ch] + g.data()[src + ch];
                            }
                        }
                    }
                }
                out.push((*a, Array::from_vec(&s, data)?));
            }
            Op::Mean { a, axis } => {
                let shape = self.shape(*a).to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let n = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let inv = T::one() / T::of(n as f64);
                let mut data = vec![T::zero(); numel(&shape)];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            data[(o * n + j) * inner + i] = g.data()[o * inner + i] * inv;
                        }
                    }
                }
                out.push((*a, Array::from_vec(&shape, data)?));
            }
            Op::SumAll { a } => {
                out.push((*a, Array::full(self.shape(*a), g.item())));
            }
            Op::Gather { a, index } => {
                let mut data = vec![T::zero(); self.value(*a).len()];
                for (&i, &gv) in index.iter().zip(g.data()) {
                    data[i] = data[i] + gv;
                }
                out.push((*a, Array::from_vec(self.shape(*a), data)?));
            }
            Op::Mse { a, b, weight, norm } => {
                if *norm > T::zero() {
                    let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                    let c = T::of(2.0) * g.item() / *norm;
                    let da: Vec<T> = match weight {
                        None => xa.iter().zip(xb).map(|(&x, &yv)| c * (x - yv)).collect(),
                        Some(w) => xa
                            .iter()
                            .zip(xb)
                            .zip(w.data())
                            .map(|((&x, &yv), &wv)| c * wv * (x - yv))
                            .collect(),
                    };
                    let shape = self.shape(*a).to_vec();
                    if self.rg(*b) {
                        out.push((*b, Array::from_vec(&shape, da.iter().map(|&v| -v).collect())?));
                    }
                    if self.rg(*a) {
                        out.push((*a, Array::from_vec(&shape, da)?));
                    }
                }
            }
        }
        Ok(out)
    }
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared: bool,
}

impl MatMulDims {
    fn new(sa: &[usize], sb: &[usize], b_t: bool) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err("matmul", format!("{sa:?} @ {sb:?}: operands need rank >= 2"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if b_t {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return shape_err("matmul", format!("{sa:?} @ {sb:?} (b transposed: {b_t})"));
        }
        let lead: usize = sa[..sa.len() - 2].iter().product();
        if sb.len() == 2 {
            Ok(Self { batch: lead, m, k, n, shared: true })
        } else if sb[..sb.len() - 2] == sa[..sa.len() - 2] {
            Ok(Self { batch: lead, m, k, n, shared: false })
        } else {
            shape_err("matmul", format!("batch axes differ: {sa:?} @ {sb:?}"))
        }
    }
}

fn broadcast_to<T: Scalar>(w: &Array<T>, shape: &[usize]) -> Array<T> {
    if w.shape() == shape {
        return w.clone();
    }
    let strides = kernels::broadcast_strides(shape, w.shape());
    let zeros = vec![0; shape.len()];
    let mut data = vec![T::zero(); numel(shape)];
    kernels::visit2(shape, &strides, &zeros, |o, i, _| data[o] = w.data()[i]);
    Array::from_vec(shape, data).expect("broadcast shape")
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    x.sigmoid()
}

pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let u = c * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh_op())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let u = c * (x + T::of(0.044715) * x * x * x);
    let t = u.tanh_op();
    let du = c * (T::one() + T::of(3.0 * 0.044715) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_at_three() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Array::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Array::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap()).unwrap();
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_exact_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Array::full(&[2, 5], 0.1)).unwrap();
        let y = g.layer_norm(x, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_must_be_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Array::zeros(&[2])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Array::scalar(2.0)).unwrap();
        store.insert("b", Array::scalar(5.0)).unwrap();
        store.set_trainable("b", false).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "a").unwrap();
        let b = g.param(&store, "b").unwrap();
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        let named = grads.by_name();
        assert_eq!(named["a"].item(), 5.0);
        assert!(!named.contains_key("b"));
        assert!(grads.wrt(b).is_none());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Array::scalar(f64::MAX)).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn shared_subexpression_sums_paths() {
        // y = (x*x) + (x*x)*x with u = x*x shared
        let mut g = Graph::<f64>::new();
        let x = g.input(Array::scalar(2.0)).unwrap();
        let u = g.mul(x, x).unwrap();
        let v = g.mul(u, x).unwrap();
        let y = g.add(u, v).unwrap();
        let grads = g.backward(y).unwrap();
        // dy/dx = 2x + 3x^2 = 4 + 12
        assert_eq!(grads.wrt(x).unwrap().item(), 16.0);
    }

    #[test]
    fn weighted_mse_ignores_zero_weight_pixels() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Array::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let b = g.constant(Array::zeros(&[2, 2])).unwrap();
        let w = Array::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap();
        let l = g.mse(a, b, Some(&w)).unwrap();
        assert!((g.value(l).item() - 2.5).abs() < 1e-12);
        let grads = g.backward(l).unwrap();
        let ga = grads.wrt(a).unwrap().data();
        assert_eq!(&ga[2..], &[0.0, 0.0]);
    }
}

