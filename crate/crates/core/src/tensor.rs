//! Dense row-major `f64` tensors and a reverse-mode gradient tape.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations are
//! methods on the tape that take [`Var`] handles and push a new node, so the
//! node list is always in topological order. [`Tape::backward`] walks it in
//! reverse and accumulates gradients into every node that requires one.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{bail, Error, Result};

/// Dense n-dimensional array of finite `f64` values in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor, rejecting mismatched lengths and non-finite entries.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            bail!(
                Dimension,
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel,
                data.len()
            );
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for values computed from finite inputs.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        assert!(value.is_finite());
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            bail!(Dimension, "ragged rows");
        }
        Self::new(
            [rows.len(), cols],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &n) in index.iter().zip(&self.shape) {
            assert!(i < n, "index out of bounds");
            flat = flat * n + i;
        }
        self.data[flat]
    }

    /// Overwrites one flat element.
    pub fn set_flat(&mut self, index: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite { index });
        }
        self.data[index] = value;
        Ok(())
    }

    /// Row `i` of the tensor viewed as `[len / last_dim, last_dim]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaxPool2x2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Gelu(Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Abs(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of operations; parents always precede their children.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
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

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Gradient accumulated by the last [`backward`](Self::backward) call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(
                Dimension,
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            );
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            bail!(Dimension, "matmul: cannot multiply {:?} by {:?}", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = va.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[d]` vector to every row of a `[.., d]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            bail!(Dimension, "add_bias: bias {:?} vs rows of width {d}", self.shape(bias));
        }
        let b = self.value(bias).data();
        let vx = self.value(x);
        let data = vx
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(r, b)| r + b))
            .collect();
        let shape = vx.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        if !factor.is_finite() {
            return Err(Error::NonFinite { index: 0 });
        }
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * factor).collect();
        let shape = vx.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Scale(x, factor), &[x]))
    }

    /// Softmax along the last axis, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if d == 0 {
            bail!(Dimension, "softmax over empty rows");
        }
        let mut data = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut total = 0.0;
            for &v in row {
                let e = libm::exp(v - max);
                total += e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e /= total;
            }
        }
        let shape = vx.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::SoftmaxRows(x), &[x]))
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if d < 2 {
            bail!(Dimension, "layer_norm needs at least 2 features, got {d}");
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            bail!(Dimension, "layer_norm: affine parameters must have shape [{d}]");
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = vx.len() / d;
        let mut xhat = Vec::with_capacity(vx.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / libm::sqrt(var + eps);
            inv_std.push(r);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[i] + b[i]);
            }
        }
        let shape = vx.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Channel-wise max over disjoint 2×2 windows of an `[h, w, d]` map.
    pub fn max_pool_2x2(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 {
            bail!(Dimension, "max_pool_2x2 expects [h, w, d], got {:?}", s);
        }
        let (h, w, d) = (s[0], s[1], s[2]);
        if h % 2 != 0 || w % 2 != 0 {
            bail!(Dimension, "max_pool_2x2 needs even extents, got {h}x{w}");
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = vx.data();
        let mut out = Vec::with_capacity(oh * ow * d);
        let mut argmax = Vec::with_capacity(oh * ow * d);
        for y in 0..oh {
            for xx in 0..ow {
                for c in 0..d {
                    let mut best = usize::MAX;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ((2 * y + dy) * w + 2 * xx + dx) * d + c;
                        if best == usize::MAX || src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![oh, ow, d], out),
            Op::MaxPool2x2 { x, argmax },
            &[x],
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Dimension, "concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            bail!(Dimension, "concat axis {axis} out of range for rank {}", base.len());
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &n)| i != axis && n != base[i]) {
                bail!(Dimension, "concat: {:?} incompatible with {:?} on axis {axis}", s, base);
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            bail!(
                Dimension,
                "slice {start}..{} out of range on axis {axis} of {:?}",
                start + len,
                s
            );
        }
        let (outer, inner) = outer_inner(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { x, axis, start }, &[x]))
    }

    /// Rows of a `[n, d]` matrix picked by `index` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            bail!(Dimension, "gather_rows expects a matrix, got {:?}", s);
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= s[0]) {
            bail!(Dimension, "gather_rows: row {bad} out of range for {} rows", s[0]);
        }
        let vx = self.value(x);
        let mut data = Vec::with_capacity(index.len() * s[1]);
        for &i in index {
            data.extend_from_slice(vx.row(i));
        }
        Ok(self.push(
            Tensor::from_parts(vec![index.len(), s[1]], data),
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu(v)).collect();
        let shape = vx.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Gelu(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            bail!(Dimension, "transpose expects a matrix, got {:?}", s);
        }
        let data = transpose_raw(self.value(x).data(), s[0], s[1]);
        Ok(self.push(Tensor::from_parts(vec![s[1], s[0]], data), Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::from_parts(Vec::new(), vec![s]), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            bail!(Dimension, "mean of an empty tensor");
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        Ok(self.push(Tensor::from_parts(Vec::new(), vec![m]), Op::Mean(x), &[x]))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| libm::fabs(*v)).collect();
        let shape = vx.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Abs(x), &[x]))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    ///
    /// Gradients from earlier calls are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            bail!(Contract, "loss {:?} is not on this tape", loss);
        }
        if !self.nodes[loss.0].value.is_scalar() {
            bail!(
                Contract,
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            );
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(seed_shape, 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, d) in g.data.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => {
                node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), delta));
            }
        }
    }

    fn propagate(&mut self, i: usize, op: &Op, g: &Tensor) {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    let da = matmul_raw(gd, &bt, m, n, k);
                    self.accumulate(*a, da);
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    let db = matmul_raw(&at, gd, k, m, n);
                    self.accumulate(*b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, gd.to_vec());
                self.accumulate(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, gd.to_vec());
                self.accumulate(*b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let da = gd.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Op::AddBias(x, bias) => {
                let d = self.shape(*bias)[0];
                let mut db = vec![0.0; d];
                for row in gd.chunks(d) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.accumulate(*x, gd.to_vec());
                self.accumulate(*bias, db);
            }
            Op::Scale(x, f) => {
                self.accumulate(*x, gd.iter().map(|v| v * f).collect());
            }
            Op::SoftmaxRows(x) => {
                let y = self.nodes[i].value.data();
                let d = self.nodes[i].value.last_dim();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(d).zip(gd.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                self.accumulate(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gain)[0];
                let gv = self.value(*gain).data().to_vec();
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = Vec::with_capacity(gd.len());
                for ((gr, hr), &r) in gd.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..d {
                        dgain[c] += gr[c] * hr[c];
                        dbias[c] += gr[c];
                        let dh = gr[c] * gv[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[c];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for c in 0..d {
                        let dh = gr[c] * gv[c];
                        dx.push(r * (dh - mean_dh - hr[c] * mean_dh_h));
                    }
                }
                self.accumulate(*x, dx);
                self.accumulate(*gain, dgain);
                self.accumulate(*bias, dbias);
            }
            Op::MaxPool2x2 { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx[src] += gv;
                }
                self.accumulate(*x, dx);
            }
            Op::Concat { parts, axis } => {
                let out_shape = g.shape();
                let (outer, inner) = outer_inner(out_shape, *axis);
                let total = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&gd[base..base + n * inner]);
                        }
                        self.accumulate(p, dp);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x).to_vec();
                let (outer, inner) = outer_inner(&s, *axis);
                let len = g.shape()[*axis];
                let mut dx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accumulate(*x, dx);
            }
            Op::GatherRows { x, index } => {
                let d = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (k, &r) in index.iter().enumerate() {
                    for c in 0..d {
                        dx[r * d + c] += gd[k * d + c];
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::Gelu(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, g)| g * gelu_grad(v))
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (m, n) = (s[0], s[1]);
                self.accumulate(*x, transpose_raw(gd, n, m));
            }
            Op::Reshape(x) => {
                self.accumulate(*x, gd.to_vec());
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(*x, vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(*x, vec![gd[0] / n as f64; n]);
            }
            Op::Abs(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, g)| {
                        if v > 0.0 {
                            *g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(*x, dx);
            }
        }
    }
}
