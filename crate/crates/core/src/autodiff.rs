//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Graph`] is a tape: every primitive appends a node holding its forward
//! value and enough context to run its backward rule. Parameters live in a
//! [`ParamStore`] outside the graph; [`Graph::param`] brings one onto the
//! tape (once per graph, so gradients from every use accumulate into the same
//! node). Calling [`Graph::backward`] on a `1×1` node walks the tape in
//! reverse and returns a [`Grads`] table.
//!
//! All arithmetic is `f64`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::invalid(format!(
                "tensor of shape [{rows}, {cols}] needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn from_rows<const C: usize>(rows: &[[f64; C]]) -> Self {
        Self {
            rows: rows.len(),
            cols: C,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a `1×1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    GroupMax(Var, Vec<usize>),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    StopGradient,
    Chamfer {
        pred: Var,
        target: Tensor,
        group: usize,
        pred_nn: Vec<usize>,
        target_nn: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Maximum(..) => "maximum",
            Op::Minimum(..) => "minimum",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Softplus(_) => "softplus",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::GroupMax(..) => "group_max",
            Op::MeanRows(_) => "mean_rows",
            Op::SumAll(_) => "sum_all",
            Op::MeanAll(_) => "mean_all",
            Op::Reshape(_) => "reshape",
            Op::StopGradient => "stop_gradient",
            Op::Chamfer { .. } => "chamfer",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-6;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// out[m×n] += a[m×k] · b[k×n]
fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
fn mm_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// out[m×n] += a[k×m]ᵀ · b[k×n]
fn mm_at_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Gradient table produced by [`Graph::backward`].
pub struct Grads {
    node: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient with respect to `v`, or `None` when no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.node.get(v.0).and_then(|g| g.as_deref())
    }
}

/// The computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    first_nonfinite: Option<String>,
    fault: Option<&'static str>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test fixture: scales the backward rule of the named primitive by 1.5 so
    /// gradient checks can be shown to fail.
    pub fn with_fault(op: &'static str) -> Self {
        Self {
            fault: Some(op),
            ..Self::default()
        }
    }

    pub fn fault(&self) -> Option<&'static str> {
        self.fault
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows, t.cols)
    }

    /// Name of the first primitive whose output contained NaN or Inf.
    pub fn first_nonfinite(&self) -> Option<&str> {
        self.first_nonfinite.as_deref()
    }

    pub fn check_finite(&self) -> Result<()> {
        match &self.first_nonfinite {
            Some(op) => Err(Error::NonFinite { op: op.clone() }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some(op.name().to_string());
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape()
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Brings a parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.dims(a),
                rhs: self.dims(b),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.dims(a),
                rhs: self.dims(b),
            });
        }
        let mut out = vec![0.0; m * n];
        mm_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(m, n, out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_bt",
                lhs: self.dims(a),
                rhs: self.dims(b),
            });
        }
        let mut out = vec![0.0; m * n];
        mm_bt_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(m, n, out)?, Op::MatMulBt(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(a);
        self.push(Tensor { rows: n, cols: m, data: out }, Op::Transpose(a), ng)
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { rows: r, cols: c, data }, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    fn row_broadcast(&mut self, name: &'static str, a: Var, row: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.dims(a),
                rhs: self.dims(row),
            });
        }
        let rv = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks_exact(c.max(1))
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(x, y)| f(*x, *y)))
            .collect::<Vec<_>>();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Tensor::new(r, c, data)?, op, ng))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| f(*x)).collect();
        let out = Tensor {
            rows: t.rows,
            cols: t.cols,
            data,
        };
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols;
        let mut data = t.data.clone();
        for row in data.chunks_exact_mut(c.max(1)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor { rows: t.rows, cols: c, data };
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Row-wise normalization to zero mean and unit variance, without the affine part.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols;
        let mut data = t.data.clone();
        let mut inv_std = Vec::with_capacity(t.rows);
        for row in data.chunks_exact_mut(c.max(1)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor { rows: t.rows, cols: c, data };
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm(a, inv_std), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let c = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.shape(p).1 != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.dims(first),
                    rhs: self.dims(p),
                });
            }
            data.extend_from_slice(self.value(p).data());
            rows += self.shape(p).0;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor { rows, cols: c, data }, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let r = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.dims(first),
                    rhs: self.dims(p),
                });
            }
            cols += self.shape(p).1;
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor { rows: r, cols, data }, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start > end || end > r {
            return Err(Error::invalid(format!("slice_rows {start}..{end} out of range for {r} rows")));
        }
        let data = self.value(a).data()[start * c..end * c].to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor { rows: end - start, cols: c, data }, Op::SliceRows(a, start), ng))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start > end || end > c {
            return Err(Error::invalid(format!("slice_cols {start}..{end} out of range for {c} cols")));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor { rows: r, cols: end - start, data }, Op::SliceCols(a, start), ng))
    }

    /// Row lookup (embedding lookup); indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!("gather_rows index {bad} out of range for {r} rows")));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor { rows: idx.len(), cols: c, data }, Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Column-wise max over consecutive groups of `group` rows: `[g·group, c] -> [g, c]`.
    /// Ties go to the earliest row.
    pub fn group_max(&mut self, a: Var, group: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if group == 0 || r % group != 0 {
            return Err(Error::invalid(format!("group_max: {r} rows not divisible into groups of {group}")));
        }
        let g = r / group;
        let t = self.value(a);
        let mut data = vec![f64::NEG_INFINITY; g * c];
        let mut arg = vec![0usize; g * c];
        for gi in 0..g {
            for k in 0..group {
                let row = gi * group + k;
                for j in 0..c {
                    let v = t.data[row * c + j];
                    if v > data[gi * c + j] {
                        data[gi * c + j] = v;
                        arg[gi * c + j] = row;
                    }
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor { rows: g, cols: c, data }, Op::GroupMax(a, arg), ng))
    }

    /// Column-wise max over all rows, `[r, c] -> [1, c]`.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).0;
        self.group_max(a, r)
    }

    /// Column-wise mean over rows, `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r == 0 {
            return Err(Error::invalid("mean_rows of an empty tensor"));
        }
        let t = self.value(a);
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, v) in data.iter_mut().zip(t.row(i)) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= r as f64;
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor { rows: 1, cols: c, data }, Op::MeanRows(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = self.value(a).data().iter().sum::<f64>() / n as f64;
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(a), ng))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a);
        if rows * cols != t.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: t.shape(),
                rhs: vec![rows, cols],
            });
        }
        let out = Tensor {
            rows,
            cols,
            data: t.data.clone(),
        };
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Identity forward; nothing flows back through this node.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGradient, false)
    }

    /// Mean over groups of the symmetric Chamfer distance between predicted and
    /// target point groups. `pred` and `target` are `[g·group, 3]`; group `i`
    /// of one is compared with group `i` of the other.
    pub fn chamfer(&mut self, pred: Var, target: &Tensor, group: usize) -> Result<Var> {
        let (r, c) = self.shape(pred);
        if c != 3 || target.cols != 3 || target.rows != r {
            return Err(Error::ShapeMismatch {
                op: "chamfer",
                lhs: self.dims(pred),
                rhs: target.shape(),
            });
        }
        if group == 0 || r % group != 0 || r == 0 {
            return Err(Error::invalid(format!("chamfer: {r} rows not divisible into groups of {group}")));
        }
        let g = r / group;
        let p = self.value(pred).data();
        let as_pts = |d: &[f64]| -> Vec<[f64; 3]> { d.chunks_exact(3).map(|x| [x[0], x[1], x[2]]).collect() };
        let pp = as_pts(p);
        let tp = as_pts(target.data());
        let mut pred_nn = Vec::with_capacity(r);
        let mut target_nn = Vec::with_capacity(r);
        let mut total = 0.0;
        for gi in 0..g {
            let range = gi * group..(gi + 1) * group;
            let a = &pp[range.clone()];
            let b = &tp[range];
            let ab = crate::geom::nearest_in(a, b);
            let ba = crate::geom::nearest_in(b, a);
            let s1: f64 = ab.iter().map(|x| x.1).sum::<f64>() / group as f64;
            let s2: f64 = ba.iter().map(|x| x.1).sum::<f64>() / group as f64;
            total += s1 + s2;
            pred_nn.extend(ab.iter().map(|x| gi * group + x.0));
            target_nn.extend(ba.iter().map(|x| gi * group + x.0));
        }
        let ng = self.ng(pred);
        Ok(self.push(
            Tensor::scalar(total / g as f64),
            Op::Chamfer {
                pred,
                target: target.clone(),
                group,
                pred_nn,
                target_nn,
            },
            ng,
        ))
    }

    /// Mean softmax cross-entropy of `logits [n, classes]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.shape(logits);
        if labels.len() != n || n == 0 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.dims(logits),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let t = self.value(logits);
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = t.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse-mode sweep from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::invalid(format!("backward needs a scalar loss, got shape {:?}", lt.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Grads { node: grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            let n = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
        }

        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if self.fault == Some(node.op.name()) {
                for v in &mut g {
                    *v *= 1.5;
                }
            }
            let out = &node.value;
            let nodes = &self.nodes;
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf | Op::Param | Op::StopGradient => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (val(*a).rows, val(*a).cols);
                    let n = val(*b).cols;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        mm_bt_acc(&g, &val(*b).data, m, n, k, ga);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        mm_at_acc(&val(*a).data, &g, m, k, n, gb);
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (m, k) = (val(*a).rows, val(*a).cols);
                    let n = val(*b).rows;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        mm_acc(&g, &val(*b).data, m, n, k, ga);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        mm_at_acc(&g, &val(*a).data, m, n, k, gb);
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (val(*a).rows, val(*a).cols);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for r in 0..m {
                            for c in 0..n {
                                ga[r * n + c] += g[c * m + r];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        gb.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        gb.iter_mut().zip(&g).for_each(|(x, y)| *x -= y);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&val(*a).data, &val(*b).data);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for j in 0..g.len() {
                            ga[j] += g[j] * bv[j];
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for j in 0..g.len() {
                            gb[j] += g[j] * av[j];
                        }
                    }
                }
                Op::Div(a, b) => {
                    let bv = &val(*b).data;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for j in 0..g.len() {
                            ga[j] += g[j] / bv[j];
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for j in 0..g.len() {
                            gb[j] -= g[j] * out.data[j] / bv[j];
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    let c = out.cols;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    if let Some(gr) = slot(&mut grads, nodes, *row) {
                        for chunk in g.chunks_exact(c.max(1)) {
                            gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::MulRow(a, row) => {
                    let c = out.cols;
                    let (av, rv) = (&val(*a).data, &val(*row).data);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for j in 0..g.len() {
                            ga[j] += g[j] * rv[j % c];
                        }
                    }
                    if let Some(gr) = slot(&mut grads, nodes, *row) {
                        for j in 0..g.len() {
                            gr[j % c] += g[j] * av[j];
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += s * y);
                    }
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                }
                Op::Maximum(a, b) | Op::Minimum(a, b) => {
                    let is_max = matches!(node.op, Op::Maximum(..));
                    let (av, bv) = (&val(*a).data, &val(*b).data);
                    let pick_a: Vec<bool> = av
                        .iter()
                        .zip(bv)
                        .map(|(x, y)| if is_max { x >= y } else { x <= y })
                        .collect();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for j in 0..g.len() {
                            if pick_a[j] {
                                ga[j] += g[j];
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for j in 0..g.len() {
                            if !pick_a[j] {
                                gb[j] += g[j];
                            }
                        }
                    }
                }
                Op::Relu(a) => {
                    let av = &val(*a).data;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for j in 0..g.len() {
                            if av[j] > 0.0 {
                                ga[j] += g[j];
                            }
                        }
                    }
                }
                Op::Gelu(a) => {
                    let av = &val(*a).data;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for j in 0..g.len() {
                            ga[j] += g[j] * gelu_grad(av[j]);
                        }
                    }
                }
                Op::Softplus(a) => {
                    let av = &val(*a).data;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for j in 0..g.len() {
                            ga[j] += g[j] * sigmoid(av[j]);
                        }
                    }
                }
                Op::Softmax(a) => {
                    let c = out.cols.max(1);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((gr, yr), gar) in g.chunks_exact(c).zip(out.data.chunks_exact(c)).zip(ga.chunks_exact_mut(c)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                            for j in 0..c {
                                gar[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm(a, inv_std) => {
                    let c = out.cols.max(1);
                    let cf = c as f64;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for (r, ((gr, yr), gar)) in g
                            .chunks_exact(c)
                            .zip(out.data.chunks_exact(c))
                            .zip(ga.chunks_exact_mut(c))
                            .enumerate()
                        {
                            let mg = gr.iter().sum::<f64>() / cf;
                            let mgy = gr.iter().zip(yr).map(|(x, y)| x * y).sum::<f64>() / cf;
                            for j in 0..c {
                                gar[j] += inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = val(*p).len();
                        if let Some(gp) = slot(&mut grads, nodes, *p) {
                            gp.iter_mut().zip(&g[off..off + n]).for_each(|(x, y)| *x += y);
                        }
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = out.cols;
                    let mut off = 0;
                    for p in parts {
                        let pc = val(*p).cols;
                        if let Some(gp) = slot(&mut grads, nodes, *p) {
                            for r in 0..out.rows {
                                for j in 0..pc {
                                    gp[r * pc + j] += g[r * total + off + j];
                                }
                            }
                        }
                        off += pc;
                    }
                }
                Op::SliceRows(a, start) => {
                    let c = out.cols;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga[start * c..start * c + g.len()]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(x, y)| *x += y);
                    }
                }
                Op::SliceCols(a, start) => {
                    let (w, src_c) = (out.cols, val(*a).cols);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for r in 0..out.rows {
                            for j in 0..w {
                                ga[r * src_c + start + j] += g[r * w + j];
                            }
                        }
                    }
                }
                Op::GatherRows(a, idx) => {
                    let c = out.cols;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for (r, &src) in idx.iter().enumerate() {
                            for j in 0..c {
                                ga[src * c + j] += g[r * c + j];
                            }
                        }
                    }
                }
                Op::GroupMax(a, arg) => {
                    let c = out.cols;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for (j, &row) in arg.iter().enumerate() {
                            ga[row * c + j % c] += g[j];
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let (r, c) = (val(*a).rows, out.cols);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += g[j] / r as f64;
                            }
                        }
                    }
                }
                Op::SumAll(a) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().for_each(|x| *x += g[0]);
                    }
                }
                Op::MeanAll(a) => {
                    let n = val(*a).len() as f64;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().for_each(|x| *x += g[0] / n);
                    }
                }
                Op::Chamfer {
                    pred,
                    target,
                    group,
                    pred_nn,
                    target_nn,
                } => {
                    let p = &val(*pred).data;
                    let t = &target.data;
                    let groups = (p.len() / 3 / group) as f64;
                    let w = g[0] * 2.0 / (*group as f64 * groups);
                    if let Some(gp) = slot(&mut grads, nodes, *pred) {
                        for (i, &j) in pred_nn.iter().enumerate() {
                            for d in 0..3 {
                                gp[i * 3 + d] += w * (p[i * 3 + d] - t[j * 3 + d]);
                            }
                        }
                        for (j, &i) in target_nn.iter().enumerate() {
                            for d in 0..3 {
                                gp[i * 3 + d] += w * (p[i * 3 + d] - t[j * 3 + d]);
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let n = labels.len();
                    let k = probs.len() / n;
                    if let Some(gl) = slot(&mut grads, nodes, *logits) {
                        for i in 0..n {
                            for j in 0..k {
                                let y = if j == labels[i] { 1.0 } else { 0.0 };
                                gl[i * k + j] += g[0] * (probs[i * k + j] - y) / n as f64;
                            }
                        }
                    }
                }
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }
        Ok(Grads { node: grads })
    }

    /// Gradients for every parameter of `store`, zero where none arrived.
    pub fn param_grads(&self, grads: &Grads, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                let t = store.get(id);
                match self.params.get(&id).and_then(|v| grads.wrt(*v)) {
                    Some(g) => Tensor {
                        rows: t.rows,
                        cols: t.cols,
                        data: g.to_vec(),
                    },
                    None => Tensor::zeros(t.rows, t.cols),
                }
            })
            .collect()
    }

    /// Parameters that appear on this tape.
    pub fn touched_params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.params.keys().copied().collect();
        v.sort();
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid AdamW hyperparameters {self:?}")))
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.rows, t.cols);
        Self {
            cfg,
            step: 0,
            m: store.iter().map(|(_, _, t)| zeros(t)).collect(),
            v: store.iter().map(|(_, _, t)| zeros(t)).collect(),
        }
    }

    /// Rebuilds optimizer state saved by [`AdamW::moments`].
    pub fn from_parts(cfg: AdamWConfig, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Self {
        Self { cfg, step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One update of the parameters flagged in `active` at learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], active: &[bool], lr: f64) -> Result<()> {
        if grads.len() != store.len() || active.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::invalid(format!(
                "adamw: {} params, {} grads, {} flags, {} moments",
                store.len(),
                grads.len(),
                active.len(),
                self.m.len()
            )));
        }
        for (id, _, p) in store.iter() {
            if p.shape() != grads[id.0].shape() || p.shape() != self.m[id.0].shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.shape(),
                    rhs: grads[id.0].shape(),
                });
            }
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            if !active[id.0] {
                continue;
            }
            let p = store.get_mut(id).data_mut();
            let g = grads[id.0].data();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            for j in 0..p.len() {
                p[j] -= lr * c.weight_decay * p[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Euclidean norm over a list of gradient tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Max over components of `|analytic - central difference| / max(1, |analytic|)`
/// for the scalar function `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_with(f, x, step, None)
}

pub(crate) fn grad_check_with<F>(f: F, x: &Tensor, step: f64, fault: Option<&'static str>) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = match fault {
        Some(op) => Graph::with_fault(op),
        None => Graph::new(),
    };
    let xv = g.input(x.clone());
    let loss = f(&mut g, xv)?;
    g.check_finite()?;
    let grads = g.backward(loss)?;
    let analytic: Vec<f64> = grads.wrt(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let l = f(&mut g, v)?;
        Ok(g.value(l).item())
    };
    let mut worst = 0.0_f64;
    for j in 0..x.len() {
        let mut plus = x.clone();
        plus.data[j] += step;
        let mut minus = x.clone();
        minus.data[j] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic[j] - numeric).abs() / analytic[j].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
