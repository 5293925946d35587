//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a Wengert tape: every operation appends one node holding
//! the output [`Tensor`] and the rule that produced it. [`Graph::backward`]
//! walks the tape in reverse recording order and accumulates gradients into
//! each `requires_grad` tensor. Graphs are built per training step and
//! dropped after backward; parameters live outside the graph and are bound
//! as leaves each step.
//!
//! Everything is 64-bit. NaN or infinity anywhere in a forward value or a
//! gradient is a hard error, never a warning. There is no broadcasting
//! beyond scalar-tensor; row-vector bias/gain application goes through the
//! explicit `add_bias` / `scale_cols` operations.

use crate::error::{Error, Result};

/// Large negative logit used to mask out attention positions. Finite on
/// purpose: the engine rejects infinities, and exp(-1e9 - lse) underflows
/// to exactly zero anyway.
pub const MASK_LOGIT: f64 = -1e9;

/// Dense row-major f64 array participating in a differentiation graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, checking the element count and that every value is
    /// finite.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        let t = Tensor { shape, values, requires_grad: false, grad: None };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], values: vec![v], requires_grad: false, grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), values: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), values: vec![v; numel], requires_grad: false, grad: None }
    }

    /// Rank-2 tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape("from_rows: no rows".into()));
        }
        let cols = rows[0].len();
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape("from_rows: ragged rows".into()));
            }
            values.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], values)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the raw values; used by optimizers. Callers are
    /// expected to keep the contents finite (SGD helpers re-check).
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Accumulated gradient, present after a backward pass touched this
    /// tensor.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.values[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn check_finite(&self, ctx: &str) -> Result<()> {
        for (i, v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{ctx}: element {i} is {v}")));
            }
        }
        Ok(())
    }

    fn accumulate_grad(&mut self, delta: &[f64]) {
        match &mut self.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.grad = Some(delta.to_vec()),
        }
    }
}

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Local gradient rule of a recorded operation. The enum payload keeps the
/// input references; saved index lists are the op's non-differentiable
/// arguments.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Log(Var),
    Exp(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    LogAddExp(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    AddBias(Var, Var),
    ScaleCols(Var, Var),
    RmsNorm(Var, f64),
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Recording tape. Topological order is the recording order; backward
/// visits nodes in reverse. Confined to one worker at a time.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Stable sigmoid, used by the log_add_exp gradient.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe log(exp(a) + exp(b)) on plain floats.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> Result<Var> {
        tensor.check_finite("forward")?;
        self.nodes.push(Node { tensor, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.node(v).tensor
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.tensor(v).values()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.tensor(v).shape()
    }

    /// Scalar value of a rank-0/length-1 tensor.
    pub fn item(&self, v: Var) -> f64 {
        self.tensor(v).item()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.tensor(v).grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.tensor.zero_grad();
        }
    }

    /// Record a leaf tensor, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf)
    }

    /// Record a leaf that never receives gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Result<Var> {
        t.requires_grad = false;
        self.push(t, Op::Leaf)
    }

    /// Bind a parameter tensor: cloned into the graph with gradients on.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        let mut c = t.clone();
        c.requires_grad = true;
        c.grad = None;
        self.push(c, Op::Leaf)
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<Var> {
        self.constant(Tensor::scalar(v))
    }

    fn out_requires(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.node(*v).tensor.requires_grad)
    }

    fn elementwise_pair(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{name}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn build(&mut self, shape: Vec<usize>, values: Vec<f64>, inputs: &[Var], op: Op) -> Result<Var> {
        let t = Tensor {
            shape,
            values,
            requires_grad: self.out_requires(inputs),
            grad: None,
        };
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "add")?;
        let values = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.build(self.shape(a).to_vec(), values, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "sub")?;
        let values = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        self.build(self.shape(a).to_vec(), values, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "mul")?;
        let values = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        self.build(self.shape(a).to_vec(), values, &[a, b], Op::Mul(a, b))
    }

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::NonFinite(format!("scale factor {c}")));
        }
        let values = self.value(a).iter().map(|x| x * c).collect();
        self.build(self.shape(a).to_vec(), values, &[a], Op::Scale(a, c))
    }

    /// Add a scalar constant elementwise.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::NonFinite(format!("add_scalar offset {c}")));
        }
        let values = self.value(a).iter().map(|x| x + c).collect();
        self.build(self.shape(a).to_vec(), values, &[a], Op::AddScalar(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let values: Vec<f64> = self.value(a).iter().map(|x| x.ln()).collect();
        self.build(self.shape(a).to_vec(), values, &[a], Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let values: Vec<f64> = self.value(a).iter().map(|x| x.exp()).collect();
        self.build(self.shape(a).to_vec(), values, &[a], Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let values: Vec<f64> = self.value(a).iter().map(|x| x.tanh()).collect();
        self.build(self.shape(a).to_vec(), values, &[a], Op::Tanh(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v: f64 = self.value(a).iter().sum();
        self.build(vec![], vec![v], &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.tensor(a).numel();
        if n == 0 {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let v: f64 = self.value(a).iter().sum::<f64>() / n as f64;
        self.build(vec![], vec![v], &[a], Op::Mean(a))
    }

    /// Elementwise overflow-safe log(exp(a) + exp(b)); the log-space mixture
    /// primitive used by the skew divergences.
    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "log_add_exp")?;
        let values = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| log_add_exp(x, y))
            .collect();
        self.build(self.shape(a).to_vec(), values, &[a, b], Op::LogAddExp(a, b))
    }

    /// [m,k] x [k,n] -> [m,n]. Gradients dA = dC.B^T, dB = A^T.dC.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape(format!("matmul needs rank-2, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = i * n;
                for j in 0..n {
                    out[orow + j] += aip * brow[j];
                }
            }
        }
        self.build(vec![m, n], out, &[a, b], Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose needs rank-2, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        self.build(vec![n, m], out, &[a], Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.tensor(a).numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(a),
                shape
            )));
        }
        let values = self.value(a).to_vec();
        self.build(shape, values, &[a], Op::Reshape(a))
    }

    /// Row-wise log-softmax over the last axis (rank 1 or 2), computed with
    /// max subtraction. Each output row exponentiates and sums to one.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a, "log_softmax")?;
        let av = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &av[r * cols..(r + 1) * cols];
            log_softmax_row_into(row, &mut out[r * cols..(r + 1) * cols]);
        }
        self.build(self.shape(a).to_vec(), out, &[a], Op::LogSoftmax(a))
    }

    /// out[t] = x[t, ids[t]]; gradient scatters into the selected slots.
    pub fn gather(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather needs rank-2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        if ids.len() != rows {
            return Err(Error::Shape(format!(
                "gather: {} rows but {} indices",
                rows,
                ids.len()
            )));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows);
        for (t, &id) in ids.iter().enumerate() {
            if id >= cols {
                return Err(Error::Index(format!("gather index {id} >= {cols} at row {t}")));
            }
            out.push(av[t * cols + id]);
        }
        self.build(vec![rows], out, &[a], Op::Gather(a, ids.to_vec()))
    }

    /// Row lookup: out[t, :] = x[ids[t], :] (embedding-style select).
    pub fn select_rows(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape(format!("select_rows needs rank-2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let av = self.value(a);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index(format!("select_rows index {id} >= {rows}")));
            }
            out.extend_from_slice(&av[id * cols..(id + 1) * cols]);
        }
        self.build(vec![ids.len(), cols], out, &[a], Op::SelectRows(a, ids.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape(format!("slice_cols needs rank-2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        if start + len > cols {
            return Err(Error::Index(format!(
                "slice_cols {start}..{} beyond {cols} columns",
                start + len
            )));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av[r * cols + start..r * cols + start + len]);
        }
        self.build(vec![rows, len], out, &[a], Op::SliceCols(a, start, len))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of nothing".into()));
        }
        let rows = self.shape(parts[0])[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Shape(format!("concat_cols: incompatible part {s:?}")));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let cols = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[r * cols..(r + 1) * cols]);
            }
        }
        self.build(vec![rows, total], out, parts, Op::ConcatCols(parts.to_vec()))
    }

    /// Add a [n] bias row to every row of a [m,n] matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a, "add_bias")?;
        if self.shape(bias) != [cols] {
            return Err(Error::Shape(format!(
                "add_bias: bias {:?} for {cols} columns",
                self.shape(bias)
            )));
        }
        let av = self.value(a);
        let bv = self.value(bias);
        let mut out = Vec::with_capacity(av.len());
        for r in 0..rows {
            for j in 0..cols {
                out.push(av[r * cols + j] + bv[j]);
            }
        }
        self.build(self.shape(a).to_vec(), out, &[a, bias], Op::AddBias(a, bias))
    }

    /// Multiply column j of a [m,n] matrix by gains[j].
    pub fn scale_cols(&mut self, a: Var, gains: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a, "scale_cols")?;
        if self.shape(gains) != [cols] {
            return Err(Error::Shape(format!(
                "scale_cols: gains {:?} for {cols} columns",
                self.shape(gains)
            )));
        }
        let av = self.value(a);
        let gv = self.value(gains);
        let mut out = Vec::with_capacity(av.len());
        for r in 0..rows {
            for j in 0..cols {
                out.push(av[r * cols + j] * gv[j]);
            }
        }
        self.build(self.shape(a).to_vec(), out, &[a, gains], Op::ScaleCols(a, gains))
    }

    /// Row-wise RMS normalization: y = x / sqrt(mean(x^2) + eps).
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("rms_norm eps {eps} must be > 0")));
        }
        let (rows, cols) = self.rows_cols(a, "rms_norm")?;
        let av = self.value(a);
        let mut out = Vec::with_capacity(av.len());
        for r in 0..rows {
            let row = &av[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            out.extend(row.iter().map(|v| v * inv));
        }
        self.build(self.shape(a).to_vec(), out, &[a], Op::RmsNorm(a, eps))
    }

    fn rows_cols(&self, a: Var, name: &str) -> Result<(usize, usize)> {
        let s = self.shape(a);
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(Error::Shape(format!("{name} needs rank 1 or 2, got {s:?}"))),
        }
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` tensor reachable from the loss; repeated calls
    /// without `zero_grads` accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on empty graph".into()));
        }
        if self.tensor(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        // Transient per-node adjoints for this sweep; folded into the
        // persistent tensor grads at the end.
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let go = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            for v in &go {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("gradient at node {i} is {v}")));
                }
            }
            self.propagate(i, &go, &mut adj)?;
            self.nodes[i].tensor.accumulate_grad(&go);
        }
        Ok(())
    }

    /// Apply node i's local gradient rule, adding contributions to the
    /// adjoints of its inputs.
    fn propagate(&self, i: usize, go: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let op = self.nodes[i].op.clone();
        let send = |g: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].tensor.requires_grad {
                return;
            }
            match &mut g[v.0] {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(&delta) {
                        *a += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(adj, a, go.to_vec());
                send(adj, b, go.to_vec());
            }
            Op::Sub(a, b) => {
                send(adj, a, go.to_vec());
                send(adj, b, go.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(a).to_vec();
                let bv = self.value(b).to_vec();
                send(adj, a, go.iter().zip(&bv).map(|(g, y)| g * y).collect());
                send(adj, b, go.iter().zip(&av).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => {
                send(adj, a, go.iter().map(|g| g * c).collect());
            }
            Op::AddScalar(a) => {
                send(adj, a, go.to_vec());
            }
            Op::Log(a) => {
                let av = self.value(a);
                send(adj, a, go.iter().zip(av).map(|(g, x)| g / x).collect());
            }
            Op::Exp(a) => {
                let out = self.value(Var(i));
                send(adj, a, go.iter().zip(out).map(|(g, y)| g * y).collect());
            }
            Op::Tanh(a) => {
                let out = self.value(Var(i));
                send(adj, a, go.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
            Op::Sum(a) => {
                let n = self.tensor(a).numel();
                send(adj, a, vec![go[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.tensor(a).numel();
                send(adj, a, vec![go[0] / n as f64; n]);
            }
            Op::LogAddExp(a, b) => {
                let av = self.value(a).to_vec();
                let bv = self.value(b).to_vec();
                send(
                    adj,
                    a,
                    go.iter()
                        .zip(av.iter().zip(&bv))
                        .map(|(g, (x, y))| g * sigmoid(x - y))
                        .collect(),
                );
                send(
                    adj,
                    b,
                    go.iter()
                        .zip(av.iter().zip(&bv))
                        .map(|(g, (x, y))| g * sigmoid(y - x))
                        .collect(),
                );
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let av = self.value(a);
                let bv = self.value(b);
                // dA = go . B^T
                let mut da = vec![0.0; m * k];
                for i2 in 0..m {
                    for j in 0..n {
                        let g = go[i2 * n + j];
                        if g == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i2 * k + p] += g * bv[p * n + j];
                        }
                    }
                }
                // dB = A^T . go
                let mut db = vec![0.0; k * n];
                for i2 in 0..m {
                    for p in 0..k {
                        let x = av[i2 * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += x * go[i2 * n + j];
                        }
                    }
                }
                send(adj, a, da);
                send(adj, b, db);
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                let mut da = vec![0.0; m * n];
                for r in 0..n {
                    for c in 0..m {
                        da[c * n + r] = go[r * m + c];
                    }
                }
                send(adj, a, da);
            }
            Op::Reshape(a) => {
                send(adj, a, go.to_vec());
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = self.rows_cols(a, "log_softmax")?;
                let out = self.value(Var(i));
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    let gsum: f64 = go[r * cols..(r + 1) * cols].iter().sum();
                    for j in 0..cols {
                        let idx = r * cols + j;
                        da[idx] = go[idx] - out[idx].exp() * gsum;
                    }
                }
                send(adj, a, da);
            }
            Op::Gather(a, ids) => {
                let cols = self.shape(a)[1];
                let mut da = vec![0.0; self.tensor(a).numel()];
                for (t, &id) in ids.iter().enumerate() {
                    da[t * cols + id] += go[t];
                }
                send(adj, a, da);
            }
            Op::SelectRows(a, ids) => {
                let cols = self.shape(a)[1];
                let mut da = vec![0.0; self.tensor(a).numel()];
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..cols {
                        da[id * cols + j] += go[t * cols + j];
                    }
                }
                send(adj, a, da);
            }
            Op::SliceCols(a, start, len) => {
                let (rows, cols) = (self.shape(a)[0], self.shape(a)[1]);
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for j in 0..len {
                        da[r * cols + start + j] = go[r * len + j];
                    }
                }
                send(adj, a, da);
            }
            Op::ConcatCols(parts) => {
                let rows = self.shape(Var(i))[0];
                let total = self.shape(Var(i))[1];
                let mut offset = 0;
                for &p in &parts {
                    let cols = self.shape(p)[1];
                    let mut dp = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            dp[r * cols + j] = go[r * total + offset + j];
                        }
                    }
                    send(adj, p, dp);
                    offset += cols;
                }
            }
            Op::AddBias(a, bias) => {
                let (rows, cols) = self.rows_cols(a, "add_bias")?;
                send(adj, a, go.to_vec());
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    for j in 0..cols {
                        db[j] += go[r * cols + j];
                    }
                }
                send(adj, bias, db);
            }
            Op::ScaleCols(a, gains) => {
                let (rows, cols) = self.rows_cols(a, "scale_cols")?;
                let av = self.value(a).to_vec();
                let gv = self.value(gains).to_vec();
                let mut da = vec![0.0; rows * cols];
                let mut dg = vec![0.0; cols];
                for r in 0..rows {
                    for j in 0..cols {
                        let idx = r * cols + j;
                        da[idx] = go[idx] * gv[j];
                        dg[j] += go[idx] * av[idx];
                    }
                }
                send(adj, a, da);
                send(adj, gains, dg);
            }
            Op::RmsNorm(a, eps) => {
                let (rows, cols) = self.rows_cols(a, "rms_norm")?;
                let av = self.value(a);
                let n = cols as f64;
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    let row = &av[r * cols..(r + 1) * cols];
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / n;
                    let rms = (ms + eps).sqrt();
                    let dot: f64 = go[r * cols..(r + 1) * cols]
                        .iter()
                        .zip(row)
                        .map(|(g, x)| g * x)
                        .sum();
                    let cubic = n * rms * rms * rms;
                    for j in 0..cols {
                        da[r * cols + j] = go[r * cols + j] / rms - row[j] * dot / cubic;
                    }
                }
                send(adj, a, da);
            }
        }
        Ok(())
    }
}

/// Stable log-softmax of one row into an output slice.
pub fn log_softmax_row_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Stable log-softmax of one row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    log_softmax_row_into(row, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng_values(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    /// Central-difference check of the tape gradient of a scalar f(x).
    fn fd_check<F>(shape: &[usize], seed: u64, tol: f64, f: F)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let numel: usize = shape.iter().product();
        let x0 = rng_values(numel, seed, -2.0, 2.0);
        let eval = |vals: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g
                .leaf(Tensor::new(shape.to_vec(), vals.to_vec()).unwrap())
                .unwrap();
            let y = f(&mut g, x);
            g.item(y)
        };
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::new(shape.to_vec(), x0.clone()).unwrap().with_grad())
            .unwrap();
        let y = f(&mut g, x);
        g.backward(y).unwrap();
        let analytic = g.grad(x).unwrap().to_vec();

        let h = 1e-5;
        for i in 0..numel {
            let mut plus = x0.clone();
            plus[i] += h;
            let mut minus = x0.clone();
            minus[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1.0);
            assert!(
                (analytic[i] - fd).abs() / denom <= tol,
                "coord {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g
            .constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let a = g
            .constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_annihilating() {
        let mut g = Graph::new();
        let a = g
            .constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let b = g
            .constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3, 4])).unwrap();
        let b = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        // gradient of sum(A.B) w.r.t. A, linear so the tolerance is tight
        let b0 = rng_values(8, 42, -2.0, 2.0);
        let bt = Tensor::new(vec![4, 2], b0).unwrap();
        fd_check(&[3, 4], 7, 1e-6, |g, x| {
            let b = g.constant(bt.clone()).unwrap();
            let c = g.matmul(x, b).unwrap();
            g.sum(c).unwrap()
        });
        // and w.r.t. B
        let a0 = rng_values(12, 43, -2.0, 2.0);
        let at = Tensor::new(vec![3, 4], a0).unwrap();
        fd_check(&[4, 2], 8, 1e-6, |g, x| {
            let a = g.constant(at.clone()).unwrap();
            let c = g.matmul(a, x).unwrap();
            g.sum(c).unwrap()
        });
    }

    #[test]
    fn log_softmax_symmetric_and_stable() {
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap())
            .unwrap();
        let y = g.log_softmax(x).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((g.value(y)[0] + ln2).abs() < 1e-15);
        assert!((g.value(y)[1] + ln2).abs() < 1e-15);

        // extreme logits must not overflow
        let x = g
            .leaf(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap())
            .unwrap();
        let y = g.log_softmax(x).unwrap();
        assert!(g.value(y)[0].abs() < 1e-12);
        assert!((g.value(y)[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn log_softmax_rows_are_normalized() {
        let vals = rng_values(24, 5, -3.0, 3.0);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![4, 6], vals).unwrap()).unwrap();
        let y = g.log_softmax(x).unwrap();
        for r in 0..4 {
            let s: f64 = g.value(y)[r * 6..(r + 1) * 6].iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
        }
    }

    #[test]
    fn gather_basic_and_errors() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::new(vec![2, 2], vec![0.1, 0.9, 0.7, 0.3]).unwrap())
            .unwrap();
        let out = g.gather(x, &[1, 0]).unwrap();
        assert_eq!(g.value(out), &[0.9, 0.7]);
        assert!(matches!(g.gather(x, &[2, 0]), Err(Error::Index(_))));
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        // log_softmax + gather + mean over random logits
        fd_check(&[3, 5], 11, 1e-4, |g, x| {
            let ls = g.log_softmax(x).unwrap();
            let picked = g.gather(ls, &[2, 0, 4]).unwrap();
            g.mean(picked).unwrap()
        });
        // remaining elementwise ops
        fd_check(&[2, 3], 12, 1e-4, |g, x| {
            let e = g.exp(x).unwrap();
            let one = g.constant(Tensor::filled(&[2, 3], 1.0)).unwrap();
            let ep1 = g.add(e, one).unwrap();
            let l = g.log(ep1).unwrap();
            let t = g.tanh(l).unwrap();
            g.sum(t).unwrap()
        });
        fd_check(&[2, 4], 13, 1e-4, |g, x| {
            let other = g
                .constant(Tensor::new(vec![2, 4], rng_values(8, 99, -2.0, 2.0)).unwrap())
                .unwrap();
            let lae = g.log_add_exp(x, other).unwrap();
            let sq = g.mul(lae, lae).unwrap();
            g.mean(sq).unwrap()
        });
        fd_check(&[3, 4], 14, 1e-4, |g, x| {
            let n = g.rms_norm(x, 1e-6).unwrap();
            let gains = g
                .constant(Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 1.5]).unwrap())
                .unwrap();
            let s = g.scale_cols(n, gains).unwrap();
            let b = g
                .constant(Tensor::new(vec![4], vec![0.1, 0.2, -0.3, 0.0]).unwrap())
                .unwrap();
            let out = g.add_bias(s, b).unwrap();
            g.sum(out).unwrap()
        });
        fd_check(&[4, 4], 15, 1e-4, |g, x| {
            let t = g.transpose(x).unwrap();
            let left = g.slice_cols(t, 0, 2).unwrap();
            let right = g.slice_cols(t, 2, 2).unwrap();
            let cat = g.concat_cols(&[right, left]).unwrap();
            let picked = g.select_rows(cat, &[3, 1, 1]).unwrap();
            let r = g.reshape(picked, vec![12]).unwrap();
            let sq = g.mul(r, r).unwrap();
            g.sum(sq).unwrap()
        });
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad())
            .unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_zero_scale_gives_zeros() {
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap().with_grad())
            .unwrap();
        let z = g.scale(x, 0.0).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_constant_wrt_x_is_exact_zero() {
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::new(vec![2], vec![0.3, 0.7]).unwrap().with_grad())
            .unwrap();
        let c = g.constant(Tensor::new(vec![2], vec![5.0, 6.0]).unwrap()).unwrap();
        let zero = g.scale(x, 0.0).unwrap();
        let y = g.add(c, zero).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad())
            .unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad())
            .unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        assert!(matches!(g.log(x), Err(Error::NonFinite(_))));
        let big = g.constant(Tensor::new(vec![1], vec![1000.0]).unwrap()).unwrap();
        assert!(matches!(g.exp(big), Err(Error::NonFinite(_))));
    }

    #[test]
    fn log_add_exp_is_overflow_safe() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1], vec![1000.0]).unwrap()).unwrap();
        let b = g.constant(Tensor::new(vec![1], vec![-1000.0]).unwrap()).unwrap();
        let c = g.log_add_exp(a, b).unwrap();
        assert!((g.value(c)[0] - 1000.0).abs() < 1e-12);
    }
}
