//! Minimal reverse-mode automatic differentiation over dense 2-D `f64`
//! tensors.
//!
//! A [`Graph`] is a single-use tape: building an op evaluates it eagerly and
//! records enough structure for [`Graph::backward`] to accumulate gradients
//! into every reachable parameter leaf. Shapes are `(rows, cols)`; scalars
//! are `1x1`. The op set is deliberately small: exactly what the networks in
//! this crate need, each with a hand-derived adjoint.

mod fdcheck;
mod store;

pub use fdcheck::{check_grads, numeric_grad};
pub use store::{clip_global_norm, AdamHyper, ParamStore};

use thiserror::Error;

/// Clamp bound used inside the binary cross entropy loss.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("parameter {0} already registered")]
    DuplicateParam(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("no gradient supplied for parameter {0}")]
    MissingGradient(String),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersionMismatch { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    CheckpointMalformed(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("backward target must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
}

/// Handle to a node in a [`Graph`]. Only valid for the graph that minted it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant input; never receives gradient.
    Constant,
    /// Leaf bound to a named parameter in a [`ParamStore`].
    Param(String),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// `[m,n] + [1,n]`, row broadcast.
    AddRow(Var, Var),
    /// `[m,n] + [1,1]`, full broadcast.
    AddScalar(Var, Var),
    Mul(Var, Var),
    /// `[m,n] * [m,1]`, column broadcast.
    MulCol(Var, Var),
    ScaleConst(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanAll(Var),
    Pick(Var, usize, usize),
    Bce(Var, Vec<f64>),
    Mse(Var, Vec<f64>),
    Huber(Var, Vec<f64>, f64),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Single-use computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let grad = if needs_grad { vec![0.0; rows * cols] } else { Vec::new() };
        self.nodes.push(Node { rows, cols, value, grad, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Scalar convenience accessor; panics if `v` is not `1x1`.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert!(n.rows == 1 && n.cols == 1, "scalar() on {}x{} tensor", n.rows, n.cols);
        n.value[0]
    }

    /// Gradient of the last `backward` target w.r.t. `v` (zeros if `v` is a
    /// constant or unreached).
    pub fn grad(&self, v: Var) -> Vec<f64> {
        let n = &self.nodes[v.0];
        if n.needs_grad {
            n.grad.clone()
        } else {
            vec![0.0; n.rows * n.cols]
        }
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "constant",
                detail: format!("{} values for {}x{}", data.len(), rows, cols),
            });
        }
        Ok(self.push(rows, cols, data, Op::Constant, false))
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.push(1, 1, vec![x], Op::Constant, false)
    }

    /// Leaf that reads its value from `store` and routes gradient back under
    /// the parameter's name.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, TensorError> {
        let (rows, cols, values) = store.fetch(name)?;
        Ok(self.push(rows, cols, values, Op::Param(name.to_string()), true))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{}x{} . {}x{}", m, k, k2, n),
            });
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let ng = self.needs(a);
        self.push(n, m, out, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("add", a, b, |x, y| x + y, |a, b| Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("mul", a, b, |x, y| x * y, |a, b| Op::Mul(a, b))
    }

    fn zip(
        &mut self,
        opname: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var) -> Op,
    ) -> Result<Var, TensorError> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (m, n) {
            let (bm, bn) = self.shape(b);
            return Err(TensorError::ShapeMismatch {
                op: opname,
                detail: format!("{}x{} vs {}x{}", m, n, bm, bn),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, mk(a, b), ng))
    }

    /// `[m,n] + [1,n]` with the row vector broadcast down the rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (m, n) = self.shape(a);
        let (rm, rn) = self.shape(row);
        if rm != 1 || rn != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                detail: format!("{}x{} + {}x{}", m, n, rm, rn),
            });
        }
        let rv = self.nodes[row.0].value.clone();
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(idx, &x)| x + rv[idx % n])
            .collect();
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(m, n, out, Op::AddRow(a, row), ng))
    }

    /// `[m,n] + [1,1]` with the scalar broadcast everywhere.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let (m, n) = self.shape(a);
        if self.shape(s) != (1, 1) {
            let (sm, sn) = self.shape(s);
            return Err(TensorError::ShapeMismatch {
                op: "add_scalar",
                detail: format!("scalar operand is {}x{}", sm, sn),
            });
        }
        let sv = self.nodes[s.0].value[0];
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| x + sv).collect();
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(m, n, out, Op::AddScalar(a, s), ng))
    }

    /// `[m,n] * [m,1]` with the column vector broadcast across the columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, TensorError> {
        let (m, n) = self.shape(a);
        let (cm, cn) = self.shape(col);
        if cm != m || cn != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "mul_col",
                detail: format!("{}x{} * {}x{}", m, n, cm, cn),
            });
        }
        let cv = self.nodes[col.0].value.clone();
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(idx, &x)| x * cv[idx / n])
            .collect();
        let ng = self.needs(a) || self.needs(col);
        Ok(self.push(m, n, out, Op::MulCol(a, col), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| x * k).collect();
        let ng = self.needs(a);
        self.push(m, n, out, Op::ScaleConst(a, k), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| x.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(m, n, out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let ng = self.needs(a);
        self.push(m, n, out, Op::Sigmoid(a), ng)
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        let ng = self.needs(a);
        self.push(m, n, out, Op::SoftmaxRows(a), ng)
    }

    /// Horizontal concatenation; all inputs must share the row count.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                detail: "empty input list".into(),
            });
        }
        let (m, _) = self.shape(xs[0]);
        let mut total = 0;
        for &x in xs {
            let (xm, xn) = self.shape(x);
            if xm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts {} vs {}", m, xm),
                });
            }
            total += xn;
        }
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for &x in xs {
            let (_, xn) = self.shape(x);
            let xv = &self.nodes[x.0].value;
            for i in 0..m {
                out[i * total + off..i * total + off + xn]
                    .copy_from_slice(&xv[i * xn..(i + 1) * xn]);
            }
            off += xn;
        }
        let ng = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(m, total, out, Op::ConcatCols(xs.to_vec()), ng))
    }

    /// Select rows of `a` by index (duplicates allowed); gradient scatters
    /// back additively.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (m, n) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("row index {} out of {} rows", bad, m),
            });
        }
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; idx.len() * n];
        for (r, &i) in idx.iter().enumerate() {
            out[r * n..(r + 1) * n].copy_from_slice(&av[i * n..(i + 1) * n]);
        }
        let ng = self.needs(a);
        Ok(self.push(idx.len(), n, out, Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Mean of every element, producing a `1x1` scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let ng = self.needs(a);
        self.push(1, 1, vec![s / (m * n) as f64], Op::MeanAll(a), ng)
    }

    /// Extract element `(i, j)` as a `1x1` scalar.
    pub fn pick(&mut self, a: Var, i: usize, j: usize) -> Result<Var, TensorError> {
        let (m, n) = self.shape(a);
        if i >= m || j >= n {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                detail: format!("({}, {}) out of {}x{}", i, j, m, n),
            });
        }
        let v = self.nodes[a.0].value[i * n + j];
        let ng = self.needs(a);
        Ok(self.push(1, 1, vec![v], Op::Pick(a, i, j), ng))
    }

    /// Elementwise mean of a non-empty list of same-shaped tensors.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "mean_of",
                detail: "empty input list".into(),
            });
        }
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(self.scale(acc, 1.0 / xs.len() as f64))
    }

    /// Mean binary cross entropy of predictions `p` (already in (0,1))
    /// against constant targets, clamped to `[BCE_EPS, 1-BCE_EPS]`.
    pub fn bce_loss(&mut self, p: Var, targets: &[f64]) -> Result<Var, TensorError> {
        let (m, n) = self.shape(p);
        if targets.len() != m * n {
            return Err(TensorError::ShapeMismatch {
                op: "bce_loss",
                detail: format!("{} targets for {}x{}", targets.len(), m, n),
            });
        }
        let total: f64 = self.nodes[p.0]
            .value
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let count = (m * n) as f64;
        let ng = self.needs(p);
        Ok(self.push(1, 1, vec![total / count], Op::Bce(p, targets.to_vec()), ng))
    }

    /// Mean squared error against constant targets.
    pub fn mse_loss(&mut self, p: Var, targets: &[f64]) -> Result<Var, TensorError> {
        let (m, n) = self.shape(p);
        if targets.len() != m * n {
            return Err(TensorError::ShapeMismatch {
                op: "mse_loss",
                detail: format!("{} targets for {}x{}", targets.len(), m, n),
            });
        }
        let total: f64 = self.nodes[p.0]
            .value
            .iter()
            .zip(targets)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let count = (m * n) as f64;
        let ng = self.needs(p);
        Ok(self.push(1, 1, vec![total / count], Op::Mse(p, targets.to_vec()), ng))
    }

    /// Mean Huber loss with threshold `delta` against constant targets.
    pub fn huber_loss(&mut self, p: Var, targets: &[f64], delta: f64) -> Result<Var, TensorError> {
        let (m, n) = self.shape(p);
        if targets.len() != m * n {
            return Err(TensorError::ShapeMismatch {
                op: "huber_loss",
                detail: format!("{} targets for {}x{}", targets.len(), m, n),
            });
        }
        let total: f64 = self.nodes[p.0]
            .value
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let e = (p - t).abs();
                if e <= delta {
                    0.5 * e * e
                } else {
                    delta * (e - 0.5 * delta)
                }
            })
            .sum();
        let count = (m * n) as f64;
        let ng = self.needs(p);
        Ok(self.push(1, 1, vec![total / count], Op::Huber(p, targets.to_vec(), delta), ng))
    }

    /// Fully connected layer: `x . W + b` with `b` broadcast per row.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Single-head self-attention over the rows of `h`:
    /// `softmax(QK^T / sqrt(d)) . V` with learned projections.
    pub fn self_attention(
        &mut self,
        h: Var,
        wq: Var,
        wk: Var,
        wv: Var,
    ) -> Result<Var, TensorError> {
        let q = self.matmul(h, wq)?;
        let k = self.matmul(h, wk)?;
        let v = self.matmul(h, wv)?;
        let (_, d) = self.shape(q);
        let kt = self.transpose(k);
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = self.softmax_rows(scaled);
        self.matmul(attn, v)
    }

    /// Accumulate gradients of scalar `loss` into every parameter leaf and
    /// return them keyed by parameter name. Reaching the same parameter
    /// through several leaves sums the contributions.
    pub fn backward(
        &mut self,
        loss: Var,
    ) -> Result<std::collections::BTreeMap<String, Vec<f64>>, TensorError> {
        let (m, n) = self.shape(loss);
        if (m, n) != (1, 1) {
            return Err(TensorError::NonScalarLoss { rows: m, cols: n });
        }
        if self.nodes[loss.0].needs_grad {
            self.nodes[loss.0].grad[0] = 1.0;
        }
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let grad = std::mem::take(&mut self.nodes[id].grad);
            self.propagate(id, &grad);
            self.nodes[id].grad = grad;
        }
        let mut out: std::collections::BTreeMap<String, Vec<f64>> = std::collections::BTreeMap::new();
        for node in &self.nodes {
            if let Op::Param(name) = &node.op {
                match out.get_mut(name) {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&node.grad) {
                            *a += g;
                        }
                    }
                    None => {
                        out.insert(name.clone(), node.grad.clone());
                    }
                }
            }
        }
        Ok(out)
    }

    fn bump(&mut self, v: Var, idx: usize, by: f64) {
        if self.nodes[v.0].needs_grad {
            self.nodes[v.0].grad[idx] += by;
        }
    }

    fn propagate(&mut self, id: usize, dy: &[f64]) {
        let op = self.nodes[id].op.clone();
        let (m, n) = (self.nodes[id].rows, self.nodes[id].cols);
        match op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (_, k) = self.shape(a);
                if self.needs(a) {
                    let bv = self.nodes[b.0].value.clone();
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += dy[i * n + j] * bv[p * n + j];
                            }
                            self.bump(a, i * k + p, s);
                        }
                    }
                }
                if self.needs(b) {
                    let av = self.nodes[a.0].value.clone();
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += av[i * k + p] * dy[i * n + j];
                            }
                            self.bump(b, p * n + j, s);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                for i in 0..m {
                    for j in 0..n {
                        self.bump(a, j * m + i, dy[i * n + j]);
                    }
                }
            }
            Op::Add(a, b) => {
                for (idx, &g) in dy.iter().enumerate() {
                    self.bump(a, idx, g);
                    self.bump(b, idx, g);
                }
            }
            Op::AddRow(a, r) => {
                for (idx, &g) in dy.iter().enumerate() {
                    self.bump(a, idx, g);
                    self.bump(r, idx % n, g);
                }
            }
            Op::AddScalar(a, s) => {
                for (idx, &g) in dy.iter().enumerate() {
                    self.bump(a, idx, g);
                    self.bump(s, 0, g);
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                for (idx, &g) in dy.iter().enumerate() {
                    self.bump(a, idx, g * bv[idx]);
                    self.bump(b, idx, g * av[idx]);
                }
            }
            Op::MulCol(a, c) => {
                let av = self.nodes[a.0].value.clone();
                let cv = self.nodes[c.0].value.clone();
                for (idx, &g) in dy.iter().enumerate() {
                    self.bump(a, idx, g * cv[idx / n]);
                    self.bump(c, idx / n, g * av[idx]);
                }
            }
            Op::ScaleConst(a, k) => {
                for (idx, &g) in dy.iter().enumerate() {
                    self.bump(a, idx, g * k);
                }
            }
            Op::Relu(a) => {
                let av = self.nodes[a.0].value.clone();
                for (idx, &g) in dy.iter().enumerate() {
                    if av[idx] > 0.0 {
                        self.bump(a, idx, g);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let yv = self.nodes[id].value.clone();
                for (idx, &g) in dy.iter().enumerate() {
                    self.bump(a, idx, g * yv[idx] * (1.0 - yv[idx]));
                }
            }
            Op::SoftmaxRows(a) => {
                let yv = self.nodes[id].value.clone();
                for i in 0..m {
                    let row = &yv[i * n..(i + 1) * n];
                    let dot: f64 = (0..n).map(|j| dy[i * n + j] * row[j]).sum();
                    for j in 0..n {
                        self.bump(a, i * n + j, row[j] * (dy[i * n + j] - dot));
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let mut off = 0;
                for x in xs {
                    let (_, xn) = self.shape(x);
                    if self.needs(x) {
                        for i in 0..m {
                            for j in 0..xn {
                                self.bump(x, i * xn + j, dy[i * n + off + j]);
                            }
                        }
                    }
                    off += xn;
                }
            }
            Op::GatherRows(a, idx) => {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        self.bump(a, src * n + j, dy[r * n + j]);
                    }
                }
            }
            Op::MeanAll(a) => {
                let (am, an) = self.shape(a);
                let g = dy[0] / (am * an) as f64;
                for idx in 0..am * an {
                    self.bump(a, idx, g);
                }
            }
            Op::Pick(a, i, j) => {
                let (_, an) = self.shape(a);
                self.bump(a, i * an + j, dy[0]);
            }
            Op::Bce(p, targets) => {
                let pv = self.nodes[p.0].value.clone();
                let g = dy[0] / targets.len() as f64;
                for (idx, (&pi, &t)) in pv.iter().zip(&targets).enumerate() {
                    if pi > BCE_EPS && pi < 1.0 - BCE_EPS {
                        self.bump(p, idx, g * (pi - t) / (pi * (1.0 - pi)));
                    }
                }
            }
            Op::Mse(p, targets) => {
                let pv = self.nodes[p.0].value.clone();
                let g = 2.0 * dy[0] / targets.len() as f64;
                for (idx, (&pi, &t)) in pv.iter().zip(&targets).enumerate() {
                    self.bump(p, idx, g * (pi - t));
                }
            }
            Op::Huber(p, targets, delta) => {
                let pv = self.nodes[p.0].value.clone();
                let g = dy[0] / targets.len() as f64;
                for (idx, (&pi, &t)) in pv.iter().zip(&targets).enumerate() {
                    let e = pi - t;
                    let d = if e.abs() <= delta { e } else { delta * e.signum() };
                    self.bump(p, idx, g * d);
                }
            }
        }
    }
}
