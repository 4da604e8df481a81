//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive in creation order, so record order
//! is a valid topological order. Leaves carry a `requires_grad` flag;
//! gradients only flow into nodes that (transitively) depend on such a
//! leaf, which is how frozen parameters stay frozen. Gradients accumulate
//! across [`Tape::backward`] calls until [`Tape::zero_grad`].
//!
//! Row softmax subtracts the row maximum before exponentiating. This only
//! guards against overflow; the returned probabilities are mathematically
//! unchanged.

use crate::error::{Error, Result};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Layer-norm variance epsilon (inside the square root).
pub const LAYER_NORM_EPS: f64 = 1e-5;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// `a [r×c] + row [1×c]` broadcast down the rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    /// `a [r×c] ⊙ row [1×c]` broadcast down the rows.
    MulRow(Var, Var),
    Scale(Var, f64),
    Shift(Var, f64),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Gelu(Var),
    Concat { parts: Vec<Var>, axis: Axis },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    /// Mean along `axis`: `Rows` collapses rows to a `1×c` row,
    /// `Cols` collapses columns to an `r×1` column.
    Mean { x: Var, axis: Axis },
    Sum(Var),
    L2Norm(Var),
    Cosine(Var, Var),
    CosineGram(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::MulRow(a, b)
            | Op::Cosine(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Shift(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::SoftmaxRows(a)
            | Op::Gelu(a)
            | Op::Sum(a)
            | Op::L2Norm(a)
            | Op::CosineGram(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.clone(),
            Op::SliceRows { x, .. } | Op::SliceCols { x, .. } | Op::Mean { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    zero_norm_events: usize,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-row mean and reciprocal standard deviation.
fn layer_norm_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Forward evaluation of a single primitive. Shared by recording and replay.
/// Returns the value and the number of zero-norm vectors encountered.
fn eval(op: &Op, nodes: &[Node]) -> Result<(Tensor, usize)> {
    let v = |var: &Var| &nodes[var.0].value;
    let mut zero_norm = 0;
    let out = match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => v(a).matmul(v(b))?,
        Op::Transpose(a) => v(a).transpose(),
        Op::Add(a, b) => {
            let (a, b) = (v(a), v(b));
            if a.shape() != b.shape() {
                return Err(mismatch("add", a, b));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Tensor::new(a.rows(), a.cols(), data)?
        }
        Op::AddRow(a, r) | Op::MulRow(a, r) => {
            let (a, row) = (v(a), v(r));
            if row.rows() != 1 || row.cols() != a.cols() {
                return Err(mismatch("row broadcast", a, row));
            }
            let add = matches!(op, Op::AddRow(..));
            let mut data = a.data().to_vec();
            for chunk in data.chunks_mut(a.cols()) {
                for (x, &y) in chunk.iter_mut().zip(row.data()) {
                    if add {
                        *x += y;
                    } else {
                        *x *= y;
                    }
                }
            }
            Tensor::new(a.rows(), a.cols(), data)?
        }
        Op::Mul(a, b) => {
            let (a, b) = (v(a), v(b));
            if a.shape() != b.shape() {
                return Err(mismatch("mul", a, b));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::new(a.rows(), a.cols(), data)?
        }
        Op::Scale(a, s) => v(a).map(|x| x * s),
        Op::Shift(a, s) => v(a).map(|x| x + s),
        Op::Exp(a) => v(a).map(f64::exp),
        Op::Log(a) => {
            let a = v(a);
            if let Some(&bad) = a.data().iter().find(|&&x| x <= 0.0) {
                return Err(Error::LogDomain { value: bad });
            }
            a.map(f64::ln)
        }
        Op::SoftmaxRows(a) => {
            let a = v(a);
            let mut data = vec![0.0; a.len()];
            for (src, dst) in a.data().chunks(a.cols()).zip(data.chunks_mut(a.cols())) {
                softmax_row(src, dst);
            }
            Tensor::new(a.rows(), a.cols(), data)?
        }
        Op::LayerNorm { x, gamma, beta } => {
            let (x, g, b) = (v(x), v(gamma), v(beta));
            if g.shape() != [1, x.cols()] {
                return Err(mismatch("layer_norm gamma", x, g));
            }
            if b.shape() != [1, x.cols()] {
                return Err(mismatch("layer_norm beta", x, b));
            }
            let mut data = vec![0.0; x.len()];
            for (src, dst) in x.data().chunks(x.cols()).zip(data.chunks_mut(x.cols())) {
                let (mean, rstd) = layer_norm_stats(src);
                for (c, d) in dst.iter_mut().enumerate() {
                    *d = (src[c] - mean) * rstd * g.data()[c] + b.data()[c];
                }
            }
            Tensor::new(x.rows(), x.cols(), data)?
        }
        Op::Gelu(a) => v(a).map(gelu),
        Op::Concat { parts, axis } => {
            let first = v(&parts[0]);
            match axis {
                Axis::Rows => {
                    let mut data = Vec::new();
                    let mut rows = 0;
                    for p in parts {
                        let t = v(p);
                        if t.cols() != first.cols() {
                            return Err(mismatch("concat rows", first, t));
                        }
                        rows += t.rows();
                        data.extend_from_slice(t.data());
                    }
                    Tensor::new(rows, first.cols(), data)?
                }
                Axis::Cols => {
                    let cols: usize = parts.iter().map(|p| v(p).cols()).sum();
                    for p in parts {
                        if v(p).rows() != first.rows() {
                            return Err(mismatch("concat cols", first, v(p)));
                        }
                    }
                    let mut data = Vec::with_capacity(first.rows() * cols);
                    for r in 0..first.rows() {
                        for p in parts {
                            data.extend_from_slice(v(p).row_slice(r));
                        }
                    }
                    Tensor::new(first.rows(), cols, data)?
                }
            }
        }
        Op::SliceRows { .. } | Op::SliceCols { .. } => unreachable!("slices carry their extent"),
        Op::Mean { x, axis } => {
            let x = v(x);
            match axis {
                Axis::Rows => {
                    let mut data = vec![0.0; x.cols()];
                    for row in x.data().chunks(x.cols()) {
                        for (d, &r) in data.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    let n = x.rows() as f64;
                    data.iter_mut().for_each(|d| *d /= n);
                    Tensor::new(1, x.cols(), data)?
                }
                Axis::Cols => {
                    let n = x.cols() as f64;
                    let data = x.data().chunks(x.cols()).map(|r| r.iter().sum::<f64>() / n).collect();
                    Tensor::new(x.rows(), 1, data)?
                }
            }
        }
        Op::Sum(a) => Tensor::scalar(v(a).data().iter().sum()),
        Op::L2Norm(a) => Tensor::scalar(v(a).norm_l2()),
        Op::Cosine(a, b) => {
            let (a, b) = (v(a), v(b));
            if a.shape() != b.shape() {
                return Err(mismatch("cosine", a, b));
            }
            let (na, nb) = (a.norm_l2(), b.norm_l2());
            if na == 0.0 || nb == 0.0 {
                zero_norm += 1;
                Tensor::scalar(0.0)
            } else {
                Tensor::scalar(dot(a.data(), b.data()) / (na * nb))
            }
        }
        Op::CosineGram(a) => {
            let a = v(a);
            let (units, zeros) = unit_rows(a);
            zero_norm += zeros;
            let mut data = vec![0.0; a.rows() * a.rows()];
            matmul_nt(&units, &units, &mut data, a.rows(), a.cols(), a.rows());
            Tensor::new(a.rows(), a.rows(), data)?
        }
    };
    Ok((out, zero_norm))
}

/// Rows scaled to unit length; zero rows stay zero. Returns the count of zero rows.
fn unit_rows(a: &Tensor) -> (Vec<f64>, usize) {
    let mut units = a.data().to_vec();
    let mut zeros = 0;
    for row in units.chunks_mut(a.cols()) {
        let n = dot(row, row).sqrt();
        if n == 0.0 {
            zeros += 1;
        } else {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    (units, zeros)
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

    /// Number of zero-norm vectors met by cosine kernels (their cosines are taken as 0).
    pub fn zero_norm_events(&self) -> usize {
        self.zero_norm_events
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input handles of the operation that produced `v`.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Accumulated gradient of `v`; zeros if nothing reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.grads[v.0] {
            Some(g) => Tensor::new(value.rows(), value.cols(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(value.rows(), value.cols()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let (value, zero_norm) = eval(&op, &self.nodes)?;
        self.zero_norm_events += zero_norm;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push(op, value, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.record(Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.record(Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(Op::Scale(a, s))
    }

    pub fn shift(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(Op::Shift(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Log(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.record(Op::LayerNorm { x, gamma, beta })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Gelu(a))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::config("concat of zero tensors"));
        }
        self.record(Op::Concat {
            parts: parts.to_vec(),
            axis,
        })
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        if len == 0 || start + len > src.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: src.shape(),
                rhs: [start, len],
            });
        }
        let value = Tensor::new(len, src.cols(), src.data()[start * src.cols()..(start + len) * src.cols()].to_vec())?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::SliceRows { x, start }, value, rg))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        if len == 0 || start + len > src.cols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: src.shape(),
                rhs: [start, len],
            });
        }
        let mut data = Vec::with_capacity(src.rows() * len);
        for r in 0..src.rows() {
            data.extend_from_slice(&src.row_slice(r)[start..start + len]);
        }
        let value = Tensor::new(src.rows(), len, data)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::SliceCols { x, start }, value, rg))
    }

    pub fn mean(&mut self, x: Var, axis: Axis) -> Result<Var> {
        self.record(Op::Mean { x, axis })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sum(x))
    }

    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        self.record(Op::L2Norm(x))
    }

    /// Cosine similarity of two same-shape tensors; 0 if either has zero norm.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Cosine(a, b))
    }

    /// All-pairs cosine similarity between the rows of `x` (`r×r`).
    /// Zero rows give zero similarity with everything, including themselves.
    pub fn cosine_gram(&mut self, x: Var) -> Result<Var> {
        self.record(Op::CosineGram(x))
    }

    /// Re-evaluates every recorded operation from the leaves and returns the
    /// resulting values in record order.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut replayed: Vec<Node> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::SliceRows { x, start } => {
                    let src = &replayed[x.0].value;
                    let len = node.value.rows();
                    Tensor::new(len, src.cols(), src.data()[start * src.cols()..(start + len) * src.cols()].to_vec())?
                }
                Op::SliceCols { x, start } => {
                    let src = &replayed[x.0].value;
                    let len = node.value.cols();
                    let mut data = Vec::new();
                    for r in 0..src.rows() {
                        data.extend_from_slice(&src.row_slice(r)[*start..start + len]);
                    }
                    Tensor::new(src.rows(), len, data)?
                }
                op => eval(op, &replayed)?.0,
            };
            replayed.push(Node {
                op: node.op.clone(),
                value,
                requires_grad: node.requires_grad,
            });
        }
        Ok(replayed.into_iter().map(|n| n.value).collect())
    }

    /// Reverse sweep from a scalar `loss`, accumulating into existing grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        // Local adjoints for this sweep; merged into `self.grads` at the end.
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !matches!(node.op, Op::Leaf) {
                self.propagate(id, &g, &mut adj);
            }
            match &mut self.grads[id] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[id].value;
        let val = |v: &Var| &nodes[v.0].value;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        let mut accum = |v: &Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };

        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                accum(a, &mut |s| matmul_nt(g, bv.data(), s, m, n, k));
                accum(b, &mut |s| matmul_tn(av.data(), g, s, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                accum(a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                accum(a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                accum(b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::AddRow(a, r) => {
                let c = out.cols();
                accum(a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                accum(r, &mut |s| {
                    for row in g.chunks(c) {
                        s.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                accum(a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv.data()[i];
                    }
                });
                accum(b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av.data()[i];
                    }
                });
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (val(a), val(r));
                let c = out.cols();
                accum(a, &mut |s| {
                    for (i, x) in s.iter_mut().enumerate() {
                        *x += g[i] * rv.data()[i % c];
                    }
                });
                accum(r, &mut |s| {
                    for (i, (gi, ai)) in g.iter().zip(av.data()).enumerate() {
                        s[i % c] += gi * ai;
                    }
                });
            }
            Op::Scale(a, f) => accum(a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y * f)),
            Op::Shift(a, _) => accum(a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::Exp(a) => accum(a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * out.data()[i];
                }
            }),
            Op::Log(a) => {
                let av = val(a);
                accum(a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / av.data()[i];
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                accum(a, &mut |s| {
                    for ((srow, grow), prow) in s.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let inner = dot(grow, prow);
                        for j in 0..c {
                            srow[j] += prow[j] * (grow[j] - inner);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (xv, gv) = (val(x), val(gamma));
                let c = xv.cols();
                let n = c as f64;
                if wants(x) {
                    accum(x, &mut |s| {
                        for ((srow, grow), xrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(xv.data().chunks(c)) {
                            let (mean, rstd) = layer_norm_stats(xrow);
                            let mut sum_dy = 0.0;
                            let mut sum_dy_xhat = 0.0;
                            for j in 0..c {
                                let dy = grow[j] * gv.data()[j];
                                let xhat = (xrow[j] - mean) * rstd;
                                sum_dy += dy;
                                sum_dy_xhat += dy * xhat;
                            }
                            for j in 0..c {
                                let dy = grow[j] * gv.data()[j];
                                let xhat = (xrow[j] - mean) * rstd;
                                srow[j] += rstd * (dy - sum_dy / n - xhat * sum_dy_xhat / n);
                            }
                        }
                    });
                }
                accum(gamma, &mut |s| {
                    for (grow, xrow) in g.chunks(c).zip(xv.data().chunks(c)) {
                        let (mean, rstd) = layer_norm_stats(xrow);
                        for j in 0..c {
                            s[j] += grow[j] * (xrow[j] - mean) * rstd;
                        }
                    }
                });
                accum(beta, &mut |s| {
                    for grow in g.chunks(c) {
                        s.iter_mut().zip(grow).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Gelu(a) => {
                let av = val(a);
                accum(a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * gelu_grad(av.data()[i]);
                    }
                });
            }
            Op::Concat { parts, axis } => match axis {
                Axis::Rows => {
                    let mut offset = 0;
                    for p in parts {
                        let len = val(p).len();
                        let seg = &g[offset..offset + len];
                        accum(p, &mut |s| s.iter_mut().zip(seg).for_each(|(x, y)| *x += y));
                        offset += len;
                    }
                }
                Axis::Cols => {
                    let total = out.cols();
                    let mut col = 0;
                    for p in parts {
                        let pc = val(p).cols();
                        accum(p, &mut |s| {
                            for (r, srow) in s.chunks_mut(pc).enumerate() {
                                let grow = &g[r * total + col..r * total + col + pc];
                                srow.iter_mut().zip(grow).for_each(|(x, y)| *x += y);
                            }
                        });
                        col += pc;
                    }
                }
            },
            Op::SliceRows { x, start } => {
                let c = out.cols();
                accum(x, &mut |s| {
                    let seg = &mut s[start * c..start * c + g.len()];
                    seg.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                });
            }
            Op::SliceCols { x, start } => {
                let (len, src_cols) = (out.cols(), val(x).cols());
                accum(x, &mut |s| {
                    for (r, grow) in g.chunks(len).enumerate() {
                        let seg = &mut s[r * src_cols + start..r * src_cols + start + len];
                        seg.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Mean { x, axis } => {
                let xv = val(x);
                let (r, c) = (xv.rows(), xv.cols());
                accum(x, &mut |s| match axis {
                    Axis::Rows => {
                        for srow in s.chunks_mut(c) {
                            for j in 0..c {
                                srow[j] += g[j] / r as f64;
                            }
                        }
                    }
                    Axis::Cols => {
                        for (i, srow) in s.chunks_mut(c).enumerate() {
                            srow.iter_mut().for_each(|x| *x += g[i] / c as f64);
                        }
                    }
                });
            }
            Op::Sum(a) => accum(a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::L2Norm(a) => {
                let av = val(a);
                let n = out.item();
                if n > 0.0 {
                    accum(a, &mut |s| {
                        for i in 0..s.len() {
                            s[i] += g[0] * av.data()[i] / n;
                        }
                    });
                }
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (na, nb) = (av.norm_l2(), bv.norm_l2());
                if na > 0.0 && nb > 0.0 {
                    let cos = out.item();
                    accum(a, &mut |s| {
                        for i in 0..s.len() {
                            s[i] += g[0] * (bv.data()[i] / (na * nb) - cos * av.data()[i] / (na * na));
                        }
                    });
                    accum(b, &mut |s| {
                        for i in 0..s.len() {
                            s[i] += g[0] * (av.data()[i] / (na * nb) - cos * bv.data()[i] / (nb * nb));
                        }
                    });
                }
            }
            Op::CosineGram(a) => {
                let av = val(a);
                let (r, c) = (av.rows(), av.cols());
                let (units, _) = unit_rows(av);
                // dU = (G + Gᵀ) U, then project each row off its unit vector.
                let mut sym = vec![0.0; r * r];
                for i in 0..r {
                    for j in 0..r {
                        sym[i * r + j] = g[i * r + j] + g[j * r + i];
                    }
                }
                let mut du = vec![0.0; r * c];
                matmul_nn(&sym, &units, &mut du, r, r, c);
                accum(a, &mut |s| {
                    for i in 0..r {
                        let xrow = &av.data()[i * c..(i + 1) * c];
                        let n = dot(xrow, xrow).sqrt();
                        if n == 0.0 {
                            continue;
                        }
                        let urow = &units[i * c..(i + 1) * c];
                        let durow = &du[i * c..(i + 1) * c];
                        let along = dot(urow, durow);
                        for j in 0..c {
                            s[i * c + j] += (durow[j] - urow[j] * along) / n;
                        }
                    }
                });
            }
        }
    }
}
