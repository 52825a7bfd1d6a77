//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] owns every array of one forward pass. Arrays are addressed by
//! [`Var`] handles; each primitive appends one node whose inputs precede it,
//! so the node list is always in topological order. [`Tape::backward`] walks
//! it once in reverse. Tapes are meant to be rebuilt per training step.
//!
//! Vectors are `1 × n` matrices and scalars are `1 × 1`. Broadcasting exists
//! only in [`Tape::add`] / [`Tape::sub`], where a `1 × n` right operand is
//! repeated over the rows (the batch dimension) of the left one.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Inputs to [`Tape::log`] are clamped from below at this value.
pub const LOG_CLAMP: f64 = 1e-30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("{op}: range {start}..{end} out of bounds for axis {axis} of length {len}")]
    Range {
        op: &'static str,
        axis: usize,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("{op}: invalid axis {axis}")]
    Axis { op: &'static str, axis: usize },
    #[error("backward: root must be a scalar, got shape {0:?}")]
    NonScalarRoot([usize; 2]),
    #[error("handle does not belong to the current tape (cleared or foreign)")]
    StaleHandle,
    #[error("backward already ran on this tape; clear it and record a new pass")]
    BackwardTwice,
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, GradError>;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix{:?}{:?}", self.shape(), self.data)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GradError::Shape {
                op: "from_vec",
                lhs: [rows, cols],
                rhs: [data.len(), 1],
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// A `1 × n` row vector.
    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::row_vector(vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single entry of a `1 × 1` matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to an array recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn node_id(self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows = 0,
    Cols = 1,
}

impl Axis {
    pub fn from_index(op: &'static str, axis: usize) -> Result<Self> {
        match axis {
            0 => Ok(Axis::Rows),
            1 => Ok(Axis::Cols),
            _ => Err(GradError::Axis { op, axis }),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    ScaleRows(usize, usize),
    Concat(usize, usize, Axis),
    Slice(usize, Axis, usize),
    Sigmoid(usize),
    Tanh(usize),
    Softmax(usize, Axis),
    Log(usize),
    Mean(usize),
    Sum(usize),
    Square(usize),
    ScalarMul(usize, f64),
    AddScalar(usize),
    CrossEntropy {
        logits: usize,
        target: usize,
        probs: Matrix,
    },
    StraightThrough(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
    op: Op,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_tape_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Recorded computation of one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: fresh_tape_id(),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Drops every node. Handles from before the clear become stale.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = fresh_tape_id();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    fn push(&mut self, value: Matrix, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(GradError::StaleHandle);
        }
        self.nodes.get(v.id).ok_or(GradError::StaleHandle)
    }

    pub fn value(&self, v: Var) -> Result<&Matrix> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<[usize; 2]> {
        Ok(self.node(v)?.value.shape())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.requires_grad)
    }

    /// Accumulated gradient of `v`; all zeros if nothing flowed into it.
    pub fn grad(&self, v: Var) -> Result<Matrix> {
        let node = self.node(v)?;
        Ok(node
            .grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows, node.value.cols)))
    }

    fn unary(&mut self, a: Var, value: Matrix, op: Op) -> Result<Var> {
        let rg = self.node(a)?.requires_grad;
        Ok(self.push(value, rg, op))
    }

    fn binary(&mut self, a: Var, b: Var, value: Matrix, op: Op) -> Result<Var> {
        let rg = self.node(a)?.requires_grad || self.node(b)?.requires_grad;
        Ok(self.push(value, rg, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        if av.cols != bv.rows {
            return Err(GradError::Shape {
                op: "matmul",
                lhs: av.shape(),
                rhs: bv.shape(),
            });
        }
        let out = matmul_nn(av, bv);
        self.binary(a, b, out, Op::MatMul(a.id, b.id))
    }

    /// `a · bᵀ`, for weights stored as `out × in`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        if av.cols != bv.cols {
            return Err(GradError::Shape {
                op: "matmul_t",
                lhs: av.shape(),
                rhs: bv.shape(),
            });
        }
        let out = matmul_nt(av, bv);
        self.binary(a, b, out, Op::MatMulT(a.id, b.id))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        let same = av.shape() == bv.shape();
        let row_bcast = bv.rows == 1 && bv.cols == av.cols;
        if same || row_bcast {
            Ok(())
        } else {
            Err(GradError::Shape {
                op,
                lhs: av.shape(),
                rhs: bv.shape(),
            })
        }
    }

    /// Elementwise `a + b`; `b` may be `1 × n` and is then added to every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let out = zip_broadcast(self.value(a)?, self.value(b)?, |x, y| x + y);
        self.binary(a, b, out, Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("sub", a, b)?;
        let out = zip_broadcast(self.value(a)?, self.value(b)?, |x, y| x - y);
        self.binary(a, b, out, Op::Sub(a.id, b.id))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        if av.shape() != bv.shape() {
            return Err(GradError::Shape {
                op: "hadamard",
                lhs: av.shape(),
                rhs: bv.shape(),
            });
        }
        let out = zip_broadcast(av, bv, |x, y| x * y);
        self.binary(a, b, out, Op::Hadamard(a.id, b.id))
    }

    /// Multiplies row `i` of `a` by `s[i]`, where `s` is `rows × 1`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a)?, self.value(s)?);
        if sv.cols != 1 || sv.rows != av.rows {
            return Err(GradError::Shape {
                op: "scale_rows",
                lhs: av.shape(),
                rhs: sv.shape(),
            });
        }
        let mut out = av.clone();
        for r in 0..out.rows {
            let k = sv.data[r];
            out.row_mut(r).iter_mut().for_each(|x| *x *= k);
        }
        self.binary(a, s, out, Op::ScaleRows(a.id, s.id))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let axis = Axis::from_index("concat", axis)?;
        let (av, bv) = (self.value(a)?, self.value(b)?);
        let out = match axis {
            Axis::Cols => {
                if av.rows != bv.rows {
                    return Err(GradError::Shape {
                        op: "concat",
                        lhs: av.shape(),
                        rhs: bv.shape(),
                    });
                }
                let mut data = Vec::with_capacity(av.len() + bv.len());
                for r in 0..av.rows {
                    data.extend_from_slice(av.row(r));
                    data.extend_from_slice(bv.row(r));
                }
                Matrix {
                    rows: av.rows,
                    cols: av.cols + bv.cols,
                    data,
                }
            }
            Axis::Rows => {
                if av.cols != bv.cols {
                    return Err(GradError::Shape {
                        op: "concat",
                        lhs: av.shape(),
                        rhs: bv.shape(),
                    });
                }
                let mut data = av.data.clone();
                data.extend_from_slice(&bv.data);
                Matrix {
                    rows: av.rows + bv.rows,
                    cols: av.cols,
                    data,
                }
            }
        };
        self.binary(a, b, out, Op::Concat(a.id, b.id, axis))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let axis = Axis::from_index("slice", axis)?;
        let av = self.value(a)?;
        let len = match axis {
            Axis::Rows => av.rows,
            Axis::Cols => av.cols,
        };
        if start > end || end > len {
            return Err(GradError::Range {
                op: "slice",
                axis: axis as usize,
                start,
                end,
                len,
            });
        }
        let out = match axis {
            Axis::Rows => Matrix {
                rows: end - start,
                cols: av.cols,
                data: av.data[start * av.cols..end * av.cols].to_vec(),
            },
            Axis::Cols => {
                let mut data = Vec::with_capacity(av.rows * (end - start));
                for r in 0..av.rows {
                    data.extend_from_slice(&av.row(r)[start..end]);
                }
                Matrix {
                    rows: av.rows,
                    cols: end - start,
                    data,
                }
            }
        };
        self.unary(a, out, Op::Slice(a.id, axis, start))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a)?.map(sigmoid);
        self.unary(a, out, Op::Sigmoid(a.id))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a)?.map(f64::tanh);
        self.unary(a, out, Op::Tanh(a.id))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let axis = Axis::from_index("softmax", axis)?;
        let av = self.value(a)?;
        let out = match axis {
            Axis::Cols => softmax_rows(av),
            Axis::Rows => softmax_rows(&av.transpose()).transpose(),
        };
        self.unary(a, out, Op::Softmax(a.id, axis))
    }

    /// Natural log with the input clamped at [`LOG_CLAMP`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a)?.map(|x| x.max(LOG_CLAMP).ln());
        self.unary(a, out, Op::Log(a.id))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a)?;
        if av.is_empty() {
            return Err(GradError::Contract("mean of an empty array".into()));
        }
        let m = av.data.iter().sum::<f64>() / av.len() as f64;
        self.unary(a, Matrix::scalar(m), Op::Mean(a.id))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a)?.data.iter().sum::<f64>();
        self.unary(a, Matrix::scalar(s), Op::Sum(a.id))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a)?.map(|x| x * x);
        self.unary(a, out, Op::Square(a.id))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a)?.map(|x| x * s);
        self.unary(a, out, Op::ScalarMul(a.id, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a)?.map(|x| x + s);
        self.unary(a, out, Op::AddScalar(a.id))
    }

    /// Mean over rows of `-Σ_j target_j · log softmax(logits)_j`.
    ///
    /// Every target row must sum to one.
    pub fn cross_entropy(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (lv, tv) = (self.value(logits)?, self.value(target)?);
        if lv.shape() != tv.shape() {
            return Err(GradError::Shape {
                op: "cross_entropy",
                lhs: lv.shape(),
                rhs: tv.shape(),
            });
        }
        if lv.rows == 0 {
            return Err(GradError::Contract("cross_entropy: empty batch".into()));
        }
        for r in 0..tv.rows {
            let s: f64 = tv.row(r).iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(GradError::Contract(format!(
                    "cross_entropy: target row {r} sums to {s}, expected 1"
                )));
            }
        }
        let mut total = 0.0;
        for r in 0..lv.rows {
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            total -= row
                .iter()
                .zip(tv.row(r))
                .map(|(&l, &t)| if t == 0.0 { 0.0 } else { t * (l - lse) })
                .sum::<f64>();
        }
        let probs = softmax_rows(lv);
        let value = Matrix::scalar(total / lv.rows as f64);
        self.binary(
            logits,
            target,
            value,
            Op::CrossEntropy {
                logits: logits.id,
                target: target.id,
                probs,
            },
        )
    }

    /// Forward: the one-hot of each row's argmax (ties go to the highest
    /// index). Backward: identity, so gradients flow as if the input had been
    /// passed through unchanged.
    pub fn straight_through(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a)?;
        let mut out = Matrix::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            if let Some(k) = argmax_last(av.row(r)) {
                out.set(r, k, 1.0);
            }
        }
        self.unary(a, out, Op::StraightThrough(a.id))
    }

    /// Fills in `grad` for every node that depends on a trainable leaf and
    /// lies on a path to `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(GradError::BackwardTwice);
        }
        let shape = self.node(root)?.value.shape();
        if shape != [1, 1] {
            return Err(GradError::NonScalarRoot(shape));
        }
        self.backward_done = true;
        if !self.nodes[root.id].requires_grad {
            return Ok(());
        }
        self.nodes[root.id].grad = Some(Matrix::scalar(1.0));

        for i in (0..=root.id).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (j, delta) in contributions {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                match &mut self.nodes[j].grad {
                    Some(acc) => acc
                        .data
                        .iter_mut()
                        .zip(&delta.data)
                        .for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to its inputs, given its output
    /// gradient `g`.
    fn local_grads(&self, i: usize, g: &Matrix) -> Vec<(usize, Matrix)> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let wants = |j: usize| self.nodes[j].requires_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    out.push((*a, matmul_nt(g, val(*b))));
                }
                if wants(*b) {
                    out.push((*b, matmul_tn(val(*a), g)));
                }
            }
            Op::MatMulT(a, b) => {
                if wants(*a) {
                    out.push((*a, matmul_nn(g, val(*b))));
                }
                if wants(*b) {
                    out.push((*b, matmul_tn(g, val(*a))));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    out.push((*a, g.clone()));
                }
                if wants(*b) {
                    let bshape = val(*b).shape();
                    let gb = if bshape == g.shape() {
                        g.map(|x| sign * x)
                    } else {
                        let mut acc = Matrix::zeros(1, g.cols);
                        for r in 0..g.rows {
                            acc.data.iter_mut().zip(g.row(r)).for_each(|(a, x)| *a += x);
                        }
                        acc.map(|x| sign * x)
                    };
                    out.push((*b, gb));
                }
            }
            Op::Hadamard(a, b) => {
                if wants(*a) {
                    out.push((*a, zip_broadcast(g, val(*b), |x, y| x * y)));
                }
                if wants(*b) {
                    out.push((*b, zip_broadcast(g, val(*a), |x, y| x * y)));
                }
            }
            Op::ScaleRows(a, s) => {
                let (av, sv) = (val(*a), val(*s));
                if wants(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows {
                        let k = sv.data[r];
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= k);
                    }
                    out.push((*a, ga));
                }
                if wants(*s) {
                    let mut gs = Matrix::zeros(sv.rows, 1);
                    for r in 0..av.rows {
                        gs.data[r] = g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum();
                    }
                    out.push((*s, gs));
                }
            }
            Op::Concat(a, b, axis) => {
                let (ashape, bshape) = (val(*a).shape(), val(*b).shape());
                match axis {
                    Axis::Cols => {
                        let mut ga = Matrix::zeros(ashape[0], ashape[1]);
                        let mut gb = Matrix::zeros(bshape[0], bshape[1]);
                        for r in 0..g.rows {
                            let row = g.row(r);
                            ga.row_mut(r).copy_from_slice(&row[..ashape[1]]);
                            gb.row_mut(r).copy_from_slice(&row[ashape[1]..]);
                        }
                        out.push((*a, ga));
                        out.push((*b, gb));
                    }
                    Axis::Rows => {
                        let split = ashape[0] * ashape[1];
                        out.push((
                            *a,
                            Matrix {
                                rows: ashape[0],
                                cols: ashape[1],
                                data: g.data[..split].to_vec(),
                            },
                        ));
                        out.push((
                            *b,
                            Matrix {
                                rows: bshape[0],
                                cols: bshape[1],
                                data: g.data[split..].to_vec(),
                            },
                        ));
                    }
                }
            }
            Op::Slice(a, axis, start) => {
                let ashape = val(*a).shape();
                let mut ga = Matrix::zeros(ashape[0], ashape[1]);
                match axis {
                    Axis::Rows => {
                        let off = start * ashape[1];
                        ga.data[off..off + g.len()].copy_from_slice(&g.data);
                    }
                    Axis::Cols => {
                        for r in 0..g.rows {
                            ga.row_mut(r)[*start..start + g.cols].copy_from_slice(g.row(r));
                        }
                    }
                }
                out.push((*a, ga));
            }
            Op::Sigmoid(a) => {
                out.push((*a, zip_broadcast(g, &node.value, |x, y| x * y * (1.0 - y))));
            }
            Op::Tanh(a) => {
                out.push((*a, zip_broadcast(g, &node.value, |x, y| x * (1.0 - y * y))));
            }
            Op::Softmax(a, axis) => {
                let ga = match axis {
                    Axis::Cols => softmax_backward_rows(&node.value, g),
                    Axis::Rows => {
                        softmax_backward_rows(&node.value.transpose(), &g.transpose()).transpose()
                    }
                };
                out.push((*a, ga));
            }
            Op::Log(a) => {
                out.push((
                    *a,
                    zip_broadcast(g, val(*a), |x, y| if y > LOG_CLAMP { x / y } else { 0.0 }),
                ));
            }
            Op::Mean(a) => {
                let av = val(*a);
                let k = g.item() / av.len() as f64;
                out.push((*a, Matrix::filled(av.rows, av.cols, k)));
            }
            Op::Sum(a) => {
                let av = val(*a);
                out.push((*a, Matrix::filled(av.rows, av.cols, g.item())));
            }
            Op::Square(a) => {
                out.push((*a, zip_broadcast(g, val(*a), |x, y| 2.0 * x * y)));
            }
            Op::ScalarMul(a, s) => out.push((*a, g.map(|x| x * s))),
            Op::AddScalar(a) => out.push((*a, g.clone())),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let tv = val(*target);
                let scale = g.item() / tv.rows as f64;
                if wants(*logits) {
                    let mut gl = Matrix::zeros(tv.rows, tv.cols);
                    for r in 0..tv.rows {
                        let tsum: f64 = tv.row(r).iter().sum();
                        for c in 0..tv.cols {
                            gl.set(r, c, scale * (probs.get(r, c) * tsum - tv.get(r, c)));
                        }
                    }
                    out.push((*logits, gl));
                }
                if wants(*target) {
                    let lv = val(*logits);
                    let mut gt = Matrix::zeros(tv.rows, tv.cols);
                    for r in 0..tv.rows {
                        let lse = log_sum_exp(lv.row(r));
                        for c in 0..tv.cols {
                            gt.set(r, c, -scale * (lv.get(r, c) - lse));
                        }
                    }
                    out.push((*target, gt));
                }
            }
            Op::StraightThrough(a) => out.push((*a, g.clone())),
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest entry; ties resolve to the highest index.
pub(crate) fn argmax_last(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        match best {
            Some(b) if xs[b] > x => {}
            _ => best = Some(i),
        }
    }
    best
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_slice(xs: &[f64], out: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows, a.cols);
    for r in 0..a.rows {
        let (src, dst) = (a.row(r), &mut out.data[r * a.cols..(r + 1) * a.cols]);
        softmax_slice(src, dst);
    }
    out
}

fn softmax_backward_rows(y: &Matrix, g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(y.rows, y.cols);
    for r in 0..y.rows {
        let (yr, gr) = (y.row(r), g.row(r));
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for c in 0..y.cols {
            out.set(r, c, yr[c] * (gr[c] - dot));
        }
    }
    out
}

fn zip_broadcast(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let mut out = a.clone();
    if a.shape() == b.shape() {
        out.data.iter_mut().zip(&b.data).for_each(|(x, &y)| *x = f(*x, y));
    } else {
        for r in 0..a.rows {
            out.row_mut(r).iter_mut().zip(&b.data).for_each(|(x, &y)| *x = f(*x, y));
        }
    }
    out
}

fn matmul_nn(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a.data[i * k + p];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += aik * bv);
        }
    }
    Matrix {
        rows: m,
        cols: n,
        data: out,
    }
}

/// `a · bᵀ` with `a: m × k`, `b: n × k`.
fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Matrix {
        rows: m,
        cols: n,
        data: out,
    }
}

/// `aᵀ · b` with `a: k × m`, `b: k × n`.
fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            out[i * n..(i + 1) * n]
                .iter_mut()
                .zip(brow)
                .for_each(|(o, &bv)| *o += api * bv);
        }
    }
    Matrix {
        rows: m,
        cols: n,
        data: out,
    }
}

/// Entries smaller than this are compared on an absolute scale; finite
/// differences cannot resolve them relatively in double precision.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Maximum relative error between reverse-mode gradients of `f` and
/// fourth-order central finite differences, over every entry of every
/// parameter.
///
/// `f` records a scalar on the tape it is given, using the parameter handles
/// in the order of `params`. The relative error of one entry is
/// `|analytic − numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F, E>(f: F, params: &[Matrix], eps: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: From<GradError>,
{
    if eps <= 0.0 {
        return Err(GradError::Contract(format!("grad_check: eps must be > 0, got {eps}")).into());
    }
    let eval = |ps: &[Matrix]| -> std::result::Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root)?.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Matrix> = vars.iter().map(|&v| tape.grad(v)).collect::<Result<_>>()?;

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for e in 0..probe[pi].len() {
            let orig = probe[pi].data[e];
            let mut at = |k: f64| {
                probe[pi].data[e] = orig + k * eps;
                eval(&probe)
            };
            let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            probe[pi].data[e] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let a = grad.data[e];
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
