//! Differentiable tensor graph.
//!
//! Model code is written once against the [`Graph`] trait and runs on two
//! backends: [`Eval`] computes values only, [`Tape`] additionally records
//! every operation so that [`Tape::backward`] can return exact reverse-mode
//! gradients for all bound parameters.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;

pub trait Graph<'p> {
    type Var: Clone;

    fn constant(&mut self, t: Tensor) -> Self::Var;
    /// Binds parameter tensor number `id`; gradients are reported per id.
    fn param(&mut self, id: usize, t: &'p Tensor) -> Self::Var;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    /// `a · bᵀ`.
    fn matmul_nt(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    /// `mul * a + add`, elementwise.
    fn affine(&mut self, a: &Self::Var, mul: f64, add: f64) -> Self::Var;
    /// Adds a `1×k` row to every row of `a`.
    fn add_row(&mut self, a: &Self::Var, row: &Self::Var) -> Self::Var;
    /// Multiplies every row of `a` by a `1×k` row.
    fn mul_row(&mut self, a: &Self::Var, row: &Self::Var) -> Self::Var;
    /// Multiplies every column of `a` by an `n×1` column.
    fn mul_col(&mut self, a: &Self::Var, col: &Self::Var) -> Self::Var;
    /// Row-wise `(x - mean) / sqrt(var + eps)`.
    fn layer_norm(&mut self, a: &Self::Var, eps: f64) -> Self::Var;
    fn softmax_rows(&mut self, a: &Self::Var) -> Self::Var;
    fn gelu(&mut self, a: &Self::Var) -> Self::Var;
    fn relu(&mut self, a: &Self::Var) -> Self::Var;
    fn clamp_min(&mut self, a: &Self::Var, lo: f64) -> Self::Var;
    fn powf(&mut self, a: &Self::Var, p: f64) -> Self::Var;
    /// Column means as a `1×k` row.
    fn mean_rows(&mut self, a: &Self::Var) -> Self::Var;
    fn l2_normalize_rows(&mut self, a: &Self::Var) -> Self::Var;
    fn max(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    fn slice_rows(&mut self, a: &Self::Var, start: usize, end: usize) -> Self::Var;
    fn slice_cols(&mut self, a: &Self::Var, start: usize, end: usize) -> Self::Var;
    fn concat_rows(&mut self, parts: &[Self::Var]) -> Self::Var;
    fn concat_cols(&mut self, parts: &[Self::Var]) -> Self::Var;
    /// Sum of the elementwise product, as a `1×1` tensor.
    fn dot(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
}

// ---------------------------------------------------------------------------
// Forward kernels shared by both backends.

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn layer_norm_fwd(a: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let k = a.ncols() as f64;
    let mut out = a.clone();
    let mut inv_std = Vec::with_capacity(a.nrows());
    for mut row in out.rows_mut() {
        let mean = row.sum() / k;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
        let inv = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
        inv_std.push(inv);
    }
    (out, inv_std)
}

fn softmax_fwd(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

fn l2_norms(a: &Tensor) -> Vec<f64> {
    a.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

fn l2_normalize_fwd(a: &Tensor) -> (Tensor, Vec<f64>) {
    let norms = l2_norms(a);
    let mut out = a.clone();
    for (mut row, n) in out.rows_mut().into_iter().zip(&norms) {
        row.mapv_inplace(|v| v / n);
    }
    (out, norms)
}

fn concat(axis: Axis, parts: &[&Tensor]) -> Tensor {
    let views: Vec<_> = parts.iter().map(|t| t.view()).collect();
    ndarray::concatenate(axis, &views).expect("concatenation shapes must agree")
}

fn dot_fwd(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.dim(), b.dim(), "dot operands must have the same shape");
    let s: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    Array2::from_elem((1, 1), s)
}

// ---------------------------------------------------------------------------
// Value-only backend.

/// Value of a node in an [`Eval`] graph: either a borrowed parameter or an
/// owned intermediate.
#[derive(Debug, Clone)]
pub enum EvalVar<'p> {
    Param(&'p Tensor),
    Owned(Rc<Tensor>),
}

impl std::ops::Deref for EvalVar<'_> {
    type Target = Tensor;
    fn deref(&self) -> &Tensor {
        match self {
            EvalVar::Param(t) => t,
            EvalVar::Owned(t) => t,
        }
    }
}

/// Inference backend: no recording, intermediates freed as soon as dropped.
#[derive(Debug, Default)]
pub struct Eval;

fn own<'p>(t: Tensor) -> EvalVar<'p> {
    EvalVar::Owned(Rc::new(t))
}

impl<'p> Graph<'p> for Eval {
    type Var = EvalVar<'p>;

    fn constant(&mut self, t: Tensor) -> Self::Var {
        own(t)
    }
    fn param(&mut self, _id: usize, t: &'p Tensor) -> Self::Var {
        EvalVar::Param(t)
    }
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor {
        v
    }
    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        own(a.dot(&**b))
    }
    fn matmul_nt(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        own(a.dot(&b.t()))
    }
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        own(&**a + &**b)
    }
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        own(&**a - &**b)
    }
    fn affine(&mut self, a: &Self::Var, mul: f64, add: f64) -> Self::Var {
        own(a.mapv(|v| mul * v + add))
    }
    fn add_row(&mut self, a: &Self::Var, row: &Self::Var) -> Self::Var {
        own(&**a + &**row)
    }
    fn mul_row(&mut self, a: &Self::Var, row: &Self::Var) -> Self::Var {
        own(&**a * &**row)
    }
    fn mul_col(&mut self, a: &Self::Var, col: &Self::Var) -> Self::Var {
        own(&**a * &**col)
    }
    fn layer_norm(&mut self, a: &Self::Var, eps: f64) -> Self::Var {
        own(layer_norm_fwd(a, eps).0)
    }
    fn softmax_rows(&mut self, a: &Self::Var) -> Self::Var {
        own(softmax_fwd(a))
    }
    fn gelu(&mut self, a: &Self::Var) -> Self::Var {
        own(a.mapv(gelu_scalar))
    }
    fn relu(&mut self, a: &Self::Var) -> Self::Var {
        own(a.mapv(|v| v.max(0.0)))
    }
    fn clamp_min(&mut self, a: &Self::Var, lo: f64) -> Self::Var {
        own(a.mapv(|v| v.max(lo)))
    }
    fn powf(&mut self, a: &Self::Var, p: f64) -> Self::Var {
        own(a.mapv(|v| v.powf(p)))
    }
    fn mean_rows(&mut self, a: &Self::Var) -> Self::Var {
        own(a
            .mean_axis(Axis(0))
            .expect("mean of empty tensor")
            .insert_axis(Axis(0)))
    }
    fn l2_normalize_rows(&mut self, a: &Self::Var) -> Self::Var {
        own(l2_normalize_fwd(a).0)
    }
    fn max(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        let mut out = (**a).clone();
        out.zip_mut_with(&**b, |x, &y| *x = if *x >= y { *x } else { y });
        own(out)
    }
    fn slice_rows(&mut self, a: &Self::Var, start: usize, end: usize) -> Self::Var {
        own(a.slice(s![start..end, ..]).to_owned())
    }
    fn slice_cols(&mut self, a: &Self::Var, start: usize, end: usize) -> Self::Var {
        own(a.slice(s![.., start..end]).to_owned())
    }
    fn concat_rows(&mut self, parts: &[Self::Var]) -> Self::Var {
        let refs: Vec<&Tensor> = parts.iter().map(|p| &**p).collect();
        own(concat(Axis(0), &refs))
    }
    fn concat_cols(&mut self, parts: &[Self::Var]) -> Self::Var {
        let refs: Vec<&Tensor> = parts.iter().map(|p| &**p).collect();
        own(concat(Axis(1), &refs))
    }
    fn dot(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        own(dot_fwd(a, b))
    }
}

// ---------------------------------------------------------------------------
// Recording backend.

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeVar {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Affine(usize, f64),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    LayerNorm(usize, Vec<f64>),
    Softmax(usize),
    Gelu(usize),
    Relu(usize),
    ClampMin(usize, f64),
    Pow(usize, f64),
    MeanRows(usize),
    L2Normalize(usize, Vec<f64>),
    Max(usize, usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Dot(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording backend for reverse-mode differentiation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    nodes: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of a recorded value; `None` when it does not influence the
    /// output.
    pub fn wrt(&self, v: &TapeVar) -> Result<Option<&Tensor>> {
        if v.tape != self.tape || v.idx >= self.nodes.len() {
            return Err(Error::Usage(
                "gradient requested for a value not on this tape".into(),
            ));
        }
        Ok(self.nodes[v.idx].as_ref())
    }

    /// Sum of gradients over every binding of parameter `id`.
    pub fn param(&self, id: usize) -> Option<Tensor> {
        let mut acc: Option<Tensor> = None;
        for &(pid, node) in &self.params {
            if pid != id {
                continue;
            }
            if let Some(g) = &self.nodes[node] {
                match &mut acc {
                    Some(a) => *a += g,
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(a) => *a += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> TapeVar {
        self.nodes.push(Node { value, op });
        TapeVar {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn v(&self, var: &TapeVar) -> &Tensor {
        assert_eq!(var.tape, self.id, "variable belongs to another tape");
        &self.nodes[var.idx].value
    }

    /// Reverse sweep from `output`, seeded with ones.
    pub fn backward(&self, output: &TapeVar) -> Result<Gradients> {
        if output.tape != self.id || output.idx >= self.nodes.len() {
            return Err(Error::Usage(
                "backward from a value not on this tape".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.idx] = Some(Array2::ones(self.nodes[output.idx].value.dim()));
        for idx in (0..=output.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |i: usize| &self.nodes[i].value;
            match &node.op {
                Op::Constant | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    accumulate(&mut grads[*a], g.dot(&val(*b).t()));
                    accumulate(&mut grads[*b], val(*a).t().dot(&g));
                }
                Op::MatMulNt(a, b) => {
                    accumulate(&mut grads[*a], g.dot(val(*b)));
                    accumulate(&mut grads[*b], g.t().dot(val(*a)));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], -&g);
                }
                Op::Affine(a, mul) => accumulate(&mut grads[*a], &g * *mul),
                Op::AddRow(a, row) => {
                    accumulate(&mut grads[*row], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads[*a], g.clone());
                }
                Op::MulRow(a, row) => {
                    let ga = &g * val(*row);
                    let gr = (&g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*row], gr);
                }
                Op::MulCol(a, col) => {
                    let ga = &g * val(*col);
                    let gc = (&g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*col], gc);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let k = y.ncols() as f64;
                    let mut gx = g.clone();
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let mean_g = gr.sum() / k;
                        let mean_gy = gr.dot(&yr) / k;
                        for (c, v) in row.iter_mut().enumerate() {
                            *v = inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    accumulate(&mut grads[*a], gx);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut gx = &g * y;
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let s = row.sum();
                        let yr = y.row(r);
                        for (c, v) in row.iter_mut().enumerate() {
                            *v -= yr[c] * s;
                        }
                    }
                    accumulate(&mut grads[*a], gx);
                }
                Op::Gelu(a) => {
                    let mut gx = val(*a).mapv(gelu_grad_scalar);
                    gx *= &g;
                    accumulate(&mut grads[*a], gx);
                }
                Op::Relu(a) => {
                    let mut gx = g.clone();
                    gx.zip_mut_with(val(*a), |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut grads[*a], gx);
                }
                Op::ClampMin(a, lo) => {
                    let mut gx = g.clone();
                    gx.zip_mut_with(val(*a), |d, &x| {
                        if x <= *lo {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut grads[*a], gx);
                }
                Op::Pow(a, p) => {
                    let mut gx = val(*a).mapv(|x| p * x.powf(p - 1.0));
                    gx *= &g;
                    accumulate(&mut grads[*a], gx);
                }
                Op::MeanRows(a) => {
                    let n = val(*a).nrows();
                    let row = &g / n as f64;
                    let gx = row
                        .broadcast(val(*a).dim())
                        .expect("row broadcast")
                        .to_owned();
                    accumulate(&mut grads[*a], gx);
                }
                Op::L2Normalize(a, norms) => {
                    let y = &node.value;
                    let mut gx = g.clone();
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let yr = y.row(r);
                        let proj = g.row(r).dot(&yr);
                        for (c, v) in row.iter_mut().enumerate() {
                            *v = (*v - yr[c] * proj) / norms[r];
                        }
                    }
                    accumulate(&mut grads[*a], gx);
                }
                Op::Max(a, b) => {
                    let mut ga = g.clone();
                    let mut gb = g.clone();
                    ndarray::Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(val(*a))
                        .and(val(*b))
                        .for_each(|da, db, &x, &y| if x >= y { *db = 0.0 } else { *da = 0.0 });
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::SliceRows(a, start) => {
                    let mut gx = Array2::zeros(val(*a).dim());
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads[*a], gx);
                }
                Op::SliceCols(a, start) => {
                    let mut gx = Array2::zeros(val(*a).dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[*a], gx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).nrows();
                        accumulate(&mut grads[p], g.slice(s![off..off + n, ..]).to_owned());
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).ncols();
                        accumulate(&mut grads[p], g.slice(s![.., off..off + n]).to_owned());
                        off += n;
                    }
                }
                Op::Dot(a, b) => {
                    let s = g[[0, 0]];
                    accumulate(&mut grads[*a], val(*b) * s);
                    accumulate(&mut grads[*b], val(*a) * s);
                }
            }
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            nodes: grads,
            params,
        })
    }
}

impl<'p> Graph<'p> for Tape {
    type Var = TapeVar;

    fn constant(&mut self, t: Tensor) -> TapeVar {
        self.push(t, Op::Constant)
    }
    fn param(&mut self, id: usize, t: &'p Tensor) -> TapeVar {
        self.push(t.clone(), Op::Param(id))
    }
    fn value<'a>(&'a self, v: &'a TapeVar) -> &'a Tensor {
        self.v(v)
    }
    fn matmul(&mut self, a: &TapeVar, b: &TapeVar) -> TapeVar {
        let out = self.v(a).dot(self.v(b));
        self.push(out, Op::MatMul(a.idx, b.idx))
    }
    fn matmul_nt(&mut self, a: &TapeVar, b: &TapeVar) -> TapeVar {
        let out = self.v(a).dot(&self.v(b).t());
        self.push(out, Op::MatMulNt(a.idx, b.idx))
    }
    fn add(&mut self, a: &TapeVar, b: &TapeVar) -> TapeVar {
        let out = self.v(a) + self.v(b);
        self.push(out, Op::Add(a.idx, b.idx))
    }
    fn sub(&mut self, a: &TapeVar, b: &TapeVar) -> TapeVar {
        let out = self.v(a) - self.v(b);
        self.push(out, Op::Sub(a.idx, b.idx))
    }
    fn affine(&mut self, a: &TapeVar, mul: f64, add: f64) -> TapeVar {
        let out = self.v(a).mapv(|v| mul * v + add);
        self.push(out, Op::Affine(a.idx, mul))
    }
    fn add_row(&mut self, a: &TapeVar, row: &TapeVar) -> TapeVar {
        assert_eq!(self.v(row).nrows(), 1);
        let out = self.v(a) + self.v(row);
        self.push(out, Op::AddRow(a.idx, row.idx))
    }
    fn mul_row(&mut self, a: &TapeVar, row: &TapeVar) -> TapeVar {
        assert_eq!(self.v(row).nrows(), 1);
        let out = self.v(a) * self.v(row);
        self.push(out, Op::MulRow(a.idx, row.idx))
    }
    fn mul_col(&mut self, a: &TapeVar, col: &TapeVar) -> TapeVar {
        assert_eq!(self.v(col).ncols(), 1);
        let out = self.v(a) * self.v(col);
        self.push(out, Op::MulCol(a.idx, col.idx))
    }
    fn layer_norm(&mut self, a: &TapeVar, eps: f64) -> TapeVar {
        let (out, inv) = layer_norm_fwd(self.v(a), eps);
        self.push(out, Op::LayerNorm(a.idx, inv))
    }
    fn softmax_rows(&mut self, a: &TapeVar) -> TapeVar {
        let out = softmax_fwd(self.v(a));
        self.push(out, Op::Softmax(a.idx))
    }
    fn gelu(&mut self, a: &TapeVar) -> TapeVar {
        let out = self.v(a).mapv(gelu_scalar);
        self.push(out, Op::Gelu(a.idx))
    }
    fn relu(&mut self, a: &TapeVar) -> TapeVar {
        let out = self.v(a).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(a.idx))
    }
    fn clamp_min(&mut self, a: &TapeVar, lo: f64) -> TapeVar {
        let out = self.v(a).mapv(|v| v.max(lo));
        self.push(out, Op::ClampMin(a.idx, lo))
    }
    fn powf(&mut self, a: &TapeVar, p: f64) -> TapeVar {
        let out = self.v(a).mapv(|v| v.powf(p));
        self.push(out, Op::Pow(a.idx, p))
    }
    fn mean_rows(&mut self, a: &TapeVar) -> TapeVar {
        let out = self
            .v(a)
            .mean_axis(Axis(0))
            .expect("mean of empty tensor")
            .insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a.idx))
    }
    fn l2_normalize_rows(&mut self, a: &TapeVar) -> TapeVar {
        let (out, norms) = l2_normalize_fwd(self.v(a));
        self.push(out, Op::L2Normalize(a.idx, norms))
    }
    fn max(&mut self, a: &TapeVar, b: &TapeVar) -> TapeVar {
        let mut out = self.v(a).clone();
        out.zip_mut_with(self.v(b), |x, &y| *x = if *x >= y { *x } else { y });
        self.push(out, Op::Max(a.idx, b.idx))
    }
    fn slice_rows(&mut self, a: &TapeVar, start: usize, end: usize) -> TapeVar {
        let out = self.v(a).slice(s![start..end, ..]).to_owned();
        self.push(out, Op::SliceRows(a.idx, start))
    }
    fn slice_cols(&mut self, a: &TapeVar, start: usize, end: usize) -> TapeVar {
        let out = self.v(a).slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(a.idx, start))
    }
    fn concat_rows(&mut self, parts: &[TapeVar]) -> TapeVar {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.v(p)).collect();
        let out = concat(Axis(0), &refs);
        self.push(out, Op::ConcatRows(parts.iter().map(|p| p.idx).collect()))
    }
    fn concat_cols(&mut self, parts: &[TapeVar]) -> TapeVar {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.v(p)).collect();
        let out = concat(Axis(1), &refs);
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.idx).collect()))
    }
    fn dot(&mut self, a: &TapeVar, b: &TapeVar) -> TapeVar {
        let out = dot_fwd(self.v(a), self.v(b));
        self.push(out, Op::Dot(a.idx, b.idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Build = fn(&mut Tape, &[TapeVar]) -> TapeVar;

    fn random(rng: &mut ChaCha8Rng, (r, c): (usize, usize)) -> Tensor {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.5..1.5))
    }

    fn scalar(inputs: &[Tensor], weights: &Tensor, f: Build) -> f64 {
        let mut t = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vars);
        dot_fwd(t.value(&out), weights)[[0, 0]]
    }

    /// Central differences against the tape for a scalar projection of `f`.
    fn check(shapes: &[(usize, usize)], f: Build, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|&s| random(&mut rng, s)).collect();
        let mut t = Tape::new();
        let vars: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(i, x)| t.param(i, x))
            .collect();
        let out = f(&mut t, &vars);
        let weights = random(&mut rng, t.value(&out).dim());
        let w = t.constant(weights.clone());
        let loss = t.dot(&out, &w);
        let grads = t.backward(&loss).unwrap();
        let h = 1e-6;
        for (i, x) in inputs.iter().enumerate() {
            let analytic = grads.param(i).unwrap_or_else(|| Array2::zeros(x.dim()));
            for idx in 0..x.len() {
                let (r, c) = (idx / x.ncols(), idx % x.ncols());
                let mut plus = inputs.clone();
                plus[i][[r, c]] += h;
                let mut minus = inputs.clone();
                minus[i][[r, c]] -= h;
                let numeric =
                    (scalar(&plus, &weights, f) - scalar(&minus, &weights, f)) / (2.0 * h);
                let a = analytic[[r, c]];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                assert!(
                    err < 1e-5,
                    "input {i} [{r},{c}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_gradients() {
        check(&[(3, 4), (4, 2)], |t, v| t.matmul(&v[0], &v[1]), 1);
        check(&[(3, 4), (5, 4)], |t, v| t.matmul_nt(&v[0], &v[1]), 2);
    }

    #[test]
    fn elementwise_gradients() {
        check(&[(3, 4), (3, 4)], |t, v| t.add(&v[0], &v[1]), 3);
        check(&[(3, 4), (3, 4)], |t, v| t.sub(&v[0], &v[1]), 4);
        check(&[(3, 4)], |t, v| t.affine(&v[0], -2.5, 0.3), 5);
        check(&[(3, 4)], |t, v| t.gelu(&v[0]), 6);
        check(&[(3, 4)], |t, v| t.relu(&v[0]), 7);
        check(&[(3, 4)], |t, v| t.clamp_min(&v[0], 0.1), 8);
        check(&[(3, 4), (3, 4)], |t, v| t.max(&v[0], &v[1]), 9);
        check(
            &[(3, 4)],
            |t, v| {
                let c = t.clamp_min(&v[0], 1e-6);
                let c = t.affine(&c, 1.0, 0.5);
                t.powf(&c, 3.0)
            },
            10,
        );
    }

    #[test]
    fn broadcast_gradients() {
        check(&[(3, 4), (1, 4)], |t, v| t.add_row(&v[0], &v[1]), 11);
        check(&[(3, 4), (1, 4)], |t, v| t.mul_row(&v[0], &v[1]), 12);
        check(&[(3, 4), (3, 1)], |t, v| t.mul_col(&v[0], &v[1]), 13);
        check(&[(5, 4)], |t, v| t.mean_rows(&v[0]), 14);
    }

    #[test]
    fn normalization_gradients() {
        check(&[(3, 6)], |t, v| t.layer_norm(&v[0], 1e-6), 15);
        check(&[(3, 6)], |t, v| t.softmax_rows(&v[0]), 16);
        check(&[(3, 6)], |t, v| t.l2_normalize_rows(&v[0]), 17);
    }

    #[test]
    fn structural_gradients() {
        check(&[(5, 3)], |t, v| t.slice_rows(&v[0], 1, 4), 18);
        check(&[(3, 5)], |t, v| t.slice_cols(&v[0], 2, 5), 19);
        check(
            &[(2, 3), (4, 3)],
            |t, v| t.concat_rows(&[v[0], v[1], v[0]]),
            20,
        );
        check(&[(3, 2), (3, 4)], |t, v| t.concat_cols(&[v[1], v[0]]), 21);
        check(&[(3, 4), (3, 4)], |t, v| t.dot(&v[0], &v[1]), 22);
    }

    #[test]
    fn reused_values_accumulate() {
        check(
            &[(4, 4)],
            |t, v| {
                let a = t.matmul(&v[0], &v[0]);
                let b = t.softmax_rows(&a);
                let c = t.slice_cols(&v[0], 0, 1);
                t.mul_col(&b, &c)
            },
            23,
        );
    }

    #[test]
    fn eval_and_tape_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let a = random(&mut rng, (4, 6));
        let b = random(&mut rng, (6, 6));
        let r = random(&mut rng, (1, 6));
        fn run<'p, G: Graph<'p>>(g: &mut G, a: &'p Tensor, b: &'p Tensor, r: &'p Tensor) -> Tensor {
            let a = g.param(0, a);
            let b = g.param(1, b);
            let r = g.param(2, r);
            let x = g.matmul(&a, &b);
            let x = g.layer_norm(&x, 1e-6);
            let x = g.add_row(&x, &r);
            let x = g.gelu(&x);
            let m = g.mean_rows(&x);
            let x = g.concat_rows(&[m, x]);
            let x = g.l2_normalize_rows(&x);
            g.value(&x).clone()
        }
        let e = run(&mut Eval, &a, &b, &r);
        let t = run(&mut Tape::new(), &a, &b, &r);
        assert_eq!(e, t);
    }

    #[test]
    fn shared_parameter_gradients_sum() {
        let x = Array2::from_elem((1, 2), 2.0);
        let mut t = Tape::new();
        let a = t.param(7, &x);
        let b = t.param(7, &x);
        let s = t.dot(&a, &b);
        let g = t.backward(&s).unwrap();
        assert_eq!(g.param(7).unwrap(), Array2::from_elem((1, 2), 4.0));
        assert!(g.param(8).is_none());
    }

    #[test]
    fn foreign_values_are_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.constant(Array2::ones((1, 1)));
        let b = t2.constant(Array2::ones((1, 1)));
        assert!(matches!(t1.backward(&b), Err(Error::Usage(_))));
        let g = t1.backward(&a).unwrap();
        assert!(g.wrt(&b).is_err());
        assert!(g.wrt(&a).unwrap().is_some());
    }

    #[test]
    fn gelu_reference_values() {
        let mut g = Eval;
        let x = g.constant(Array2::from_shape_vec((1, 3), vec![-1.0, 0.0, 1.0]).unwrap());
        let y = g.gelu(&x);
        assert!((y[[0, 0]] + 0.158_655_253_931_457).abs() < 1e-12);
        assert_eq!(y[[0, 1]], 0.0);
        assert!((y[[0, 2]] - 0.841_344_746_068_543).abs() < 1e-12);
    }
}
