//! Reverse-mode gradients over a small, fixed set of matrix operations.
//!
//! A [`Tape`] records nodes in evaluation order. Leaves are either
//! parameters (which may request a gradient) or constants. `backward` walks
//! the tape once in reverse and only propagates into nodes that lead to a
//! parameter with `requires_grad`, so inner-loop passes over a few fast
//! parameters skip the cost of generator gradients entirely.

use std::borrow::Cow;

use super::Tensor2;
use crate::error::{invalid, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulBt(Var, Var),
    Add(Var, Var),
    /// Adds a `1 x k` row to every row of an `n x k` matrix.
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Elu(Var),
    /// Per-row standardization with the given epsilon; stores `1/sigma` per row.
    LayerNorm(Var, Vec<f64>),
    /// Per-row projection onto the unit sphere; stores the row norms.
    UnitNorm(Var, Vec<f64>),
    Reshape(Var),
    /// Column window `[start, start + width)`.
    SliceCols(Var, usize),
    /// Terminal losses: `(prediction, target)`.
    Mse(Var, Var),
    KlLogSoftmax(Var, Var),
    Xent(Var, Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor2>,
    op: Op,
    needs_grad: bool,
}

/// Epsilon used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<(String, Var)>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor2> {
        self.grads[v.0].take()
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows(t: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(t.rows(), t.cols());
    for r in 0..t.rows() {
        softmax_row(t.row(r), out.row_mut(r));
    }
    out
}

pub fn log_softmax_rows(t: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(t.rows(), t.cols());
    for r in 0..t.rows() {
        log_softmax_row(t.row(r), out.row_mut(r));
    }
    out
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Cow<'a, Tensor2>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    /// Named parameter leaf; `requires_grad` controls gradient collection.
    pub fn param(&mut self, name: &str, value: &'a Tensor2, requires_grad: bool) -> Var {
        let v = self.push(Cow::Borrowed(value), Op::Leaf, requires_grad);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn constant(&mut self, value: &'a Tensor2) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, value: Tensor2) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(v), Op::MatMul(a, b), ng))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_bt(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(v), Op::MatMulBt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(v), Op::Add(a, b), ng))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return invalid(format!(
                "add_row: row shape {:?} vs matrix {:?}",
                rv.shape(),
                av.shape()
            ));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Cow::Owned(out), Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(Cow::Owned(v), Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(Cow::Owned(v), Op::Relu(a), ng)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(elu);
        let ng = self.ng(a);
        self.push(Cow::Owned(v), Op::Elu(a), ng)
    }

    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor2::zeros(x.rows(), x.cols());
        let mut inv = Vec::with_capacity(x.rows());
        let k = x.cols() as f64;
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / k;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv.push(is);
        }
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::LayerNorm(a, inv), ng)
    }

    /// Each row divided by its L2 norm; zero rows stay zero.
    pub fn unit_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                out.row_mut(r).iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::UnitNorm(a, norms), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(a).reshape(rows, cols)?;
        let ng = self.ng(a);
        Ok(self.push(Cow::Owned(v), Op::Reshape(a), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let x = self.value(a);
        if start + width > x.cols() {
            return invalid(format!(
                "slice_cols: window {start}+{width} exceeds {} columns",
                x.cols()
            ));
        }
        let v = Tensor2::from_fn(x.rows(), width, |r, c| x.get(r, start + c));
        let ng = self.ng(a);
        Ok(self.push(Cow::Owned(v), Op::SliceCols(a, start), ng))
    }

    fn check_loss_shapes(&self, pred: Var, target: Var, what: &str) -> Result<()> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return invalid(format!("{what}: prediction {:?} vs target {:?}", p.shape(), t.shape()));
        }
        if p.rows() == 0 {
            return invalid(format!("{what}: empty batch"));
        }
        Ok(())
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_loss_shapes(pred, target, "mse")?;
        let v = super::loss::mse(self.value(pred), self.value(target))?;
        let ng = self.ng(pred);
        Ok(self.push(Cow::Owned(Tensor2::filled(1, 1, v)), Op::Mse(pred, target), ng))
    }

    pub fn kl_logsoftmax(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_loss_shapes(pred, target, "kl_logsoftmax")?;
        let v = super::loss::kl_logsoftmax(self.value(pred), self.value(target))?;
        let ng = self.ng(pred);
        Ok(self.push(Cow::Owned(Tensor2::filled(1, 1, v)), Op::KlLogSoftmax(pred, target), ng))
    }

    pub fn xent(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_loss_shapes(pred, target, "xent")?;
        let v = super::loss::xent(self.value(pred), self.value(target))?;
        let ng = self.ng(pred);
        Ok(self.push(Cow::Owned(Tensor2::filled(1, 1, v)), Op::Xent(pred, target), ng))
    }

    /// Back-propagates from a scalar (`1 x 1`) node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).shape() != (1, 1) {
            return invalid("backward: root must be a 1x1 scalar");
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor2::filled(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let ga = g.matmul_bt(self.value(*b))?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.ng(*b) {
                        let gb = self.value(*a).matmul_at(&g)?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::MatMulBt(a, b) => {
                    // y = a b^T: da = g b, db = g^T a
                    if self.ng(*a) {
                        let ga = g.matmul(self.value(*b))?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.ng(*b) {
                        let gb = g.matmul_at(self.value(*a))?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        accumulate(&mut grads, *row, g.sum_rows())?;
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g)?;
                    }
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.scale(*s))?;
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (gv, xv) in ga.data_mut().iter_mut().zip(x.data()) {
                        if *xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Elu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (gv, xv) in ga.data_mut().iter_mut().zip(x.data()) {
                        if *xv <= 0.0 {
                            *gv *= xv.exp();
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::LayerNorm(a, inv) => {
                    let y = &node.value;
                    let k = y.cols() as f64;
                    let mut ga = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let mg = gr.iter().sum::<f64>() / k;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / k;
                        for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = inv[r] * (gv - mg - yv * mgy);
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::UnitNorm(a, norms) => {
                    let y = &node.value;
                    let mut ga = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        if norms[r] == 0.0 {
                            continue;
                        }
                        let (gr, yr) = (g.row(r), y.row(r));
                        let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = (gv - yv * gy) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Reshape(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, g.into_reshaped(r, c)?)?;
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Tensor2::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Mse(p, t) => {
                    let s = g.get(0, 0);
                    let (pv, tv) = (self.value(*p), self.value(*t));
                    let b = pv.rows() as f64;
                    let gp = pv.sub(tv)?.scale(s / b);
                    accumulate(&mut grads, *p, gp)?;
                }
                Op::KlLogSoftmax(p, t) => {
                    let s = g.get(0, 0);
                    let (pv, tv) = (self.value(*p), self.value(*t));
                    let b = pv.rows() as f64;
                    let gp = softmax_rows(pv).sub(&softmax_rows(tv))?.scale(s / b);
                    accumulate(&mut grads, *p, gp)?;
                }
                Op::Xent(p, t) => {
                    let s = g.get(0, 0);
                    let (pv, tv) = (self.value(*p), self.value(*t));
                    let b = pv.rows() as f64;
                    let mut gp = softmax_rows(pv);
                    for r in 0..gp.rows() {
                        let mass: f64 = tv.row(r).iter().sum();
                        for (o, y) in gp.row_mut(r).iter_mut().zip(tv.row(r)) {
                            *o = (*o * mass - y) * s / b;
                        }
                    }
                    accumulate(&mut grads, *p, gp)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], v: Var, g: Tensor2) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
