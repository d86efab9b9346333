//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its value. [`Tape::backward`] walks the nodes in reverse and accumulates
//! vector-Jacobian products, so any leaf (a parameter, an embedding, a
//! constant) can be asked for its gradient afterwards.
//!
//! The op set is exactly what the adapter/descriptor/loss/score graphs use.

use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `x · wᵀ + b`, bias broadcast over rows.
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    Row(Var, usize),
    Pick(Var, usize, usize),
    /// Cosine similarity of two equal-length row vectors, saved norms.
    Cosine {
        a: Var,
        b: Var,
        na: f64,
        nb: f64,
    },
    /// `1×1` scalars laid out as a `1×n` row.
    StackCols(Vec<Var>),
    /// `-log softmax(logits)[idx]` of a `1×n` row.
    NllPick {
        logits: Var,
        idx: usize,
    },
    /// Logistic binary cross-entropy of a `1×1` logit against a 0/1 target.
    BceLogits {
        logit: Var,
        target: f64,
    },
    Div(Var, Var),
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`; zeros if `v` does not
    /// influence the output.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// True if `v` was reached by the backward pass at all.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.cols() || bv.shape() != (1, wv.rows()) {
            return Err(Error::Shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut out = xv.matmul_nt(wv);
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::Shape(format!("matmul: {:?} x {:?}", av.shape(), bv.shape())));
        }
        let out = av.matmul(bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::Shape(format!("matmul_nt: {:?} x {:?}ᵀ", av.shape(), bv.shape())));
        }
        let out = av.matmul_nt(bv);
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).scaled(factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| gelu(x)).collect();
        let out = Matrix::from_vec(av.rows(), av.cols(), data).expect("same shape");
        self.push(out, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&softmax(av.row(r)));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let rows: Vec<&[f64]> = parts
            .iter()
            .flat_map(|&p| {
                let m = self.value(p);
                (0..m.rows()).map(move |r| m.row(r))
            })
            .collect();
        let out = Matrix::from_rows(&rows)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let av = self.value(a);
        if r >= av.rows() {
            return Err(Error::Shape(format!("row {r} of {:?}", av.shape())));
        }
        let out = Matrix::row_vector(av.row(r).to_vec());
        Ok(self.push(out, Op::Row(a, r)))
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let av = self.value(a);
        if r >= av.rows() || c >= av.cols() {
            return Err(Error::Shape(format!("element ({r},{c}) of {:?}", av.shape())));
        }
        let out = Matrix::scalar(av.get(r, c));
        Ok(self.push(out, Op::Pick(a, r, c)))
    }

    /// Cosine similarity of two row vectors. Norms at or below `eps` are
    /// rejected rather than clamped.
    pub fn cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != 1 || bv.rows() != 1 || av.cols() != bv.cols() {
            return Err(Error::Shape(format!("cosine: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let na = dot(av.data(), av.data()).sqrt();
        let nb = dot(bv.data(), bv.data()).sqrt();
        if !(na > eps && nb > eps) {
            return Err(Error::Degenerate(format!(
                "cosine similarity with norms {na:.3e} and {nb:.3e}"
            )));
        }
        let s = dot(av.data(), bv.data()) / (na * nb);
        Ok(self.push(Matrix::scalar(s), Op::Cosine { a, b, na, nb }))
    }

    pub fn stack_cols(&mut self, scalars: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(scalars.len());
        for &s in scalars {
            if self.shape(s) != (1, 1) {
                return Err(Error::Shape(format!("stack_cols: {:?}", self.shape(s))));
            }
            data.push(self.value(s).item());
        }
        Ok(self.push(Matrix::row_vector(data), Op::StackCols(scalars.to_vec())))
    }

    pub fn nll_pick(&mut self, logits: Var, idx: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != 1 || idx >= lv.cols() {
            return Err(Error::Shape(format!("nll_pick: index {idx} of {:?}", lv.shape())));
        }
        let out = log_sum_exp(lv.data()) - lv.data()[idx];
        Ok(self.push(Matrix::scalar(out), Op::NllPick { logits, idx }))
    }

    pub fn bce_logits(&mut self, logit: Var, target: f64) -> Result<Var> {
        if self.shape(logit) != (1, 1) {
            return Err(Error::Shape(format!("bce_logits: {:?}", self.shape(logit))));
        }
        let z = self.value(logit).item();
        let out = softplus(z) - target * z;
        Ok(self.push(Matrix::scalar(out), Op::BceLogits { logit, target }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != (1, 1) || self.shape(b) != (1, 1) {
            return Err(Error::Shape("div expects scalars".into()));
        }
        let out = self.value(a).item() / self.value(b).item();
        Ok(self.push(Matrix::scalar(out), Op::Div(a, b)))
    }

    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("sum of nothing".into()))?;
        let mut out = self.value(first).clone();
        for &p in &parts[1..] {
            self.same_shape(first, p, "sum")?;
            out.add_assign(self.value(p));
        }
        Ok(self.push(out, Op::Sum(parts.to_vec())))
    }

    /// Mean of equal-shape nodes.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let total = self.sum(parts)?;
        Ok(self.scale(total, 1.0 / parts.len() as f64))
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward seeds a scalar output");
        self.backward_with(out, Matrix::scalar(1.0))
    }

    /// Backpropagates an arbitrary upstream gradient `seed` from `out`.
    pub fn backward_with(&self, out: Var, seed: Matrix) -> Gradients {
        assert_eq!(self.shape(out), seed.shape(), "seed shape");
        let mut grads: Vec<Option<Matrix>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    let wv = self.value(*w);
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, g.matmul(wv));
                    accumulate(&mut grads, *w, g.matmul_tn(xv));
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.matmul_nt(self.value(*b)));
                    accumulate(&mut grads, *b, self.value(*a).matmul_tn(&g));
                }
                Op::MatMulNt(a, b) => {
                    accumulate(&mut grads, *a, g.matmul(self.value(*b)));
                    accumulate(&mut grads, *b, g.matmul_tn(self.value(*a)));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scaled(-1.0));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.scaled(*f)),
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let data = av
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gy)| gy * gelu_grad(x))
                        .collect();
                    let ga = Matrix::from_vec(av.rows(), av.cols(), data).expect("same shape");
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let inner = dot(y.row(r), g.row(r));
                        for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                            *o = yv * (gv - inner);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(&mut grads, p, Matrix::from_vec(rows, cols, slice).expect("slice"));
                        offset += rows;
                    }
                }
                Op::Row(a, r) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Matrix::zeros(rows, cols);
                    ga.row_mut(*r).copy_from_slice(g.data());
                    accumulate(&mut grads, *a, ga);
                }
                Op::Pick(a, r, c) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Matrix::zeros(rows, cols);
                    ga.set(*r, *c, g.item());
                    accumulate(&mut grads, *a, ga);
                }
                Op::Cosine { a, b, na, nb } => {
                    let s = node.value.item();
                    let gs = g.item();
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| gs * (y / (na * nb) - s * x / (na * na)))
                        .collect();
                    let gb: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| gs * (x / (na * nb) - s * y / (nb * nb)))
                        .collect();
                    accumulate(&mut grads, *a, Matrix::row_vector(ga));
                    accumulate(&mut grads, *b, Matrix::row_vector(gb));
                }
                Op::StackCols(parts) => {
                    for (k, &p) in parts.iter().enumerate() {
                        accumulate(&mut grads, p, Matrix::scalar(g.data()[k]));
                    }
                }
                Op::NllPick { logits, idx } => {
                    let gv = g.item();
                    let mut p = softmax(self.value(*logits).data());
                    p[*idx] -= 1.0;
                    let gl = p.into_iter().map(|v| v * gv).collect();
                    accumulate(&mut grads, *logits, Matrix::row_vector(gl));
                }
                Op::BceLogits { logit, target } => {
                    let z = self.value(*logit).item();
                    accumulate(&mut grads, *logit, Matrix::scalar(g.item() * (sigmoid(z) - target)));
                }
                Op::Div(a, b) => {
                    let (x, y) = (self.value(*a).item(), self.value(*b).item());
                    let gv = g.item();
                    accumulate(&mut grads, *a, Matrix::scalar(gv / y));
                    accumulate(&mut grads, *b, Matrix::scalar(-gv * x / (y * y)));
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        accumulate(&mut grads, p, g.clone());
                    }
                }
            }
            grads[i] = Some(g);
        }

        let shapes = self.nodes[..=out.0].iter().map(|n| n.value.shape()).collect();
        Gradients { grads, shapes }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
