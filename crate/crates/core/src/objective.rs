//! Training losses: the paired image-to-text and text-to-image contrastive
//! terms, the cross-entropy term on the abnormal text row, and their
//! weighted sum.

use serde::{Deserialize, Serialize};

use crate::descriptor::TextMatrix;
use crate::embedding::{Embedding, NORM_EPS};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

/// Cosine similarity with a zero-norm guard.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityFn {
    pub epsilon: f64,
}

impl Default for SimilarityFn {
    fn default() -> Self {
        Self { epsilon: NORM_EPS }
    }
}

impl SimilarityFn {
    pub fn cosine(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let av = tape.leaf(Matrix::row_vector(a.to_vec()));
        let bv = tape.leaf(Matrix::row_vector(b.to_vec()));
        let s = tape.cosine(av, bv, self.epsilon)?;
        Ok(tape.value(s).item())
    }

    pub fn graph(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        tape.cosine(a, b, self.epsilon)
    }
}

/// How the scalar cross-entropy term is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeMode {
    /// Logistic BCE on `s(CF, CT⁻)/τ_ce` against the 0/1 label.
    #[default]
    AbnormalLogistic,
    /// Two-way softmax over `(s(CF, CT⁺), s(CF, CT⁻))/τ_ce`.
    TwoWaySoftmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma2: f64,
    pub use_contrastive: bool,
    pub use_ce: bool,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.use_contrastive && !self.use_ce {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        if !self.gamma2.is_finite() {
            return Err(Error::Config("gamma2 must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub i2t: f64,
    pub t2i: f64,
    pub ce: f64,
}

pub fn total_loss(weights: &LossWeights, parts: &LossParts) -> Result<f64> {
    weights.validate()?;
    let mut total = 0.0;
    if weights.use_contrastive {
        total += parts.t2i + parts.i2t;
    }
    if weights.use_ce {
        total += weights.gamma2 * parts.ce;
    }
    Ok(total)
}

/// Nodes of both contrastive terms for one (positive, negative) pair.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveNodes {
    pub i2t: Var,
    pub t2i: Var,
}

/// Records both contrastive terms. No temperature is applied.
pub fn contrastive_graph(
    tape: &mut Tape,
    sim: &SimilarityFn,
    cf_pos: Var,
    cf_neg: Var,
    at_pos: Var,
    at_neg: Var,
) -> Result<ContrastiveNodes> {
    let s_pp = sim.graph(tape, cf_pos, at_pos)?;
    let s_pn = sim.graph(tape, cf_pos, at_neg)?;
    let s_nn = sim.graph(tape, cf_neg, at_neg)?;
    let s_np = sim.graph(tape, cf_neg, at_pos)?;

    // image → text: each image's softmax over the two text anchors
    let row_pos = tape.stack_cols(&[s_pp, s_pn])?;
    let row_neg = tape.stack_cols(&[s_nn, s_np])?;
    let a = tape.nll_pick(row_pos, 0)?;
    let b = tape.nll_pick(row_neg, 0)?;
    let i2t = tape.sum(&[a, b])?;

    // text → image: each anchor's softmax over the two images
    let col_pos = tape.stack_cols(&[s_pp, s_np])?;
    let col_neg = tape.stack_cols(&[s_nn, s_pn])?;
    let c = tape.nll_pick(col_pos, 0)?;
    let d = tape.nll_pick(col_neg, 0)?;
    let t2i = tape.sum(&[c, d])?;

    Ok(ContrastiveNodes { i2t, t2i })
}

/// Cross-entropy of one visual feature against `CT` (`2×C`) for a 0/1 label.
pub fn ce_graph(
    tape: &mut Tape,
    sim: &SimilarityFn,
    mode: CeMode,
    tau_ce: f64,
    cf: Var,
    ct: Var,
    label: u8,
) -> Result<Var> {
    if label > 1 {
        return Err(Error::Input(format!("label {label} is not 0 or 1")));
    }
    let ct_neg = tape.row(ct, 1)?;
    let s_neg = sim.graph(tape, cf, ct_neg)?;
    match mode {
        CeMode::AbnormalLogistic => {
            let logit = tape.scale(s_neg, 1.0 / tau_ce);
            tape.bce_logits(logit, f64::from(label))
        }
        CeMode::TwoWaySoftmax => {
            let ct_pos = tape.row(ct, 0)?;
            let s_pos = sim.graph(tape, cf, ct_pos)?;
            let logits = tape.stack_cols(&[s_pos, s_neg])?;
            let logits = tape.scale(logits, 1.0 / tau_ce);
            tape.nll_pick(logits, usize::from(label))
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn check_same_dim(items: &[&Embedding]) -> Result<usize> {
    let dim = items[0].dim();
    for e in items {
        e.expect_dim(dim, "loss input")?;
    }
    Ok(dim)
}

fn contrastive_values(
    cf_pos: &Embedding,
    cf_neg: &Embedding,
    at_pos: &Embedding,
    at_neg: &Embedding,
) -> Result<(f64, f64)> {
    check_same_dim(&[cf_pos, cf_neg, at_pos, at_neg])?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = [cf_pos, cf_neg, at_pos, at_neg]
        .iter()
        .map(|e| tape.leaf(e.as_row()))
        .collect();
    let n = contrastive_graph(&mut tape, &SimilarityFn::default(), vars[0], vars[1], vars[2], vars[3])?;
    Ok((tape.value(n.i2t).item(), tape.value(n.t2i).item()))
}

pub fn loss_i2t(cf_pos: &Embedding, cf_neg: &Embedding, at_pos: &Embedding, at_neg: &Embedding) -> Result<f64> {
    contrastive_values(cf_pos, cf_neg, at_pos, at_neg).map(|(i2t, _)| i2t)
}

pub fn loss_t2i(cf_pos: &Embedding, cf_neg: &Embedding, at_pos: &Embedding, at_neg: &Embedding) -> Result<f64> {
    contrastive_values(cf_pos, cf_neg, at_pos, at_neg).map(|(_, t2i)| t2i)
}

/// Mean logistic cross-entropy of `s(CF, CT⁻)/τ_ce` against the labels.
pub fn loss_ce(cf_batch: &[Embedding], ct_neg: &Embedding, labels: &[u8], tau_ce: f64) -> Result<f64> {
    // The normal row is not read in this mode; any nonzero placeholder works.
    let ct = TextMatrix::new(ct_neg, ct_neg)?;
    loss_ce_with_mode(cf_batch, &ct, labels, tau_ce, CeMode::AbnormalLogistic)
}

pub fn loss_ce_with_mode(
    cf_batch: &[Embedding],
    ct: &TextMatrix,
    labels: &[u8],
    tau_ce: f64,
    mode: CeMode,
) -> Result<f64> {
    check_tau(tau_ce)?;
    if cf_batch.is_empty() || cf_batch.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} features for {} labels",
            cf_batch.len(),
            labels.len()
        )));
    }
    let mut tape = Tape::new();
    let ctv = tape.leaf(ct.matrix().clone());
    let mut terms = Vec::with_capacity(cf_batch.len());
    for (cf, &label) in cf_batch.iter().zip(labels) {
        cf.expect_dim(ct.dim(), "CF")?;
        let cfv = tape.leaf(cf.as_row());
        terms.push(ce_graph(
            &mut tape,
            &SimilarityFn::default(),
            mode,
            tau_ce,
            cfv,
            ctv,
            label,
        )?);
    }
    let mean = tape.mean(&terms)?;
    Ok(tape.value(mean).item())
}
