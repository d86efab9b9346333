//! Test-time anomaly scoring and gradient attribution.

use serde::{Deserialize, Serialize};

use crate::backbone::EncoderBackend;
use crate::descriptor::TextMatrix;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{anchor_matrix, Head};
use crate::objective::SimilarityFn;
use crate::prompts::TextAnchors;
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

/// Default softmax temperature τ.
pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    /// Normal score `S⁺`.
    pub s_pos: f64,
    /// Abnormal score `S⁻`.
    pub s_neg: f64,
    /// `AS = S⁻ / (S⁻ + S⁺)`.
    pub anomaly_score: f64,
    pub tau: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ScoreNodes {
    pub sim_pos: Var,
    pub sim_neg: Var,
    pub s_pos: Var,
    pub s_neg: Var,
    pub anomaly: Var,
}

impl ScoreNodes {
    pub fn read(&self, tape: &Tape, tau: f64) -> ScorePair {
        ScorePair {
            s_pos: tape.value(self.s_pos).item(),
            s_neg: tape.value(self.s_neg).item(),
            anomaly_score: tape.value(self.anomaly).item(),
            tau,
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Records `S⁺`, `S⁻` (two-way softmax of the cosine similarities over τ)
/// and `AS` for a `1×C` feature against `CT` (`2×C`).
pub fn score_graph(tape: &mut Tape, sim: &SimilarityFn, cf: Var, ct: Var, tau: f64) -> Result<ScoreNodes> {
    check_tau(tau)?;
    let ct_pos = tape.row(ct, 0)?;
    let ct_neg = tape.row(ct, 1)?;
    let sim_pos = sim.graph(tape, cf, ct_pos)?;
    let sim_neg = sim.graph(tape, cf, ct_neg)?;
    let logits = tape.stack_cols(&[sim_pos, sim_neg])?;
    let logits = tape.scale(logits, 1.0 / tau);
    let probs = tape.softmax_rows(logits);
    let s_pos = tape.pick(probs, 0, 0)?;
    let s_neg = tape.pick(probs, 0, 1)?;
    let denom = tape.add(s_neg, s_pos)?;
    let anomaly = tape.div(s_neg, denom)?;
    Ok(ScoreNodes {
        sim_pos,
        sim_neg,
        s_pos,
        s_neg,
        anomaly,
    })
}

pub fn score(cf: &Embedding, ct: &TextMatrix, tau: f64) -> Result<ScorePair> {
    cf.expect_dim(ct.dim(), "CF")?;
    let mut tape = Tape::new();
    let cfv = tape.leaf(cf.as_row());
    let ctv = tape.leaf(ct.matrix().clone());
    let nodes = score_graph(&mut tape, &SimilarityFn::default(), cfv, ctv, tau)?;
    Ok(nodes.read(&tape, tau))
}

/// Channel-averaged `|∂AS/∂pixels|`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl GradMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Grayscale PNG scaled so the largest entry is white.
    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        let max = self.max();
        let raw = self
            .values
            .iter()
            .map(|v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
            .collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("dims");
        img.save(path)?;
        Ok(())
    }
}

/// `|∂AS/∂x|` through the backend and the full head, averaged over channels.
pub fn grad_map(backend: &dyn EncoderBackend, head: &Head, anchors: &TextAnchors, image: &Image) -> Result<GradMap> {
    let grad = crate::backbone::input_gradient(backend, image, |f| {
        let mut tape = Tape::new();
        let vars = head.bind(&mut tape);
        let fv = tape.leaf(f.as_row());
        let av = tape.leaf(anchor_matrix(anchors)?);
        let nodes = head.inference_graph(&mut tape, &vars, fv, av)?;
        let g: Matrix = tape.backward(nodes.score.anomaly).wrt(fv);
        Ok((tape.value(nodes.score.anomaly).item(), g.into_data()))
    })?;
    let (h, w) = grad.dims();
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (0..3).map(|c| grad.get(y, x, c).abs()).sum();
            values.push(s / 3.0);
        }
    }
    Ok(GradMap {
        height: h,
        width: w,
        values,
    })
}
