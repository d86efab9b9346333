//! The trainable head: adapters plus descriptor, wired into the inference
//! graph and the paired training loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{self, AdapterParams, AdapterVars, ResidualRatios};
use crate::descriptor::{self, DescriptorParams, DescriptorVars, TextMatrix};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::objective::{self, CeMode, LossParts, LossWeights, SimilarityFn};
use crate::prompts::TextAnchors;
use crate::score::{self, ScoreNodes, ScorePair};
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

/// How the `2×C` key stack for text-to-image attention is formed for a
/// single test image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferTfMode {
    /// `(TF_test, TF_test)`.
    #[default]
    Duplicate,
    /// `(TF(support prototype), TF_test)`, the prototype being the normalized
    /// mean of the support embeddings.
    SupportPrototype,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadOptions {
    pub tau: f64,
    pub tau_ce: f64,
    pub use_tf: bool,
    pub use_vt: bool,
    pub ce_mode: CeMode,
    pub infer_tf_mode: InferTfMode,
    pub loss: LossWeights,
    pub similarity: SimilarityFn,
}

impl Default for HeadOptions {
    fn default() -> Self {
        Self {
            tau: score::DEFAULT_TAU,
            tau_ce: score::DEFAULT_TAU,
            use_tf: true,
            use_vt: true,
            ce_mode: CeMode::default(),
            infer_tf_mode: InferTfMode::default(),
            loss: LossWeights {
                gamma2: 0.7,
                use_contrastive: true,
                use_ce: true,
            },
            similarity: SimilarityFn::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub adapters: AdapterParams,
    pub descriptor: DescriptorParams,
    pub options: HeadOptions,
    /// Normalized mean support embedding, used by
    /// [`InferTfMode::SupportPrototype`].
    pub support_prototype: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub adapters: AdapterVars,
    pub descriptor: DescriptorVars,
}

/// Visual-side nodes of one image.
#[derive(Clone, Copy, Debug)]
pub struct ImageBranch {
    pub af: Var,
    pub tf: Option<Var>,
    pub cf: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct InferenceNodes {
    pub cf: Var,
    pub ct: Var,
    pub vt: Option<Var>,
    pub score: ScoreNodes,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub cf: Embedding,
    pub ct: TextMatrix,
    pub score: ScorePair,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchLossNodes {
    pub total: Var,
    pub i2t: Var,
    pub t2i: Var,
    pub ce: Var,
    /// `VT` of the first pair, `None` when the branch is disabled.
    pub first_vt: Option<Var>,
}

impl BatchLossNodes {
    pub fn parts(&self, tape: &Tape) -> LossParts {
        LossParts {
            i2t: tape.value(self.i2t).item(),
            t2i: tape.value(self.t2i).item(),
            ce: tape.value(self.ce).item(),
        }
    }
}

/// Visual embeddings of one normal image and its synthesized negatives.
#[derive(Clone, Debug)]
pub struct TrainingGroup<'a> {
    pub positive: &'a Embedding,
    pub negatives: Vec<&'a Embedding>,
}

impl Head {
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        reduction: usize,
        ratios: ResidualRatios,
        gamma1: f64,
        options: HeadOptions,
        rng: &mut R,
    ) -> Result<Self> {
        let adapters = AdapterParams::init(dim, reduction, ratios, rng)?;
        let descriptor = DescriptorParams::init(dim, gamma1, rng);
        Ok(Self {
            adapters,
            descriptor,
            options,
            support_prototype: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.adapters.dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            adapters: self.adapters.bind(tape),
            descriptor: self.descriptor.bind(tape),
        }
    }

    /// Trainable tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut t = self.adapters.tensors();
        t.extend(self.descriptor.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut t = self.adapters.tensors_mut();
        t.extend(self.descriptor.tensors_mut());
        t
    }

    /// Leaf variables of [`Head::bind`] in the order of [`Head::tensors`].
    pub fn vars_in_order(vars: &HeadVars) -> Vec<Var> {
        let a = &vars.adapters;
        let d = &vars.descriptor;
        vec![
            a.down.weight,
            a.down.bias,
            a.up.weight,
            a.up.bias,
            a.text.weight,
            a.text.bias,
            d.i2t.weight,
            d.i2t.bias,
            d.t2i.weight,
            d.t2i.bias,
        ]
    }

    /// `ψ` from the stacked `(T⁺, T⁻)` anchors.
    pub fn psi_graph(&self, tape: &mut Tape, vars: &HeadVars, anchors: Var) -> Result<Var> {
        adapt::text_graph(tape, &vars.adapters, self.adapters.beta, anchors)
    }

    fn needs_tf(&self) -> bool {
        self.options.use_tf || self.options.use_vt
    }

    pub fn image_branch(&self, tape: &mut Tape, vars: &HeadVars, f: Var, psi: Var) -> Result<ImageBranch> {
        let af = adapt::image_graph(tape, &vars.adapters, self.adapters.alpha, f)?;
        let tf = if self.needs_tf() {
            Some(descriptor::i2t_graph(tape, &vars.descriptor, f, psi)?.output)
        } else {
            None
        };
        let cf = descriptor::fuse_image_graph(tape, af, tf.filter(|_| self.options.use_tf))?;
        Ok(ImageBranch { af, tf, cf })
    }

    /// `CT` for a `(TF⁺, TF⁻)` key pair, plus `VT` when that branch is on.
    pub fn text_fusion(
        &self,
        tape: &mut Tape,
        vars: &HeadVars,
        psi: Var,
        tf_keys: Option<(Var, Var)>,
    ) -> Result<(Var, Option<Var>)> {
        let vt = match (self.options.use_vt, tf_keys) {
            (true, Some((a, b))) => {
                let stack = tape.concat_rows(&[a, b])?;
                Some(descriptor::t2i_graph(tape, &vars.descriptor, stack, psi)?.output)
            }
            _ => None,
        };
        let ct = descriptor::fuse_text_graph(tape, self.descriptor.gamma1, psi, vt)?;
        Ok((ct, vt))
    }

    /// Full test-time graph from a visual embedding leaf to the anomaly score.
    pub fn inference_graph(&self, tape: &mut Tape, vars: &HeadVars, f: Var, anchors: Var) -> Result<InferenceNodes> {
        let psi = self.psi_graph(tape, vars, anchors)?;
        let branch = self.image_branch(tape, vars, f, psi)?;
        let keys = match (branch.tf, self.options.infer_tf_mode) {
            (None, _) => None,
            (Some(tf), InferTfMode::Duplicate) => Some((tf, tf)),
            (Some(tf), InferTfMode::SupportPrototype) => {
                let proto = self
                    .support_prototype
                    .as_ref()
                    .ok_or_else(|| Error::Config("support_prototype mode needs a stored support prototype".into()))?;
                let pv = tape.leaf(Matrix::row_vector(proto.clone()));
                let ptf = descriptor::i2t_graph(tape, &vars.descriptor, pv, psi)?.output;
                Some((ptf, tf))
            }
        };
        let (ct, vt) = self.text_fusion(tape, vars, psi, keys)?;
        let score = score::score_graph(tape, &self.options.similarity, branch.cf, ct, self.options.tau)?;
        Ok(InferenceNodes {
            cf: branch.cf,
            ct,
            vt,
            score,
        })
    }

    pub fn infer(&self, f: &Embedding, anchors: &TextAnchors) -> Result<Inference> {
        f.expect_dim(self.dim(), "visual embedding")?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let fv = tape.leaf(f.as_row());
        let av = tape.leaf(anchor_matrix(anchors)?);
        let nodes = self.inference_graph(&mut tape, &vars, fv, av)?;
        Ok(Inference {
            cf: Embedding::from_row(tape.value(nodes.cf)),
            ct: TextMatrix::from_matrix(tape.value(nodes.ct).clone())?,
            score: nodes.score.read(&tape, self.options.tau),
        })
    }

    /// Total loss over every (positive, negative) pair of the batch.
    ///
    /// The contrastive terms are averaged over pairs, the cross-entropy over
    /// the two samples of every pair.
    pub fn batch_loss_graph(
        &self,
        tape: &mut Tape,
        vars: &HeadVars,
        anchors: Var,
        groups: &[(Var, Vec<Var>)],
    ) -> Result<BatchLossNodes> {
        self.options.loss.validate()?;
        let sim = self.options.similarity;
        let psi = self.psi_graph(tape, vars, anchors)?;
        let at_pos = tape.row(psi, 0)?;
        let at_neg = tape.row(psi, 1)?;

        let mut i2t_terms = Vec::new();
        let mut t2i_terms = Vec::new();
        let mut ce_terms = Vec::new();
        let mut first_vt = None;
        for (pos, negs) in groups {
            let bp = self.image_branch(tape, vars, *pos, psi)?;
            for &neg in negs {
                let bn = self.image_branch(tape, vars, neg, psi)?;
                let keys = bp.tf.zip(bn.tf);
                let (ct, vt) = self.text_fusion(tape, vars, psi, keys)?;
                if first_vt.is_none() {
                    first_vt = vt;
                }
                let c = objective::contrastive_graph(tape, &sim, bp.cf, bn.cf, at_pos, at_neg)?;
                i2t_terms.push(c.i2t);
                t2i_terms.push(c.t2i);
                let mode = self.options.ce_mode;
                let tau_ce = self.options.tau_ce;
                ce_terms.push(objective::ce_graph(tape, &sim, mode, tau_ce, bp.cf, ct, 0)?);
                ce_terms.push(objective::ce_graph(tape, &sim, mode, tau_ce, bn.cf, ct, 1)?);
            }
        }
        if i2t_terms.is_empty() {
            return Err(Error::Input("batch has no (positive, negative) pairs".into()));
        }
        let i2t = tape.mean(&i2t_terms)?;
        let t2i = tape.mean(&t2i_terms)?;
        let ce = tape.mean(&ce_terms)?;

        let mut parts = Vec::new();
        if self.options.loss.use_contrastive {
            parts.push(i2t);
            parts.push(t2i);
        }
        if self.options.loss.use_ce {
            parts.push(tape.scale(ce, self.options.loss.gamma2));
        }
        let total = tape.sum(&parts)?;
        Ok(BatchLossNodes {
            total,
            i2t,
            t2i,
            ce,
            first_vt,
        })
    }

    /// Loss value and per-tensor gradients (in [`Head::tensors`] order).
    pub fn loss_and_gradients(
        &self,
        anchors: &TextAnchors,
        groups: &[TrainingGroup<'_>],
    ) -> Result<(LossParts, f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let av = tape.leaf(anchor_matrix(anchors)?);
        let mut bound = Vec::with_capacity(groups.len());
        for g in groups {
            g.positive.expect_dim(self.dim(), "positive embedding")?;
            let p = tape.leaf(g.positive.as_row());
            let mut negs = Vec::with_capacity(g.negatives.len());
            for n in &g.negatives {
                n.expect_dim(self.dim(), "negative embedding")?;
                negs.push(tape.leaf(n.as_row()));
            }
            bound.push((p, negs));
        }
        let nodes = self.batch_loss_graph(&mut tape, &vars, av, &bound)?;
        let total = tape.value(nodes.total).item();
        let grads = tape.backward(nodes.total);
        let per_tensor = Self::vars_in_order(&vars).into_iter().map(|v| grads.wrt(v)).collect();
        Ok((nodes.parts(&tape), total, per_tensor))
    }
}

pub fn anchor_matrix(anchors: &TextAnchors) -> Result<Matrix> {
    Ok(TextMatrix::new(&anchors.normal, &anchors.abnormal)?.matrix().clone())
}
