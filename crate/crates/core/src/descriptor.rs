//! Cross-modal attention between the visual embedding and the adapted text
//! anchors.
//!
//! Image-to-text: `TF = Linear(softmax(F·ψᵀ/√C)·ψ)`, queried by the
//! *original* visual embedding `F`. Text-to-image:
//! `VT = Linear(softmax(ψ·TFᵀ/√C)·TF)` over the stacked `(TF⁺, TF⁻)`.
//! Fusion: `CF = AF + TF`, `CT = ψ + γ₁·VT`.

use rand::Rng;

use crate::adapt::{Affine, AffineVars};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

/// Projection init noise around the identity.
pub const PROJ_INIT_NOISE: f64 = 1e-3;

/// `2×C` stack of (normal, abnormal) rows, always in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct TextMatrix(Matrix);

impl TextMatrix {
    pub fn new(normal: &Embedding, abnormal: &Embedding) -> Result<Self> {
        if normal.dim() != abnormal.dim() {
            return Err(Error::Shape(format!(
                "text rows of length {} and {}",
                normal.dim(),
                abnormal.dim()
            )));
        }
        Ok(Self(Matrix::from_rows(&[&normal.values, &abnormal.values])?))
    }

    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if m.rows() != 2 {
            return Err(Error::Shape(format!("text matrix needs 2 rows, got {}", m.rows())));
        }
        Ok(Self(m))
    }

    pub fn normal(&self) -> &[f64] {
        self.0.row(0)
    }

    pub fn abnormal(&self) -> &[f64] {
        self.0.row(1)
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorParams {
    pub proj_i2t: Affine,
    pub proj_t2i: Affine,
    pub gamma1: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct DescriptorVars {
    pub i2t: AffineVars,
    pub t2i: AffineVars,
}

impl DescriptorParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, gamma1: f64, rng: &mut R) -> Self {
        Self {
            proj_i2t: Affine::near_identity(dim, PROJ_INIT_NOISE, rng),
            proj_t2i: Affine::near_identity(dim, PROJ_INIT_NOISE, rng),
            gamma1,
        }
    }

    /// Both projections set to exact identities.
    pub fn identity(dim: usize, gamma1: f64) -> Self {
        let id = Affine {
            weight: Matrix::identity(dim),
            bias: Matrix::zeros(1, dim),
        };
        Self {
            proj_i2t: id.clone(),
            proj_t2i: id,
            gamma1,
        }
    }

    pub fn dim(&self) -> usize {
        self.proj_i2t.input_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> DescriptorVars {
        DescriptorVars {
            i2t: self.proj_i2t.bind(tape),
            t2i: self.proj_t2i.bind(tape),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("descriptor.i2t.weight", &self.proj_i2t.weight),
            ("descriptor.i2t.bias", &self.proj_i2t.bias),
            ("descriptor.t2i.weight", &self.proj_t2i.weight),
            ("descriptor.t2i.bias", &self.proj_t2i.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("descriptor.i2t.weight", &mut self.proj_i2t.weight),
            ("descriptor.i2t.bias", &mut self.proj_i2t.bias),
            ("descriptor.t2i.weight", &mut self.proj_t2i.weight),
            ("descriptor.t2i.bias", &mut self.proj_t2i.bias),
        ]
    }
}

/// Attention nodes of one cross-attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttentionNodes {
    pub weights: Var,
    pub output: Var,
}

fn scaled_attention(tape: &mut Tape, query: Var, keys: Var, proj: &AffineVars) -> Result<AttentionNodes> {
    let dim = tape.shape(keys).1;
    let logits = tape.matmul_nt(query, keys)?;
    let logits = tape.scale(logits, 1.0 / (dim as f64).sqrt());
    let weights = tape.softmax_rows(logits);
    let mixed = tape.matmul(weights, keys)?;
    let output = proj.apply(tape, mixed)?;
    Ok(AttentionNodes { weights, output })
}

/// `TF` for a `1×C` visual query against `ψ` (`2×C`).
pub fn i2t_graph(tape: &mut Tape, vars: &DescriptorVars, f: Var, psi: Var) -> Result<AttentionNodes> {
    if tape.shape(f).0 != 1 || tape.shape(psi).0 != 2 {
        return Err(Error::Shape(format!(
            "i2t attention: query {:?}, text {:?}",
            tape.shape(f),
            tape.shape(psi)
        )));
    }
    scaled_attention(tape, f, psi, &vars.i2t)
}

/// `VT` (`2×C`) with `ψ` rows querying the `(TF⁺, TF⁻)` stack.
pub fn t2i_graph(tape: &mut Tape, vars: &DescriptorVars, tf_pair: Var, psi: Var) -> Result<AttentionNodes> {
    if tape.shape(tf_pair).0 != 2 || tape.shape(psi).0 != 2 {
        return Err(Error::Shape(format!(
            "t2i attention: keys {:?}, text {:?}",
            tape.shape(tf_pair),
            tape.shape(psi)
        )));
    }
    scaled_attention(tape, psi, tf_pair, &vars.t2i)
}

/// `CT = ψ + γ₁·VT`; `vt = None` leaves `ψ` untouched.
pub fn fuse_text_graph(tape: &mut Tape, gamma1: f64, psi: Var, vt: Option<Var>) -> Result<Var> {
    match vt {
        Some(vt) => {
            let scaled = tape.scale(vt, gamma1);
            tape.add(psi, scaled)
        }
        None => Ok(psi),
    }
}

/// `CF = AF + TF`; `tf = None` passes `AF` through.
pub fn fuse_image_graph(tape: &mut Tape, af: Var, tf: Option<Var>) -> Result<Var> {
    match tf {
        Some(tf) => tape.add(af, tf),
        None => Ok(af),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct I2tOutput {
    pub weights: [f64; 2],
    pub tf: Embedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct T2iOutput {
    /// Row-wise attention weights, `weights[row][key]`.
    pub weights: [[f64; 2]; 2],
    pub vt: Matrix,
}

pub fn i2t_attention(params: &DescriptorParams, f: &Embedding, psi: &TextMatrix) -> Result<I2tOutput> {
    f.expect_dim(params.dim(), "visual query")?;
    if psi.dim() != params.dim() {
        return Err(Error::Shape("text matrix width differs from descriptor dim".into()));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let fv = tape.leaf(f.as_row());
    let pv = tape.leaf(psi.matrix().clone());
    let nodes = i2t_graph(&mut tape, &vars, fv, pv)?;
    let w = tape.value(nodes.weights);
    Ok(I2tOutput {
        weights: [w.get(0, 0), w.get(0, 1)],
        tf: Embedding::from_row(tape.value(nodes.output)),
    })
}

pub fn t2i_attention(params: &DescriptorParams, tf_pair: &Matrix, psi: &TextMatrix) -> Result<T2iOutput> {
    if tf_pair.shape() != (2, params.dim()) || psi.dim() != params.dim() {
        return Err(Error::Shape(format!(
            "t2i attention: keys {:?}, text width {}",
            tf_pair.shape(),
            psi.dim()
        )));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let kv = tape.leaf(tf_pair.clone());
    let pv = tape.leaf(psi.matrix().clone());
    let nodes = t2i_graph(&mut tape, &vars, kv, pv)?;
    let w = tape.value(nodes.weights);
    Ok(T2iOutput {
        weights: [[w.get(0, 0), w.get(0, 1)], [w.get(1, 0), w.get(1, 1)]],
        vt: tape.value(nodes.output).clone(),
    })
}

/// Returns `(CF, CT)`.
pub fn fuse(
    params: &DescriptorParams,
    af: &Embedding,
    tf: &Embedding,
    psi: &TextMatrix,
    vt: &Matrix,
) -> Result<(Embedding, TextMatrix)> {
    let dim = psi.dim();
    af.expect_dim(dim, "AF")?;
    tf.expect_dim(dim, "TF")?;
    if vt.shape() != (2, dim) {
        return Err(Error::Shape(format!("VT {:?}, expected (2, {dim})", vt.shape())));
    }
    let mut tape = Tape::new();
    let afv = tape.leaf(af.as_row());
    let tfv = tape.leaf(tf.as_row());
    let pv = tape.leaf(psi.matrix().clone());
    let vtv = tape.leaf(vt.clone());
    let cf = fuse_image_graph(&mut tape, afv, Some(tfv))?;
    let ct = fuse_text_graph(&mut tape, params.gamma1, pv, Some(vtv))?;
    Ok((
        Embedding::from_row(tape.value(cf)),
        TextMatrix::from_matrix(tape.value(ct).clone())?,
    ))
}
