//! Residual image and text adapters.
//!
//! `AF = α₁·A_f(F) + α₂·F` with `A_f` a two-layer bottleneck MLP, and
//! `AT = β₁·A_g(T) + β₂·T` with `A_g` a single affine layer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

/// Default bottleneck reduction `C → C/r → C`.
pub const DEFAULT_REDUCTION: usize = 4;
/// Std of adapter output-layer weights at initialization.
pub const OUTPUT_INIT_STD: f64 = 1e-3;

/// `y = x·Wᵀ + b` with `W: out×in`, `b: 1×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Affine {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn gaussian<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..input * output).map(|_| dist.sample(rng)).collect();
        Self {
            weight: Matrix::from_vec(output, input, data).expect("shape"),
            bias: Matrix::zeros(1, output),
        }
    }

    /// Identity map plus Gaussian noise of the given std.
    pub fn near_identity<R: Rng + ?Sized>(dim: usize, noise_std: f64, rng: &mut R) -> Self {
        let mut a = Self::gaussian(dim, dim, noise_std, rng);
        for i in 0..dim {
            let v = a.weight.get(i, i) + 1.0;
            a.weight.set(i, i, v);
        }
        a
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> AffineVars {
        AffineVars {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub weight: Var,
    pub bias: Var,
}

impl AffineVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }
}

/// `C → C/r → C` bottleneck with a GELU between the layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMlp {
    pub down: Affine,
    pub up: Affine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub image_mlp: ImageMlp,
    pub text_mlp: Affine,
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualRatios {
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub down: AffineVars,
    pub up: AffineVars,
    pub text: AffineVars,
}

fn check_ratio(name: &str, pair: (f64, f64)) -> Result<()> {
    for v in [pair.0, pair.1] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Parameter(format!(
                "{name} entries must lie in [0,1], got {pair:?}"
            )));
        }
    }
    Ok(())
}

impl AdapterParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, reduction: usize, ratios: ResidualRatios, rng: &mut R) -> Result<Self> {
        if reduction == 0 || !dim.is_multiple_of(reduction) {
            return Err(Error::Parameter(format!(
                "reduction {reduction} does not divide embedding dim {dim}"
            )));
        }
        check_ratio("alpha", ratios.alpha)?;
        check_ratio("beta", ratios.beta)?;
        let hidden = dim / reduction;
        let down = Affine::gaussian(dim, hidden, 1.0 / (dim as f64).sqrt(), rng);
        let up = Affine::gaussian(hidden, dim, OUTPUT_INIT_STD, rng);
        let text_mlp = Affine::gaussian(dim, dim, OUTPUT_INIT_STD, rng);
        Ok(Self {
            image_mlp: ImageMlp { down, up },
            text_mlp,
            alpha: ratios.alpha,
            beta: ratios.beta,
        })
    }

    pub fn dim(&self) -> usize {
        self.image_mlp.down.input_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> AdapterVars {
        AdapterVars {
            down: self.image_mlp.down.bind(tape),
            up: self.image_mlp.up.bind(tape),
            text: self.text_mlp.bind(tape),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("image_adapter.down.weight", &self.image_mlp.down.weight),
            ("image_adapter.down.bias", &self.image_mlp.down.bias),
            ("image_adapter.up.weight", &self.image_mlp.up.weight),
            ("image_adapter.up.bias", &self.image_mlp.up.bias),
            ("text_adapter.weight", &self.text_mlp.weight),
            ("text_adapter.bias", &self.text_mlp.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("image_adapter.down.weight", &mut self.image_mlp.down.weight),
            ("image_adapter.down.bias", &mut self.image_mlp.down.bias),
            ("image_adapter.up.weight", &mut self.image_mlp.up.weight),
            ("image_adapter.up.bias", &mut self.image_mlp.up.bias),
            ("text_adapter.weight", &mut self.text_mlp.weight),
            ("text_adapter.bias", &mut self.text_mlp.bias),
        ]
    }
}

/// Records `α₁·A_f(F) + α₂·F` for every row of `f`.
pub fn image_graph(tape: &mut Tape, vars: &AdapterVars, alpha: (f64, f64), f: Var) -> Result<Var> {
    let hidden = vars.down.apply(tape, f)?;
    let hidden = tape.gelu(hidden);
    let adapted = vars.up.apply(tape, hidden)?;
    let a = tape.scale(adapted, alpha.0);
    let b = tape.scale(f, alpha.1);
    tape.add(a, b)
}

/// Records `β₁·A_g(T) + β₂·T` for every row of `t`.
pub fn text_graph(tape: &mut Tape, vars: &AdapterVars, beta: (f64, f64), t: Var) -> Result<Var> {
    let adapted = vars.text.apply(tape, t)?;
    let a = tape.scale(adapted, beta.0);
    let b = tape.scale(t, beta.1);
    tape.add(a, b)
}

pub fn adapt_image(params: &AdapterParams, f: &Embedding) -> Result<Embedding> {
    f.expect_dim(params.dim(), "image embedding")?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let x = tape.leaf(f.as_row());
    let out = image_graph(&mut tape, &vars, params.alpha, x)?;
    Ok(Embedding::from_row(tape.value(out)))
}

pub fn adapt_text(params: &AdapterParams, t: &Embedding) -> Result<Embedding> {
    t.expect_dim(params.dim(), "text embedding")?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let x = tape.leaf(t.as_row());
    let out = text_graph(&mut tape, &vars, params.beta, x)?;
    Ok(Embedding::from_row(tape.value(out)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    const MVTEC: ResidualRatios = ResidualRatios {
        alpha: (0.4, 0.6),
        beta: (0.4, 0.6),
    };

    fn random_embedding(seed: u64, dim: usize) -> Embedding {
        let mut r = rng::stream(seed);
        Embedding::new((0..dim).map(|_| r.random::<f64>() - 0.5).collect())
    }

    fn params(seed: u64, ratios: ResidualRatios) -> AdapterParams {
        AdapterParams::init(64, 4, ratios, &mut rng::stream(seed)).unwrap()
    }

    #[test]
    fn identity_residual() {
        let p = params(
            1,
            ResidualRatios {
                alpha: (0.0, 1.0),
                beta: (0.0, 1.0),
            },
        );
        let f = random_embedding(2, 64);
        assert_eq!(adapt_image(&p, &f).unwrap().values, f.values);
        assert_eq!(adapt_text(&p, &f).unwrap().values, f.values);
    }

    #[test]
    fn zero_output_layers_scale_the_input() {
        let mut p = params(1, MVTEC);
        p.image_mlp.up = Affine::zeros(16, 64);
        p.text_mlp = Affine::zeros(64, 64);
        let f = random_embedding(3, 64);
        let expect: Vec<f64> = f.values.iter().map(|v| 0.6 * v).collect();
        assert_eq!(adapt_image(&p, &f).unwrap().values, expect);
        assert_eq!(adapt_text(&p, &f).unwrap().values, expect);
    }

    #[test]
    fn shape_and_ratio_errors() {
        let p = params(1, MVTEC);
        assert!(matches!(
            adapt_image(&p, &random_embedding(1, 63)),
            Err(Error::Shape(_))
        ));
        let bad = ResidualRatios {
            alpha: (1.2, 0.0),
            beta: (0.4, 0.6),
        };
        assert!(AdapterParams::init(64, 4, bad, &mut rng::stream(0)).is_err());
        assert!(AdapterParams::init(64, 5, MVTEC, &mut rng::stream(0)).is_err());
    }

    #[test]
    fn initial_output_layers_are_small() {
        let p = params(9, MVTEC);
        let max = p.image_mlp.up.weight.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-2);
    }
}
