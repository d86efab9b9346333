//! Encoder backends.
//!
//! An [`EncoderBackend`] maps images and prompts into a shared `C`-dimensional
//! space. The toolkit never trains a backend; it only reads embeddings and,
//! when the backend supports it, pulls gradients back to the input pixels.
//!
//! [`ToyLinearBackend`] is a deterministic stand-in with an analytic
//! Jacobian: nearest-neighbour subsampling, a fixed Gaussian projection and L2
//! normalization. External models plug in through [`BackendRegistry`].

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{Embedding, NORM_EPS};
use crate::error::{Error, Result};
use crate::image::{Image, ImageSample};
use crate::rng;
use crate::tensor::{dot, norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeKind {
    /// Integer-factor subsampling taking the centre pixel of each cell.
    Nearest,
    Bilinear,
}

/// Resize and per-channel normalization applied before encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub resize: ResizeKind,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Preprocessing {
    pub fn identity_nearest() -> Self {
        Self {
            resize: ResizeKind::Nearest,
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

pub trait EncoderBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Embedding length `C`.
    fn embed_dim(&self) -> usize;

    /// Resolution `(H, W)` the encoder consumes after preprocessing.
    fn image_size(&self) -> (usize, usize);

    fn preprocessing(&self) -> &Preprocessing;

    /// Whether [`EncoderBackend::image_vjp`] is available.
    fn differentiable(&self) -> bool;

    fn encode_image(&self, image: &Image) -> Result<Embedding>;

    fn encode_text(&self, prompt: &str) -> Result<Embedding>;

    /// Pulls `grad_embedding = ∂L/∂f(image)` back to `∂L/∂pixels`.
    fn image_vjp(&self, _image: &Image, _grad_embedding: &[f64]) -> Result<Image> {
        Err(Error::Capability(format!(
            "backend '{}' does not provide input gradients",
            self.name()
        )))
    }

    /// Stable identifier of configuration and weights, recorded in reports.
    fn fingerprint(&self) -> String;
}

pub fn encode_image(backend: &dyn EncoderBackend, sample: &ImageSample) -> Result<Embedding> {
    backend.encode_image(&sample.image)
}

pub fn encode_text(backend: &dyn EncoderBackend, prompt: &str) -> Result<Embedding> {
    backend.encode_text(prompt)
}

/// Gradient of `scalar_fn(encode_image(image))` with respect to the pixels.
///
/// `scalar_fn` returns its value together with its gradient with respect to
/// the embedding.
pub fn input_gradient<F>(backend: &dyn EncoderBackend, image: &Image, scalar_fn: F) -> Result<Image>
where
    F: FnOnce(&Embedding) -> Result<(f64, Vec<f64>)>,
{
    if !backend.differentiable() {
        return Err(Error::Capability(format!(
            "backend '{}' is not differentiable",
            backend.name()
        )));
    }
    let embedding = backend.encode_image(image)?;
    let (_, grad) = scalar_fn(&embedding)?;
    embedding.expect_dim(grad.len(), "scalar_fn gradient")?;
    backend.image_vjp(image, &grad)
}

/// Deterministic linear encoder used for testing and desk-scale experiments.
#[derive(Clone, Debug)]
pub struct ToyLinearBackend {
    seed: u64,
    embed_dim: usize,
    height: usize,
    width: usize,
    preprocessing: Preprocessing,
    /// `C × (h·w·3)`, row-major.
    projection: Vec<f64>,
    fingerprint: String,
}

impl ToyLinearBackend {
    pub const DEFAULT_EMBED_DIM: usize = 64;
    pub const DEFAULT_SIZE: usize = 32;

    pub fn new(seed: u64) -> Self {
        Self::with_dims(seed, Self::DEFAULT_EMBED_DIM, Self::DEFAULT_SIZE, Self::DEFAULT_SIZE)
            .expect("default dims are valid")
    }

    pub fn with_dims(seed: u64, embed_dim: usize, height: usize, width: usize) -> Result<Self> {
        if embed_dim == 0 || height == 0 || width == 0 {
            return Err(Error::Parameter(format!(
                "toy backend dims must be positive (C={embed_dim}, {height}x{width})"
            )));
        }
        let mut stream = rng::named_stream(seed, "toy-backend/projection");
        let n = embed_dim * height * width * 3;
        let projection: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut stream)).collect();

        let mut h = Sha256::new();
        h.update(b"toy-linear");
        h.update(seed.to_le_bytes());
        for v in &projection {
            h.update(v.to_le_bytes());
        }
        let fingerprint = format!("toy-linear:{embed_dim}:{height}x{width}:{:x}", h.finalize());

        Ok(Self {
            seed,
            embed_dim,
            height,
            width,
            preprocessing: Preprocessing::identity_nearest(),
            projection,
            fingerprint,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Raw projection weights, for frozen-backbone checks.
    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    fn input_len(&self) -> usize {
        self.height * self.width * 3
    }

    /// Source pixel row/column sampled for each model row/column.
    fn stencil(&self, image: &Image) -> Result<(Vec<usize>, Vec<usize>)> {
        let (h, w) = image.dims();
        if h % self.height != 0 || w % self.width != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} does not subsample to {}x{}",
                self.height, self.width
            )));
        }
        let fy = h / self.height;
        let fx = w / self.width;
        let ys = (0..self.height).map(|i| i * fy + fy / 2).collect();
        let xs = (0..self.width).map(|j| j * fx + fx / 2).collect();
        Ok((ys, xs))
    }

    fn prepare(&self, image: &Image) -> Result<Vec<f64>> {
        if !image.is_finite() {
            return Err(Error::Input("non-finite pixel values".into()));
        }
        let (ys, xs) = self.stencil(image)?;
        let p = &self.preprocessing;
        let mut z = Vec::with_capacity(self.input_len());
        for &y in &ys {
            for &x in &xs {
                for c in 0..3 {
                    z.push((image.get(y, x, c) - p.mean[c]) / p.std[c]);
                }
            }
        }
        Ok(z)
    }

    fn project(&self, z: &[f64]) -> Vec<f64> {
        let n = self.input_len();
        (0..self.embed_dim)
            .map(|r| dot(&self.projection[r * n..(r + 1) * n], z))
            .collect()
    }

    fn text_basis(&self, feature: &str) -> Vec<f64> {
        let key = rng::derive_indexed(rng::derive_seed(self.seed, "toy-backend/text"), fnv1a(feature));
        let mut stream = rng::stream(key);
        (0..self.embed_dim)
            .map(|_| StandardNormal.sample(&mut stream))
            .collect()
    }
}

/// 64-bit FNV-1a.
pub(crate) fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lower-cased alphanumeric tokens.
pub(crate) fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Unigram and bigram features of a prompt, in order of appearance.
pub(crate) fn ngram_features(prompt: &str) -> Vec<String> {
    let tokens = tokenize(prompt);
    let mut feats: Vec<String> = tokens.iter().map(|t| format!("1:{t}")).collect();
    feats.extend(tokens.windows(2).map(|w| format!("2:{} {}", w[0], w[1])));
    feats
}

impl EncoderBackend for ToyLinearBackend {
    fn name(&self) -> &str {
        "toy"
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn preprocessing(&self) -> &Preprocessing {
        &self.preprocessing
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn encode_image(&self, image: &Image) -> Result<Embedding> {
        let z = self.prepare(image)?;
        Embedding::normalized(self.project(&z))
    }

    fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        let feats = ngram_features(prompt);
        if feats.is_empty() {
            return Err(Error::Input(format!("prompt {prompt:?} has no tokens")));
        }
        let mut acc = vec![0.0; self.embed_dim];
        for f in &feats {
            for (a, b) in acc.iter_mut().zip(self.text_basis(f)) {
                *a += b;
            }
        }
        Embedding::normalized(acc)
    }

    fn image_vjp(&self, image: &Image, grad_embedding: &[f64]) -> Result<Image> {
        if grad_embedding.len() != self.embed_dim {
            return Err(Error::Shape(format!(
                "embedding gradient of length {}, expected {}",
                grad_embedding.len(),
                self.embed_dim
            )));
        }
        let z = self.prepare(image)?;
        let e = self.project(&z);
        let n_e = norm(&e);
        if n_e.is_nan() || n_e <= NORM_EPS {
            return Err(Error::Degenerate("zero pre-normalization embedding".into()));
        }
        // F = e/|e|  =>  ∂L/∂e = (g - F (F·g)) / |e|
        let f: Vec<f64> = e.iter().map(|v| v / n_e).collect();
        let fg = dot(&f, grad_embedding);
        let g_e: Vec<f64> = grad_embedding
            .iter()
            .zip(&f)
            .map(|(g, fv)| (g - fv * fg) / n_e)
            .collect();

        let n = self.input_len();
        let mut g_z = vec![0.0; n];
        for (r, ge) in g_e.iter().enumerate() {
            let row = &self.projection[r * n..(r + 1) * n];
            for (o, w) in g_z.iter_mut().zip(row) {
                *o += ge * w;
            }
        }

        let (ys, xs) = self.stencil(image)?;
        let std = self.preprocessing.std;
        let mut out = Image::filled(image.height(), image.width(), 0.0);
        let mut k = 0;
        for &y in &ys {
            for &x in &xs {
                for (c, s) in std.iter().enumerate() {
                    let v = out.get(y, x, c) + g_z[k] / s;
                    out.set(y, x, c, v);
                    k += 1;
                }
            }
        }
        Ok(out)
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

/// Backend selection as written in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Toy {
        #[serde(default = "default_toy_seed")]
        seed: u64,
        #[serde(default = "default_toy_dim")]
        embed_dim: usize,
        #[serde(default = "default_toy_size")]
        image_size: (usize, usize),
    },
    /// A pre-trained model provided by a factory registered under `name`.
    External {
        name: String,
        weights_path: PathBuf,
        embed_dim: usize,
        image_size: (usize, usize),
        #[serde(default)]
        options: BTreeMap<String, serde_json::Value>,
    },
}

fn default_toy_seed() -> u64 {
    7
}
fn default_toy_dim() -> usize {
    ToyLinearBackend::DEFAULT_EMBED_DIM
}
fn default_toy_size() -> (usize, usize) {
    (ToyLinearBackend::DEFAULT_SIZE, ToyLinearBackend::DEFAULT_SIZE)
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Toy {
            seed: default_toy_seed(),
            embed_dim: default_toy_dim(),
            image_size: default_toy_size(),
        }
    }
}

impl BackendConfig {
    pub fn image_size(&self) -> (usize, usize) {
        match self {
            BackendConfig::Toy { image_size, .. } | BackendConfig::External { image_size, .. } => *image_size,
        }
    }
}

pub type BackendFactory = fn(&BackendConfig) -> Result<Box<dyn EncoderBackend>>;

/// Name → constructor table for backends.
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl BackendRegistry {
    pub fn with_builtins() -> Self {
        let mut factories: BTreeMap<String, BackendFactory> = BTreeMap::new();
        factories.insert("toy".into(), build_toy);
        Self { factories }
    }

    pub fn register(&mut self, name: impl Into<String>, factory: BackendFactory) {
        self.factories.insert(name.into(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, config: &BackendConfig) -> Result<Box<dyn EncoderBackend>> {
        let name = match config {
            BackendConfig::Toy { .. } => "toy",
            BackendConfig::External { name, .. } => name.as_str(),
        };
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| Error::Capability(format!("no backend registered under '{name}'")))?;
        let backend = factory(config)?;
        let (dim, size) = match config {
            BackendConfig::Toy {
                embed_dim, image_size, ..
            }
            | BackendConfig::External {
                embed_dim, image_size, ..
            } => (*embed_dim, *image_size),
        };
        if backend.embed_dim() != dim || backend.image_size() != size {
            return Err(Error::Config(format!(
                "backend '{name}' reports C={} {:?}, config declares C={dim} {size:?}",
                backend.embed_dim(),
                backend.image_size()
            )));
        }
        Ok(backend)
    }
}

fn build_toy(config: &BackendConfig) -> Result<Box<dyn EncoderBackend>> {
    match config {
        BackendConfig::Toy {
            seed,
            embed_dim,
            image_size,
        } => Ok(Box::new(ToyLinearBackend::with_dims(
            *seed,
            *embed_dim,
            image_size.0,
            image_size.1,
        )?)),
        BackendConfig::External { .. } => Err(Error::Config("toy factory given an external config".into())),
    }
}
