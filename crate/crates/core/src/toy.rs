//! Procedural toy corpus: a class is a fixed texture, normal images are noisy
//! photometric variations of it, and test anomalies are synthesized from
//! held-out normals.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{build_episode_from_pool, Episode, Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::image::{Image, ImageSample, Label};
use crate::rng::{derive_seed, named_stream, StreamRng};
use crate::synth::{self, NsaParams, SynthParams};

/// NSA patch scale used for both training negatives and test anomalies on
/// the toy corpus. The default (a sixteenth of the short side) gives patches
/// too small to register through a 64-dim random projection.
pub const TOY_GAMMA_SCALE: f64 = 6.0;

/// Training configuration for toy episodes: the VisA preset with NSA
/// negatives at [`TOY_GAMMA_SCALE`] and one sample per optimizer step.
pub fn toy_train_config(k_shot: usize) -> Result<TrainConfig> {
    TrainConfig::resolve(
        None,
        &serde_json::json!({
            "preset": "visa",
            "k_shot": k_shot,
            "batch_size": 1,
            "synth": {"method": "nsa", "gamma_scale": TOY_GAMMA_SCALE},
        }),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCorpusSpec {
    pub class_name: String,
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_abnormal: usize,
    /// Standard deviation of the per-image gain and offset.
    pub photometric_jitter: f64,
    /// Standard deviation of i.i.d. pixel noise.
    pub pixel_noise: f64,
    /// How test anomalies are synthesized; its seed is overridden.
    pub test_synth: SynthParams,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            class_name: "toy".into(),
            height: 32,
            width: 32,
            n_train: 16,
            n_test_normal: 40,
            n_test_abnormal: 40,
            photometric_jitter: 0.01,
            pixel_noise: 0.01,
            test_synth: SynthParams::Nsa(NsaParams {
                anomalies_per_image: 1,
                gamma_scale: Some(TOY_GAMMA_SCALE),
                ..Default::default()
            }),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub class_name: String,
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

/// The class texture: a dark, faintly striped background carrying a few
/// bright soft-edged blobs, drawn independently per channel.
fn base_texture(h: usize, w: usize, rng: &mut StreamRng) -> Vec<f64> {
    struct Channel {
        freq: (f64, f64),
        phase: f64,
        blobs: Vec<(f64, f64, f64, f64)>,
    }
    let short = h.min(w) as f64;
    let channels: Vec<Channel> = (0..3)
        .map(|_| Channel {
            freq: (rng.random_range(1.0..4.0), rng.random_range(1.0..4.0)),
            phase: rng.random_range(0.0..2.0 * PI),
            blobs: (0..4)
                .map(|_| {
                    (
                        rng.random_range(0.0..h as f64),
                        rng.random_range(0.0..w as f64),
                        rng.random_range(0.06..0.14) * short,
                        rng.random_range(0.5..0.8),
                    )
                })
                .collect(),
        })
        .collect();
    let mut data = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
            for (c, ch) in channels.iter().enumerate() {
                let mut v = 0.1 + 0.05 * (2.0 * PI * (ch.freq.0 * fy + ch.freq.1 * fx) + ch.phase).sin();
                for &(by, bx, r, a) in &ch.blobs {
                    let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                    v += a * (-d2 / (2.0 * r * r)).exp();
                }
                data[(y * w + x) * 3 + c] = v.min(1.0);
            }
        }
    }
    data
}

fn normal_variant(base: &[f64], spec: &ToyCorpusSpec, rng: &mut StreamRng, id: String) -> Result<ImageSample> {
    let jitter = Normal::new(0.0, spec.photometric_jitter.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Parameter(e.to_string()))?;
    let noise =
        Normal::new(0.0, spec.pixel_noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::Parameter(e.to_string()))?;
    let gain = 1.0 + jitter.sample(rng);
    let offset = jitter.sample(rng);
    let data = base
        .iter()
        .map(|&b| (gain * b + offset + noise.sample(rng)).clamp(0.0, 1.0))
        .collect();
    ImageSample::real(Image::new(spec.height, spec.width, data)?, Label::Normal, id)
}

/// Generates train normals, test normals and synthesized test anomalies.
/// Test anomalies are made from normals that appear in neither other split.
pub fn toy_corpus(spec: &ToyCorpusSpec) -> Result<ToyCorpus> {
    if spec.n_train == 0 || spec.n_test_normal == 0 || spec.n_test_abnormal == 0 {
        return Err(Error::Parameter("toy corpus needs non-empty splits".into()));
    }
    let base = base_texture(spec.height, spec.width, &mut named_stream(spec.seed, "toy-base"));
    let mut rng = named_stream(spec.seed, "toy-samples");
    let name = &spec.class_name;
    let mut make = |prefix: &str, n: usize| -> Result<Vec<ImageSample>> {
        (0..n)
            .map(|i| normal_variant(&base, spec, &mut rng, format!("{name}/{prefix}/{i:03}")))
            .collect()
    };
    let train = make("train", spec.n_train)?;
    let mut test = make("test_good", spec.n_test_normal)?;
    let donors = make("held_out", spec.n_test_abnormal)?;

    let per = spec.test_synth.anomalies_per_image();
    let needed_sources = spec.n_test_abnormal.div_ceil(per);
    let test_synth = spec
        .test_synth
        .clone()
        .with_seed(derive_seed(spec.seed, "toy-test-synth"));
    // At least two sources so that NSA blends across images.
    let sources = needed_sources.max(2).min(donors.len());
    let mut anomalies = synth::build_negatives(&donors[..sources], &test_synth)?;
    anomalies.truncate(spec.n_test_abnormal);
    if anomalies.len() < spec.n_test_abnormal {
        return Err(Error::Parameter(format!(
            "only {} test anomalies could be synthesized",
            anomalies.len()
        )));
    }
    test.extend(anomalies);
    Ok(ToyCorpus {
        class_name: spec.class_name.clone(),
        train,
        test,
    })
}

impl ToyCorpus {
    /// A k-shot episode drawn from this corpus with `config`'s negatives.
    pub fn episode(&self, config: &TrainConfig, seed: u64) -> Result<Episode> {
        build_episode_from_pool(
            &self.class_name,
            &self.train,
            self.test.clone(),
            config.k_shot,
            seed,
            &config.synth,
        )
    }
}

/// Writes the corpus as PNGs plus a manifest; returns the manifest path.
pub fn write_corpus(corpus: &ToyCorpus, dir: &Path) -> Result<std::path::PathBuf> {
    let mut entries = Vec::new();
    for (split, samples) in [(Split::Train, &corpus.train), (Split::Test, &corpus.test)] {
        for (i, s) in samples.iter().enumerate() {
            let sub = match (split, s.label) {
                (Split::Train, _) => "train/good",
                (Split::Test, Label::Normal) => "test/good",
                (Split::Test, Label::Abnormal) => "test/synthetic",
            };
            let folder = dir.join(&corpus.class_name).join(sub);
            fs::create_dir_all(&folder).map_err(|e| Error::io(&folder, e))?;
            let path = folder.join(format!("{i:03}.png"));
            s.image.save_png(&path)?;
            let mask_path = match &s.mask {
                Some(m) => {
                    let gt = dir.join(&corpus.class_name).join("ground_truth/synthetic");
                    fs::create_dir_all(&gt).map_err(|e| Error::io(&gt, e))?;
                    let p = gt.join(format!("{i:03}_mask.png"));
                    m.save_png(&p)?;
                    Some(p)
                }
                None => None,
            };
            entries.push(ManifestEntry {
                path,
                class_name: corpus.class_name.clone(),
                split,
                label: s.label,
                mask_path,
            });
        }
    }
    let manifest = Manifest::new("toy", entries)?;
    let path = dir.join("manifest.jsonl");
    manifest.write(&path)?;
    Ok(path)
}
