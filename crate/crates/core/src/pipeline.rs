//! One-stage training of the head on an episode, evaluation, and report
//! artifacts.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{encode_image, EncoderBackend};
use crate::checkpoint::{snap_to_f32, Checkpoint, CheckpointMeta};
use crate::config::TrainConfig;
use crate::data::Episode;
use crate::descriptor::TextMatrix;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::image::{ImageSample, Label};
use crate::metrics::{MetricsRecord, ScoredSet};
use crate::model::{Head, TrainingGroup};
use crate::optim::Optimizer;
use crate::prompts::{PromptEnsemble, TextAnchors};
use crate::rng::named_stream;
use crate::score;

pub const HISTOGRAM_BINS: usize = 20;

/// The prompt ensemble for `class_name` under `config`.
pub fn prompt_ensemble(config: &TrainConfig, class_name: &str) -> Result<PromptEnsemble> {
    let object = config.object_label.as_deref().unwrap_or(class_name);
    let ensemble = match &config.prompts {
        Some(p) => PromptEnsemble::load(p)?.with_object(object),
        None => PromptEnsemble::winclip(object),
    };
    ensemble.validate()?;
    Ok(ensemble)
}

/// Anchors plus the full expanded prompt list (normal then abnormal).
pub fn text_anchors(
    backend: &dyn EncoderBackend,
    config: &TrainConfig,
    class_name: &str,
) -> Result<(TextAnchors, Vec<String>)> {
    let ensemble = prompt_ensemble(config, class_name)?;
    let anchors = TextAnchors::from_ensemble(backend, &ensemble, config.normalize_anchor)?;
    let (mut prompts, abnormal) = ensemble.expand()?;
    prompts.extend(abnormal);
    Ok((anchors, prompts))
}

/// Freshly initialized head for a run rooted at `seed`.
pub fn init_head(config: &TrainConfig, dim: usize, seed: u64) -> Result<Head> {
    Head::init(
        dim,
        config.reduction,
        config.ratios(),
        config.gamma1,
        config.head_options(),
        &mut named_stream(seed, "init"),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub total: f64,
    pub i2t: f64,
    pub t2i: f64,
    pub ce: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub loss_curve: Vec<LossRecord>,
    pub config_hash: String,
    pub seconds: f64,
}

fn encode_all(backend: &dyn EncoderBackend, samples: &[ImageSample]) -> Result<Vec<Embedding>> {
    samples.par_iter().map(|s| encode_image(backend, s)).collect()
}

fn param_norms(head: &Head) -> String {
    head.tensors()
        .into_iter()
        .map(|(n, m)| format!("{n}={:.4e}", m.frobenius_norm()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn learning_rates(head: &Head, config: &TrainConfig) -> Vec<f64> {
    head.tensors()
        .into_iter()
        .map(|(name, _)| {
            if name.starts_with("image_adapter") {
                config.lr_image_adapter
            } else if name.starts_with("text_adapter") {
                config.lr_text_adapter
            } else {
                config.lr_descriptor
            }
        })
        .collect()
}

/// Normalized mean of the support embeddings.
fn support_prototype(support: &[Embedding]) -> Result<Vec<f64>> {
    let dim = support[0].dim();
    let mut mean = vec![0.0; dim];
    for e in support {
        for (m, v) in mean.iter_mut().zip(&e.values) {
            *m += v / support.len() as f64;
        }
    }
    Ok(Embedding::normalized(mean)?.values)
}

/// Trains adapters and descriptor jointly on (support, negatives) pairs.
///
/// One epoch is one pass over every support image, in a freshly shuffled
/// order, `batch_size` support images (each with all of its negatives) per
/// step. The backbone is only read.
pub fn train(episode: &Episode, config: &TrainConfig, backend: &dyn EncoderBackend) -> Result<TrainOutcome> {
    config.validate()?;
    let start = Instant::now();
    let fingerprint = backend.fingerprint();
    let (anchors, prompts) = text_anchors(backend, config, &episode.class_name)?;
    let config_hash = config.hash(&fingerprint, &prompts)?;

    if episode.support.is_empty() {
        return Err(Error::Input("episode has no support images".into()));
    }
    let support = encode_all(backend, &episode.support)?;
    let negatives = encode_all(backend, &episode.negatives)?;
    let groups_of: Vec<Vec<usize>> = (0..support.len())
        .map(|i| {
            episode
                .negative_owner
                .iter()
                .enumerate()
                .filter(|(_, &o)| o == i)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    if groups_of.iter().any(Vec::is_empty) {
        return Err(Error::Input("every support image needs at least one negative".into()));
    }
    let group = |i: usize| TrainingGroup {
        positive: &support[i],
        negatives: groups_of[i].iter().map(|&j| &negatives[j]).collect(),
    };

    let mut head = init_head(config, backend.embed_dim(), episode.seed)?;
    let shapes: Vec<(usize, usize)> = head.tensors().iter().map(|(_, m)| m.shape()).collect();
    let mut optimizer = Optimizer::new(config.optimizer_config(), &shapes, learning_rates(&head, config))?;
    let mut order_rng = named_stream(episode.seed, "order");
    let batch_size = config.effective_batch_size(episode.k);

    let all: Vec<TrainingGroup> = (0..support.len()).map(group).collect();
    let (parts, total, _) = head.loss_and_gradients(&anchors, &all)?;
    let mut loss_curve = vec![LossRecord {
        epoch: 0,
        total,
        i2t: parts.i2t,
        t2i: parts.t2i,
        ce: parts.ce,
    }];

    let mut order: Vec<usize> = (0..support.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let groups: Vec<TrainingGroup> = chunk.iter().map(|&i| group(i)).collect();
            let (parts, total, grads) = head.loss_and_gradients(&anchors, &groups)?;
            if !total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    param_norms: param_norms(&head),
                });
            }
            let mut params: Vec<_> = head.tensors_mut().into_iter().map(|(_, m)| m).collect();
            optimizer.step(&mut params, &grads)?;
            for (s, v) in sums.iter_mut().zip([total, parts.i2t, parts.t2i, parts.ce]) {
                *s += v;
            }
            batches += 1;
        }
        let n = batches as f64;
        loss_curve.push(LossRecord {
            epoch,
            total: sums[0] / n,
            i2t: sums[1] / n,
            t2i: sums[2] / n,
            ce: sums[3] / n,
        });
        log::debug!("epoch {epoch}: loss {:.6}", sums[0] / n);
    }

    if backend.fingerprint() != fingerprint {
        return Err(Error::Validation("backbone changed during training".into()));
    }

    head.support_prototype = Some(support_prototype(&support)?);
    let meta = checkpoint_meta(episode, config, backend, &head, config_hash.clone());
    Ok(TrainOutcome {
        checkpoint: stored(meta, head, anchors),
        loss_curve,
        config_hash,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// A checkpoint at storage precision, so saving and loading it is exact.
fn stored(meta: CheckpointMeta, mut head: Head, mut anchors: TextAnchors) -> Checkpoint {
    for (_, m) in head.tensors_mut() {
        snap_to_f32(m.data_mut());
    }
    snap_to_f32(&mut anchors.normal.values);
    snap_to_f32(&mut anchors.abnormal.values);
    if let Some(p) = head.support_prototype.as_mut() {
        snap_to_f32(p);
    }
    Checkpoint { meta, head, anchors }
}

fn checkpoint_meta(
    episode: &Episode,
    config: &TrainConfig,
    backend: &dyn EncoderBackend,
    head: &Head,
    config_hash: String,
) -> CheckpointMeta {
    CheckpointMeta {
        class_name: episode.class_name.clone(),
        k_shot: episode.k,
        seed: episode.seed,
        embed_dim: head.dim(),
        hidden: head.adapters.image_mlp.down.output_dim(),
        alpha: head.adapters.alpha,
        beta: head.adapters.beta,
        gamma1: head.descriptor.gamma1,
        options: head.options,
        normalize_anchor: config.normalize_anchor,
        config_hash,
        backend_name: backend.name().to_string(),
        backend_fingerprint: backend.fingerprint(),
    }
}

/// The checkpoint a run would start from, before any update.
pub fn untrained(episode: &Episode, config: &TrainConfig, backend: &dyn EncoderBackend) -> Result<Checkpoint> {
    config.validate()?;
    let (anchors, prompts) = text_anchors(backend, config, &episode.class_name)?;
    let config_hash = config.hash(&backend.fingerprint(), &prompts)?;
    let mut head = init_head(config, backend.embed_dim(), episode.seed)?;
    let support = encode_all(backend, &episode.support)?;
    head.support_prototype = Some(support_prototype(&support)?);
    let meta = checkpoint_meta(episode, config, backend, &head, config_hash);
    Ok(stored(meta, head, anchors))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub label: Label,
    pub anomaly_score: f64,
    pub s_pos: f64,
    pub s_neg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub normal: usize,
    pub abnormal: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub config_hash: String,
    pub class_name: String,
    pub k_shot: usize,
    pub seed: u64,
    pub scores: Vec<ScoreRow>,
    pub metrics: MetricsRecord,
    pub loss_curve: Vec<LossRecord>,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// Checks that a checkpoint can be applied to `class_name` with `backend`.
pub fn check_compatible(checkpoint: &Checkpoint, class_name: &str, backend: &dyn EncoderBackend) -> Result<()> {
    let meta = &checkpoint.meta;
    if meta.class_name != class_name {
        return Err(Error::Compatibility(format!(
            "checkpoint trained on class {:?}, episode is {:?}",
            meta.class_name, class_name
        )));
    }
    if meta.embed_dim != backend.embed_dim() {
        return Err(Error::Compatibility(format!(
            "checkpoint embedding dim {} vs backend {}",
            meta.embed_dim,
            backend.embed_dim()
        )));
    }
    if meta.backend_fingerprint != backend.fingerprint() {
        return Err(Error::Compatibility(format!(
            "checkpoint made with backend {} ({}), not the configured one",
            meta.backend_name, meta.backend_fingerprint
        )));
    }
    Ok(())
}

/// Scores samples with a checkpoint.
pub fn score_samples(
    checkpoint: &Checkpoint,
    backend: &dyn EncoderBackend,
    samples: &[ImageSample],
) -> Result<Vec<ScoreRow>> {
    samples
        .par_iter()
        .map(|s| {
            let f = encode_image(backend, s)?;
            let inf = checkpoint.head.infer(&f, &checkpoint.anchors)?;
            Ok(ScoreRow {
                id: s.source_id.clone(),
                label: s.label,
                anomaly_score: inf.score.anomaly_score,
                s_pos: inf.score.s_pos,
                s_neg: inf.score.s_neg,
            })
        })
        .collect()
}

/// Scores the episode's test split and computes metrics.
pub fn evaluate(checkpoint: &Checkpoint, episode: &Episode, backend: &dyn EncoderBackend) -> Result<EpisodeReport> {
    check_compatible(checkpoint, &episode.class_name, backend)?;
    let start = Instant::now();
    let scores = score_samples(checkpoint, backend, &episode.test)?;
    let set = scored_set(&scores)?;
    let metrics = MetricsRecord::compute(&episode.class_name, episode.k, episode.seed, &set)?;
    Ok(EpisodeReport {
        config_hash: checkpoint.meta.config_hash.clone(),
        class_name: episode.class_name.clone(),
        k_shot: episode.k,
        seed: episode.seed,
        scores,
        metrics,
        loss_curve: Vec::new(),
        train_seconds: 0.0,
        eval_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Zero-shot baseline: frozen image embeddings scored directly against the
/// prompt anchors, bypassing adapters and descriptor.
pub fn zero_shot(episode: &Episode, config: &TrainConfig, backend: &dyn EncoderBackend) -> Result<EpisodeReport> {
    config.validate()?;
    let start = Instant::now();
    let (anchors, prompts) = text_anchors(backend, config, &episode.class_name)?;
    let ct = TextMatrix::new(&anchors.normal, &anchors.abnormal)?;
    let scores = episode
        .test
        .par_iter()
        .map(|s| {
            let f = encode_image(backend, s)?;
            let pair = score::score(&f, &ct, config.tau)?;
            Ok(ScoreRow {
                id: s.source_id.clone(),
                label: s.label,
                anomaly_score: pair.anomaly_score,
                s_pos: pair.s_pos,
                s_neg: pair.s_neg,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let metrics = MetricsRecord::compute(&episode.class_name, episode.k, episode.seed, &scored_set(&scores)?)?;
    Ok(EpisodeReport {
        config_hash: config.hash(&backend.fingerprint(), &prompts)?,
        class_name: episode.class_name.clone(),
        k_shot: episode.k,
        seed: episode.seed,
        scores,
        metrics,
        loss_curve: Vec::new(),
        train_seconds: 0.0,
        eval_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Writes frozen (`F`) and adapted (`CF`) embeddings of `samples` as CSV
/// rows `id,label,stage,e0..`, for external projection.
pub fn write_embeddings(
    path: &Path,
    checkpoint: &Checkpoint,
    backend: &dyn EncoderBackend,
    samples: &[ImageSample],
) -> Result<()> {
    let rows = samples
        .par_iter()
        .map(|s| {
            let f = encode_image(backend, s)?;
            let cf = checkpoint.head.infer(&f, &checkpoint.anchors)?.cf;
            Ok((s, f, cf))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_path(path)?;
    let dim = checkpoint.meta.embed_dim;
    let mut header = vec!["id".to_string(), "label".into(), "stage".into()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for (s, f, cf) in &rows {
        for (stage, e) in [("frozen", f), ("adapted", cf)] {
            let mut rec = vec![s.source_id.clone(), s.label.as_target().to_string(), stage.to_string()];
            rec.extend(e.values.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains, evaluates, and merges the loss curve into the report.
pub fn run_episode(
    episode: &Episode,
    config: &TrainConfig,
    backend: &dyn EncoderBackend,
) -> Result<(TrainOutcome, EpisodeReport)> {
    let outcome = train(episode, config, backend)?;
    let mut report = evaluate(&outcome.checkpoint, episode, backend)?;
    report.loss_curve = outcome.loss_curve.clone();
    report.train_seconds = outcome.seconds;
    Ok((outcome, report))
}

pub fn scored_set(rows: &[ScoreRow]) -> Result<ScoredSet> {
    ScoredSet::new(
        rows.iter().map(|r| r.anomaly_score).collect(),
        rows.iter().map(|r| r.label.as_target()).collect(),
    )
}

/// Counts per class in `bins` equal bins over `[0, 1]`.
pub fn histogram(rows: &[ScoreRow], bins: usize) -> Vec<HistogramBin> {
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            lo: b as f64 / bins as f64,
            hi: (b + 1) as f64 / bins as f64,
            normal: 0,
            abnormal: 0,
        })
        .collect();
    for r in rows {
        let b = ((r.anomaly_score * bins as f64) as usize).min(bins - 1);
        match r.label {
            Label::Normal => out[b].normal += 1,
            Label::Abnormal => out[b].abnormal += 1,
        }
    }
    out
}

/// Side-by-side bar chart of normal (blue) and abnormal (red) counts.
pub fn save_histogram_png(bins: &[HistogramBin], path: &Path) -> Result<()> {
    const BAR: u32 = 8;
    const HEIGHT: u32 = 160;
    let width = bins.len() as u32 * (2 * BAR + 4) + 4;
    let mut img = image::RgbImage::from_pixel(width, HEIGHT + 8, image::Rgb([255, 255, 255]));
    let peak = bins.iter().map(|b| b.normal.max(b.abnormal)).max().unwrap_or(0).max(1) as f64;
    for (i, b) in bins.iter().enumerate() {
        let x0 = 4 + i as u32 * (2 * BAR + 4);
        for (offset, count, colour) in [(0, b.normal, [60, 90, 200]), (BAR, b.abnormal, [210, 60, 50])] {
            let h = (count as f64 / peak * HEIGHT as f64).round() as u32;
            for x in x0 + offset..x0 + offset + BAR {
                for y in (HEIGHT + 4 - h)..HEIGHT + 4 {
                    img.put_pixel(x, y, image::Rgb(colour));
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl EpisodeReport {
    /// Writes report.json, metrics.json, scores.csv, loss_curve.csv,
    /// histogram.csv and histogram.png into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("report.json"), self)?;
        write_json(&dir.join("metrics.json"), &self.metrics)?;
        write_csv(&dir.join("scores.csv"), &self.scores)?;
        write_csv(&dir.join("loss_curve.csv"), &self.loss_curve)?;
        let bins = histogram(&self.scores, HISTOGRAM_BINS);
        write_csv(&dir.join("histogram.csv"), &bins)?;
        save_histogram_png(&bins, &dir.join("histogram.png"))
    }
}
