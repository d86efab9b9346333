//! Image-level classification metrics with abnormal as the positive class.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Input(format!("label {l} is not 0 or 1")));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Input("NaN score".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    fn counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (pos, self.labels.len() - pos)
    }

    fn require_both(&self, what: &str) -> Result<(usize, usize)> {
        let (pos, neg) = self.counts();
        if pos == 0 || neg == 0 {
            return Err(Error::MetricUndefined(format!(
                "{what} needs both classes ({pos} abnormal, {neg} normal)"
            )));
        }
        Ok((pos, neg))
    }

    /// `(score, abnormal count, normal count)` per distinct score, descending.
    fn groups_desc(&self) -> Vec<(f64, usize, usize)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].partial_cmp(&self.scores[a]).unwrap_or(Ordering::Equal));
        let mut groups: Vec<(f64, usize, usize)> = Vec::new();
        for i in idx {
            let s = self.scores[i];
            let (p, n) = if self.labels[i] == 1 { (1, 0) } else { (0, 1) };
            match groups.last_mut() {
                Some(g) if g.0 == s => {
                    g.1 += p;
                    g.2 += n;
                }
                _ => groups.push((s, p, n)),
            }
        }
        groups
    }
}

/// Probability that a random abnormal sample outscores a random normal one,
/// ties counting one half.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let (pos, neg) = set.require_both("AUROC")?;
    // Walk groups from the lowest score upwards, counting normals below.
    let mut normals_below = 0usize;
    let mut twice_u: u128 = 0;
    for (_, p, n) in set.groups_desc().into_iter().rev() {
        twice_u += (p as u128) * (2 * normals_below as u128 + n as u128);
        normals_below += n;
    }
    Ok(twice_u as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Average precision: `Σ (Rₖ − Rₖ₋₁)·Pₖ` over descending distinct thresholds.
pub fn aupr(set: &ScoredSet) -> Result<f64> {
    let (pos, _) = set.require_both("AUPR")?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    for (_, p, n) in set.groups_desc() {
        tp += p;
        fp += n;
        if p > 0 {
            area += (p as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(area)
}

/// Best F1 over the thresholds "score ≥ t" for every observed score and +∞.
pub fn f1_max(set: &ScoredSet) -> Result<f64> {
    let (pos, _) = set.counts();
    if pos == 0 {
        return Err(Error::MetricUndefined(
            "F1-max needs at least one abnormal sample".into(),
        ));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    // +∞ predicts nothing abnormal: F1 = 0
    let mut best = 0.0f64;
    for (_, p, n) in set.groups_desc() {
        tp += p;
        fp += n;
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + (pos - tp)) as f64;
        best = best.max(f1);
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub class: String,
    pub k_shot: usize,
    pub seed: u64,
    pub auroc: f64,
    pub aupr: f64,
    pub f1_max: f64,
}

impl MetricsRecord {
    pub fn compute(class: &str, k_shot: usize, seed: u64, set: &ScoredSet) -> Result<Self> {
        Ok(Self {
            class: class.to_string(),
            k_shot,
            seed,
            auroc: auroc(set)?,
            aupr: aupr(set)?,
            f1_max: f1_max(set)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    /// Sample standard deviation over `√n`; `None` for a single run.
    pub std_error: Option<f64>,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std_error = (values.len() > 1).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        });
        Self { mean, std_error }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub class: String,
    pub k_shot: usize,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub auroc: MeanSe,
    pub aupr: MeanSe,
    pub f1_max: MeanSe,
}

/// Groups runs by (class, k) and reports mean ± standard error.
pub fn aggregate(records: &[MetricsRecord]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, usize), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.class.clone(), r.k_shot)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((class, k_shot), rs)| {
            let col = |f: fn(&MetricsRecord) -> f64| MeanSe::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            AggregateRow {
                class,
                k_shot,
                runs: rs.len(),
                seeds: rs.iter().map(|r| r.seed).collect(),
                auroc: col(|r| r.auroc),
                aupr: col(|r| r.aupr),
                f1_max: col(|r| r.f1_max),
            }
        })
        .collect()
}
