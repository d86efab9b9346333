//! Aggregation of per-run metrics files into a summary table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{aggregate, AggregateRow, MeanSe, MetricsRecord};

pub const METRICS_FILE: &str = "metrics.json";

/// Every `metrics.json` below `dir`, in path order.
pub fn find_metrics(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Layout(dir.to_path_buf()));
    }
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(path, e.into())
        })?;
        if entry.file_type().is_file() && entry.file_name() == METRICS_FILE {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

pub fn load_metrics(paths: &[PathBuf]) -> Result<Vec<MetricsRecord>> {
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Mean over classes of the per-class mean, for one shot count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMean {
    pub k_shot: usize,
    pub classes: usize,
    pub auroc: f64,
    pub aupr: f64,
    pub f1_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub rows: Vec<AggregateRow>,
    pub class_means: Vec<ClassMean>,
}

impl Summary {
    pub fn from_records(records: &[MetricsRecord]) -> Self {
        let rows = aggregate(records);
        let mut by_k: BTreeMap<usize, Vec<&AggregateRow>> = BTreeMap::new();
        for r in &rows {
            by_k.entry(r.k_shot).or_default().push(r);
        }
        let class_means = by_k
            .into_iter()
            .map(|(k_shot, rs)| {
                let mean = |f: fn(&AggregateRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
                ClassMean {
                    k_shot,
                    classes: rs.len(),
                    auroc: mean(|r| r.auroc.mean),
                    aupr: mean(|r| r.aupr.mean),
                    f1_max: mean(|r| r.f1_max.mean),
                }
            })
            .collect();
        Self {
            runs: records.len(),
            rows,
            class_means,
        }
    }

    /// Loads and summarizes every run below `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let paths = find_metrics(dir)?;
        if paths.is_empty() {
            return Err(Error::Layout(dir.join(METRICS_FILE)));
        }
        Ok(Self::from_records(&load_metrics(&paths)?))
    }

    /// Plain-text table, metrics in percent.
    pub fn table(&self) -> String {
        fn cell(m: &MeanSe) -> String {
            match m.std_error {
                Some(se) => format!("{:.1} ± {:.1}", 100.0 * m.mean, 100.0 * se),
                None => format!("{:.1}", 100.0 * m.mean),
            }
        }
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>3} {:>4}  {:>12}  {:>12}  {:>12}",
            "class", "k", "runs", "auroc", "aupr", "f1_max"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} {:>3} {:>4}  {:>12}  {:>12}  {:>12}",
                r.class,
                r.k_shot,
                r.runs,
                cell(&r.auroc),
                cell(&r.aupr),
                cell(&r.f1_max)
            );
        }
        for m in &self.class_means {
            let _ = writeln!(
                s,
                "{:<20} {:>3} {:>4}  {:>12.1}  {:>12.1}  {:>12.1}",
                format!("mean ({} classes)", m.classes),
                m.k_shot,
                "",
                100.0 * m.auroc,
                100.0 * m.aupr,
                100.0 * m.f1_max
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::write_json;

    fn record(class: &str, k: usize, seed: u64, auroc: f64) -> MetricsRecord {
        MetricsRecord {
            class: class.into(),
            k_shot: k,
            seed,
            auroc,
            aupr: auroc,
            f1_max: auroc,
        }
    }

    #[test]
    fn summarizes_a_directory_tree() {
        let dir = tempfile::tempdir().unwrap();
        let recs = [
            record("bottle", 2, 0, 0.9),
            record("bottle", 2, 1, 1.0),
            record("cable", 2, 0, 0.8),
        ];
        for (i, r) in recs.iter().enumerate() {
            let d = dir.path().join(format!("run{i}/nested"));
            fs::create_dir_all(&d).unwrap();
            write_json(&d.join(METRICS_FILE), r).unwrap();
        }
        fs::write(dir.path().join("notes.json"), "{}").unwrap();
        let s = Summary::from_dir(dir.path()).unwrap();
        assert_eq!(s.runs, 3);
        assert_eq!(s.rows.len(), 2);
        assert_eq!(s.rows[0].runs, 2);
        assert!((s.rows[0].auroc.mean - 0.95).abs() < 1e-12);
        assert!((s.class_means[0].auroc - 0.875).abs() < 1e-12);
        let table = s.table();
        assert!(table.contains("95.0 ± 5.0"), "{table}");
        assert_eq!(table.lines().count(), 4);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Summary::from_dir(dir.path()), Err(Error::Layout(_))));
        assert!(Summary::from_dir(&dir.path().join("missing")).is_err());
    }
}
