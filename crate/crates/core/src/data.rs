//! Dataset manifests, the MVTec-AD directory convention, and k-shot episodes.
//!
//! A manifest is a JSON-lines file. The optional first line is a header
//! `{"manifest_version": "v1", "dataset_name": "..."}`; every other line is
//! an entry `{"path", "class_name", "split", "label", "mask_path"?}` with
//! paths relative to the manifest's directory.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ImageSample, Label};
use crate::rng::{derive_seed, named_stream};
use crate::synth::{self, SynthParams};

pub const MANIFEST_VERSION: &str = "v1";
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub class_name: String,
    pub split: Split,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    manifest_version: String,
    #[serde(default)]
    dataset_name: Option<String>,
}

/// Entry paths are stored resolved (joined onto the manifest's directory).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub dataset_name: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(dataset_name: impl Into<String>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self {
            dataset_name: dataset_name.into(),
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    /// Checks non-emptiness, train-split normality and path uniqueness.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Validation("empty manifest".into()));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.split == Split::Train && e.label != Label::Normal {
                return Err(Error::Validation(format!(
                    "abnormal image in train split: {}",
                    e.path.display()
                )));
            }
            if !seen.insert(&e.path) {
                return Err(Error::Validation(format!("duplicate path {}", e.path.display())));
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| e.class_name.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn entries_for<'a>(
        &'a self,
        class_name: &'a str,
        split: Split,
    ) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries
            .iter()
            .filter(move |e| e.class_name == class_name && e.split == split)
    }

    /// Writes a manifest whose entry paths are relative to `path`'s directory
    /// where possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&serde_json::json!({
            "manifest_version": MANIFEST_VERSION,
            "dataset_name": self.dataset_name,
        }))?);
        out.push('\n');
        for e in &self.entries {
            let rel = |p: &Path| {
                p.strip_prefix(base)
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|_| p.to_path_buf())
            };
            let e = ManifestEntry {
                path: rel(&e.path),
                mask_path: e.mask_path.as_deref().map(rel),
                ..e.clone()
            };
            out.push_str(&serde_json::to_string(&e)?);
            out.push('\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Parses and validates a JSON-lines manifest; every referenced file must exist.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let default_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut dataset_name = None;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if value.get("manifest_version").is_some() {
            if !entries.is_empty() || dataset_name.is_some() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "header must be the first line".into(),
                });
            }
            let header: ManifestHeader = serde_json::from_value(value).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if header.manifest_version != MANIFEST_VERSION {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("unsupported manifest version {:?}", header.manifest_version),
                });
            }
            dataset_name = Some(header.dataset_name.unwrap_or_else(|| default_name.clone()));
            continue;
        }
        let mut entry: ManifestEntry = serde_json::from_value(value).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        entry.path = base.join(&entry.path);
        entry.mask_path = entry.mask_path.map(|m| base.join(m));
        entries.push(entry);
    }
    let manifest = Manifest {
        dataset_name: dataset_name.unwrap_or(default_name),
        entries,
    };
    manifest.validate()?;
    for e in &manifest.entries {
        for p in std::iter::once(&e.path).chain(e.mask_path.as_ref()) {
            if !p.is_file() {
                return Err(Error::Layout(p.clone()));
            }
        }
    }
    Ok(manifest)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for item in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = item.map_err(|e| Error::io(dir, e))?.path();
        let is_image = p
            .extension()
            .map(|x| IMAGE_EXTENSIONS.contains(&x.to_string_lossy().to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if p.is_file() && is_image {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for item in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = item.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Reads the `<class>/train/good`, `<class>/test/<defect>` convention.
/// Masks are picked up from `<class>/ground_truth/<defect>/<stem>_mask.png`.
pub fn load_mvtec(root: &Path) -> Result<Manifest> {
    if !root.is_dir() {
        return Err(Error::Layout(root.to_path_buf()));
    }
    let mut entries = Vec::new();
    for class_dir in subdirs(root)? {
        let class_name = class_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let train_good = class_dir.join("train").join("good");
        let test = class_dir.join("test");
        for required in [&train_good, &test] {
            if !required.is_dir() {
                return Err(Error::Layout(required.clone()));
            }
        }
        for path in image_files(&train_good)? {
            entries.push(ManifestEntry {
                path,
                class_name: class_name.clone(),
                split: Split::Train,
                label: Label::Normal,
                mask_path: None,
            });
        }
        for defect_dir in subdirs(&test)? {
            let defect = defect_dir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let label = if defect == "good" {
                Label::Normal
            } else {
                Label::Abnormal
            };
            for path in image_files(&defect_dir)? {
                let mask_path = (label == Label::Abnormal)
                    .then(|| {
                        let stem = path.file_stem()?.to_string_lossy().into_owned();
                        let m = class_dir
                            .join("ground_truth")
                            .join(&defect)
                            .join(format!("{stem}_mask.png"));
                        m.is_file().then_some(m)
                    })
                    .flatten();
                entries.push(ManifestEntry {
                    path,
                    class_name: class_name.clone(),
                    split: Split::Test,
                    label,
                    mask_path,
                });
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::Validation(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    Manifest::new(
        root.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "mvtec".into()),
        entries,
    )
}

/// Decodes an entry to RGB in `[0,1]`, optionally resized.
pub fn load_entry(entry: &ManifestEntry, size: Option<(usize, usize)>) -> Result<ImageSample> {
    let mut image = Image::load(&entry.path)?;
    if let Some((h, w)) = size {
        if image.dims() != (h, w) {
            image = image.resized(h, w).clipped();
        }
    }
    ImageSample::real(image, entry.label, entry.path.to_string_lossy())
}

/// Loads every image of `class_name` in `split`.
pub fn load_split(
    manifest: &Manifest,
    class_name: &str,
    split: Split,
    image_size: Option<(usize, usize)>,
) -> Result<Vec<ImageSample>> {
    let entries: Vec<&ManifestEntry> = manifest.entries_for(class_name, split).collect();
    if entries.is_empty() {
        return Err(Error::Input(format!("class {class_name:?} has no {split:?} images")));
    }
    entries.par_iter().map(|e| load_entry(e, image_size)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub k: usize,
    pub class_name: String,
    pub support: Vec<ImageSample>,
    pub negatives: Vec<ImageSample>,
    /// Index into `support` of the image each negative was synthesized from.
    pub negative_owner: Vec<usize>,
    pub test: Vec<ImageSample>,
    pub seed: u64,
    pub synth: SynthParams,
}

impl Episode {
    /// Negatives synthesized from support image `i`.
    pub fn negatives_of(&self, i: usize) -> impl Iterator<Item = &ImageSample> {
        self.negatives
            .iter()
            .zip(&self.negative_owner)
            .filter(move |(_, &o)| o == i)
            .map(|(n, _)| n)
    }
}

fn choose_support(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Input("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Input(format!("{k}-shot episode but only {n} training images")));
    }
    let mut rng = named_stream(seed, "sampling");
    let mut chosen = index::sample(&mut rng, n, k).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Builds an episode from in-memory normal training images and a test set.
pub fn build_episode_from_pool(
    class_name: &str,
    train: &[ImageSample],
    test: Vec<ImageSample>,
    k: usize,
    seed: u64,
    synth_params: &SynthParams,
) -> Result<Episode> {
    let chosen = choose_support(train.len(), k, seed)?;
    let support: Vec<ImageSample> = chosen.iter().map(|&i| train[i].clone()).collect();
    let support_ids: HashSet<&str> = support.iter().map(|s| s.source_id.as_str()).collect();
    if let Some(t) = test.iter().find(|t| support_ids.contains(t.source_id.as_str())) {
        return Err(Error::Validation(format!("test image {} also in support", t.source_id)));
    }
    let synth_params = synth_params.clone().with_seed(derive_seed(seed, "synth"));
    let negatives = synth::build_negatives(&support, &synth_params)?;
    let per = synth_params.anomalies_per_image();
    let negative_owner = (0..negatives.len()).map(|j| j / per).collect();
    Ok(Episode {
        k,
        class_name: class_name.to_string(),
        support,
        negatives,
        negative_owner,
        test,
        seed,
        synth: synth_params,
    })
}

/// Samples `k` support images of `class_name` from the train split, loads the
/// whole test split, and synthesizes negatives.
pub fn build_episode(
    manifest: &Manifest,
    class_name: &str,
    k: usize,
    seed: u64,
    synth_params: &SynthParams,
    image_size: Option<(usize, usize)>,
) -> Result<Episode> {
    let train: Vec<&ManifestEntry> = manifest.entries_for(class_name, Split::Train).collect();
    let test: Vec<&ManifestEntry> = manifest.entries_for(class_name, Split::Test).collect();
    if train.is_empty() && test.is_empty() {
        return Err(Error::Input(format!("class {class_name:?} not in manifest")));
    }
    let chosen = choose_support(train.len(), k, seed)?;
    let train_paths: HashSet<&Path> = train.iter().map(|e| e.path.as_path()).collect();
    if let Some(t) = test.iter().find(|t| train_paths.contains(t.path.as_path())) {
        return Err(Error::Validation(format!("{} is in both splits", t.path.display())));
    }
    let support: Vec<ImageSample> = chosen
        .par_iter()
        .map(|&i| load_entry(train[i], image_size))
        .collect::<Result<_>>()?;
    let test_samples: Vec<ImageSample> = test
        .par_iter()
        .map(|e| load_entry(e, image_size))
        .collect::<Result<_>>()?;
    let synth_params = synth_params.clone().with_seed(derive_seed(seed, "synth"));
    let negatives = synth::build_negatives(&support, &synth_params)?;
    let per = synth_params.anomalies_per_image();
    let negative_owner = (0..negatives.len()).map(|j| j / per).collect();
    Ok(Episode {
        k,
        class_name: class_name.to_string(),
        support,
        negatives,
        negative_owner,
        test: test_samples,
        seed,
        synth: synth_params,
    })
}
