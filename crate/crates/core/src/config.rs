//! Training configuration, dataset presets and layered overrides.
//!
//! Values are resolved in the order defaults < preset < config file < command
//! line, each layer being a partial JSON object merged onto the previous one.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::adapt::{ResidualRatios, DEFAULT_REDUCTION};
use crate::backbone::BackendConfig;
use crate::error::{Error, Result};
use crate::model::{HeadOptions, InferTfMode};
use crate::objective::{CeMode, LossWeights, SimilarityFn};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::score::DEFAULT_TAU;
use crate::synth::{NsaParams, SynthParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Mvtec,
    Visa,
}

impl Preset {
    /// The partial config this preset applies.
    pub fn overrides(self) -> Value {
        match self {
            Preset::Mvtec => json!({
                "alpha": [0.4, 0.6],
                "beta": [0.4, 0.6],
                "gamma1": 0.01,
                "synth": {"method": "perturb"},
            }),
            Preset::Visa => json!({
                "alpha": [0.1, 0.9],
                "beta": [0.1, 0.9],
                "gamma1": 0.7,
                "synth": {"method": "nsa"},
            }),
        }
    }

    /// Normal images per step for the 1/2/4/8-shot settings.
    pub fn batch_sizes(self) -> [(usize, usize); 4] {
        match self {
            Preset::Mvtec => [(1, 1), (2, 2), (4, 2), (8, 2)],
            Preset::Visa => [(1, 1), (2, 1), (4, 2), (8, 2)],
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mvtec" => Ok(Preset::Mvtec),
            "visa" => Ok(Preset::Visa),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: Option<Preset>,
    pub backend: BackendConfig,
    /// Size images are resized to on load; `None` uses the backend's size.
    pub load_size: Option<(usize, usize)>,
    pub k_shot: usize,
    pub epochs: usize,
    pub lr_image_adapter: f64,
    pub lr_text_adapter: f64,
    pub lr_descriptor: f64,
    /// Normal images per optimizer step; `None` uses the preset table, else 1.
    pub batch_size: Option<usize>,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub momentum: f64,
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
    pub gamma1: f64,
    pub gamma2: f64,
    pub tau: f64,
    /// Cross-entropy temperature; `None` uses `tau`.
    pub tau_ce: Option<f64>,
    pub reduction: usize,
    pub synth: SynthParams,
    pub seeds: Vec<u64>,
    pub use_tf: bool,
    pub use_vt: bool,
    pub use_contrastive: bool,
    pub use_ce: bool,
    pub ce_mode: CeMode,
    pub infer_tf_mode: InferTfMode,
    pub normalize_anchor: bool,
    /// Prompt-ensemble JSON; `None` uses the built-in lists.
    pub prompts: Option<PathBuf>,
    /// Object word substituted into prompts; `None` uses the class name.
    pub object_label: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: None,
            backend: BackendConfig::default(),
            load_size: None,
            k_shot: 1,
            epochs: 100,
            lr_image_adapter: 5e-4,
            lr_text_adapter: 1e-4,
            lr_descriptor: 5e-4,
            batch_size: None,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            momentum: 0.9,
            alpha: (0.4, 0.6),
            beta: (0.4, 0.6),
            gamma1: 0.7,
            gamma2: 0.7,
            tau: DEFAULT_TAU,
            tau_ce: None,
            reduction: DEFAULT_REDUCTION,
            synth: SynthParams::Nsa(NsaParams::default()),
            seeds: vec![0],
            use_tf: true,
            use_vt: true,
            use_contrastive: true,
            use_ce: true,
            ce_mode: CeMode::default(),
            infer_tf_mode: InferTfMode::default(),
            normalize_anchor: true,
            prompts: None,
            object_label: None,
        }
    }
}

/// Recursively merges `patch` onto `base`. Objects merge key by key, except
/// that a tagged object whose `method` or `kind` changes is replaced whole.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            let retagged = ["method", "kind"]
                .iter()
                .any(|t| matches!((b.get(*t), p.get(*t)), (Some(x), Some(y)) if x != y));
            if retagged {
                *b = p.clone();
                return;
            }
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, p) => *slot = p.clone(),
    }
}

impl TrainConfig {
    /// Resolves defaults, the preset (named on the command line or in the
    /// file), the file, then command-line overrides.
    pub fn resolve(file: Option<&Value>, cli: &Value) -> Result<Self> {
        for layer in std::iter::once(cli).chain(file) {
            if !layer.is_object() {
                return Err(Error::Config("config layers must be JSON objects".into()));
            }
        }
        let preset_of = |v: &Value| v.get("preset").filter(|p| !p.is_null()).cloned();
        let preset = preset_of(cli).or_else(|| file.and_then(preset_of));
        let mut value = serde_json::to_value(TrainConfig::default())?;
        if let Some(p) = preset {
            let p: Preset = serde_json::from_value(p).map_err(|e| Error::Config(format!("preset: {e}")))?;
            merge(&mut value, &p.overrides());
        }
        if let Some(f) = file {
            merge(&mut value, f);
        }
        merge(&mut value, cli);
        let config: TrainConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, cli: &Value) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::resolve(Some(&file), cli)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        for (name, lr) in [
            ("lr_image_adapter", self.lr_image_adapter),
            ("lr_text_adapter", self.lr_text_adapter),
            ("lr_descriptor", self.lr_descriptor),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.batch_size == Some(0) {
            return fail("batch_size must be at least 1".into());
        }
        if self.k_shot == 0 {
            return fail("k_shot must be at least 1".into());
        }
        if self.tau.is_nan() || self.tau <= 0.0 || self.tau_ce.is_some_and(|t| t.is_nan() || t <= 0.0) {
            return fail("temperatures must be positive".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        if self.reduction == 0 {
            return fail("reduction must be at least 1".into());
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if ![self.alpha.0, self.alpha.1, self.beta.0, self.beta.1]
            .into_iter()
            .all(unit)
        {
            return fail("residual ratios must lie in [0, 1]".into());
        }
        if !self.gamma1.is_finite() || !self.gamma2.is_finite() {
            return fail("gamma1 and gamma2 must be finite".into());
        }
        self.loss_weights().validate()?;
        self.optimizer_config().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            gamma2: self.gamma2,
            use_contrastive: self.use_contrastive,
            use_ce: self.use_ce,
        }
    }

    pub fn head_options(&self) -> HeadOptions {
        HeadOptions {
            tau: self.tau,
            tau_ce: self.tau_ce.unwrap_or(self.tau),
            use_tf: self.use_tf,
            use_vt: self.use_vt,
            ce_mode: self.ce_mode,
            infer_tf_mode: self.infer_tf_mode,
            loss: self.loss_weights(),
            similarity: SimilarityFn::default(),
        }
    }

    pub fn ratios(&self) -> ResidualRatios {
        ResidualRatios {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            ..Default::default()
        }
    }

    /// Normal images per step for a `k`-shot episode.
    pub fn effective_batch_size(&self, k: usize) -> usize {
        if let Some(b) = self.batch_size {
            return b;
        }
        match self.preset {
            Some(p) => p
                .batch_sizes()
                .iter()
                .rev()
                .find(|(shot, _)| *shot <= k)
                .map(|&(_, b)| b)
                .unwrap_or(1),
            None => 1,
        }
    }

    pub fn load_size(&self) -> (usize, usize) {
        self.load_size.unwrap_or_else(|| self.backend.image_size())
    }

    /// Hex SHA-256 over the canonical config JSON, the backend fingerprint and
    /// the expanded prompts.
    pub fn hash(&self, backend_fingerprint: &str, prompts: &[String]) -> Result<String> {
        let canonical = serde_json::to_string(&serde_json::to_value(self)?)?;
        let mut h = Sha256::new();
        h.update(canonical.as_bytes());
        h.update([0]);
        h.update(backend_fingerprint.as_bytes());
        for p in prompts {
            h.update([0]);
            h.update(p.as_bytes());
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}
