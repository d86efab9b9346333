//! Compositional prompt ensembles and the averaged text anchors.
//!
//! A state word may place the object with `[o]` (`"[o] with flaw"`); a state
//! without it is used as a prefix (`"damaged"` becomes `"damaged [o]"`).
//! Templates carry exactly one `[c]`, which receives the state-qualified
//! object label.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::EncoderBackend;
use crate::embedding::Embedding;
use crate::error::{Error, Result};

pub const CLASS_PLACEHOLDER: &str = "[c]";
pub const OBJECT_PLACEHOLDER: &str = "[o]";

const WINCLIP_LISTS: &str = include_str!("../data/cpe_winclip.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEnsemble {
    pub normal_states: Vec<String>,
    pub abnormal_states: Vec<String>,
    pub templates: Vec<String>,
    pub object_label: String,
}

impl PromptEnsemble {
    /// The state words and templates published with WinCLIP.
    pub fn winclip(object_label: &str) -> Self {
        let mut ens: PromptEnsemble = serde_json::from_str(WINCLIP_LISTS).expect("bundled prompt lists parse");
        ens.object_label = object_label.to_string();
        ens
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn with_object(mut self, object_label: &str) -> Self {
        self.object_label = object_label.to_string();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.normal_states.is_empty() || self.abnormal_states.is_empty() {
            return Err(Error::Format("state lists must be nonempty".into()));
        }
        if self.templates.is_empty() {
            return Err(Error::Format("template list must be nonempty".into()));
        }
        for t in &self.templates {
            let n = t.matches(CLASS_PLACEHOLDER).count();
            if n != 1 {
                return Err(Error::Format(format!(
                    "template {t:?} has {n} '{CLASS_PLACEHOLDER}' placeholders, expected 1"
                )));
            }
        }
        for s in self.normal_states.iter().chain(&self.abnormal_states) {
            if s.matches(OBJECT_PLACEHOLDER).count() > 1 {
                return Err(Error::Format(format!("state {s:?} places the object more than once")));
            }
        }
        Ok(())
    }

    fn qualify(&self, state: &str) -> String {
        let state = state.trim();
        if state.contains(OBJECT_PLACEHOLDER) {
            state.replace(OBJECT_PLACEHOLDER, &self.object_label)
        } else if state.is_empty() {
            self.object_label.clone()
        } else {
            format!("{state} {}", self.object_label)
        }
    }

    fn expand_states(&self, states: &[String]) -> Vec<String> {
        states
            .iter()
            .flat_map(|s| {
                let q = self.qualify(s);
                self.templates.iter().map(move |t| t.replacen(CLASS_PLACEHOLDER, &q, 1))
            })
            .collect()
    }

    /// All normal and abnormal prompts: states × templates per polarity.
    pub fn expand(&self) -> Result<(Vec<String>, Vec<String>)> {
        self.validate()?;
        Ok((
            self.expand_states(&self.normal_states),
            self.expand_states(&self.abnormal_states),
        ))
    }
}

/// Mean of the prompt embeddings, optionally L2-normalized afterwards.
///
/// Prompts are summed in sorted order, so the result does not depend on the
/// order they are given in.
pub fn text_anchor(backend: &dyn EncoderBackend, prompts: &[String], normalize: bool) -> Result<Embedding> {
    if prompts.is_empty() {
        return Err(Error::Input("text anchor of an empty prompt list".into()));
    }
    let mut sorted: Vec<&String> = prompts.iter().collect();
    sorted.sort();
    let dim = backend.embed_dim();
    let mut acc = vec![0.0; dim];
    for p in sorted {
        let e = backend.encode_text(p)?;
        e.expect_dim(dim, "text embedding")?;
        for (a, v) in acc.iter_mut().zip(&e.values) {
            *a += v;
        }
    }
    let n = prompts.len() as f64;
    let mean: Vec<f64> = acc.into_iter().map(|v| v / n).collect();
    if normalize {
        Embedding::normalized(mean)
    } else {
        Ok(Embedding::new(mean))
    }
}

/// The normal and abnormal anchors `T⁺`, `T⁻` of an ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextAnchors {
    pub normal: Embedding,
    pub abnormal: Embedding,
}

impl TextAnchors {
    pub fn from_ensemble(backend: &dyn EncoderBackend, ensemble: &PromptEnsemble, normalize: bool) -> Result<Self> {
        let (normal, abnormal) = ensemble.expand()?;
        Ok(Self {
            normal: text_anchor(backend, &normal, normalize)?,
            abnormal: text_anchor(backend, &abnormal, normalize)?,
        })
    }
}
