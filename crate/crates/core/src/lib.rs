//! Few-shot anomaly classification on frozen vision-language embeddings.

pub mod adapt;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod descriptor;
pub mod embedding;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod pipeline;
pub mod prompts;
pub mod report;
pub mod rng;
pub mod score;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
