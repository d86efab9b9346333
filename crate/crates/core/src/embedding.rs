use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{norm, Matrix};

/// Norms at or below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// A length-`C` feature vector and whether it has unit L2 norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    /// L2-normalizes `values`, failing on a (near-)zero vector.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if n.is_nan() || n <= NORM_EPS {
            return Err(Error::Degenerate(format!("cannot normalize a vector of norm {n:.3e}")));
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / n).collect(),
            normalized: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn as_row(&self) -> Matrix {
        Matrix::row_vector(self.values.clone())
    }

    pub fn from_row(m: &Matrix) -> Self {
        Self::new(m.data().to_vec())
    }

    pub(crate) fn expect_dim(&self, dim: usize, what: &str) -> Result<()> {
        if self.values.len() != dim {
            return Err(Error::Shape(format!(
                "{what}: expected length {dim}, got {}",
                self.values.len()
            )));
        }
        Ok(())
    }
}
