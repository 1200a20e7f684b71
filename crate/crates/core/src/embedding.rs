use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{l2_norm, Matrix};

/// Tolerance on row norms of an [`EmbeddingMatrix`].
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// N×D matrix whose rows are unit-L2 embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix(Matrix);

impl EmbeddingMatrix {
    /// Wraps an already-normalized matrix, rejecting rows off the unit sphere.
    pub fn new(values: Matrix) -> Result<Self> {
        for r in 0..values.rows() {
            let n = l2_norm(values.row(r));
            if !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidInput(format!(
                    "embedding row {r} has norm {n}, expected 1"
                )));
            }
        }
        Ok(Self(values))
    }

    /// Divides every row by its L2 norm. Zero rows are rejected.
    pub fn normalize(mut values: Matrix) -> Result<Self> {
        for r in 0..values.rows() {
            let row = values.row_mut(r);
            let n = l2_norm(row);
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::NonFinite(format!(
                    "cannot normalize embedding row {r} with norm {n}"
                )));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self(values))
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.0.row(r)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Rows picked by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingMatrix(Matrix::from_vec(indices.len(), self.dim(), data).expect("shape"))
    }
}
