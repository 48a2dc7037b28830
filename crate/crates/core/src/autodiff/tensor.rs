use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`. Vectors are stored as `n x 1` columns or
/// `1 x n` rows; scalars are `1 x 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 2],
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(Error::contract(format!(
                "tensor shape {rows}x{cols} does not match {} values",
                values.len()
            )));
        }
        Ok(Self {
            shape: [rows, cols],
            values,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: [rows, cols],
            values: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: [1, 1],
            values: vec![value],
        }
    }

    pub fn column(values: Vec<f64>) -> Self {
        Self {
            shape: [values.len(), 1],
            values,
        }
    }

    pub fn row(values: Vec<f64>) -> Self {
        Self {
            shape: [1, values.len()],
            values,
        }
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals in tests and small fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: [rows.len(), cols],
            values: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.shape[1] + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.values[r * c..(r + 1) * c]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape != [1, 1] {
            return Err(Error::contract(format!(
                "expected scalar, got {}x{}",
                self.shape[0], self.shape[1]
            )));
        }
        Ok(self.values[0])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
