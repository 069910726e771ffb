use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::schema::TableSchema;
use crate::error::{Error, Result};
use crate::math::Matrix;

/// Per-column z-scoring statistics in the expanded column layout. One-hot
/// columns carry mean 0 and standard deviation 1, which leaves them as is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    /// Population mean and standard deviation of the numeric columns.
    /// Constant columns get identity statistics and a warning.
    pub fn fit(features: &Matrix, schema: &TableSchema) -> Result<Self> {
        let mask = schema.numeric_mask();
        if mask.len() != features.cols() {
            return Err(Error::DimensionMismatch {
                expected: mask.len(),
                actual: features.cols(),
                context: "expanded feature columns",
            });
        }
        let n = features.rows();
        if n == 0 {
            return Err(Error::InvalidInput("cannot fit statistics on zero rows".into()));
        }
        let columns = schema.expanded_columns();
        let mut out = Self::identity(features.cols());
        for (j, &numeric) in mask.iter().enumerate() {
            if !numeric {
                continue;
            }
            let mean = (0..n).map(|i| features[(i, j)]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (features[(i, j)] - mean).powi(2)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            if std > 0.0 && std.is_finite() {
                out.mean[j] = mean;
                out.std[j] = std;
            } else {
                warn!("column `{}` is constant in training data; passing it through", columns[j]);
            }
        }
        Ok(out)
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                actual: self.std.len(),
                context: "standardization std length",
            });
        }
        if self.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidInput("standard deviations must be positive".into()));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidInput("non-finite standardization mean".into()));
        }
        Ok(())
    }

    /// `(x − mean) / std` per column; columns with non-positive std pass
    /// through unchanged with a warning.
    pub fn apply(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.width() {
            return Err(Error::DimensionMismatch {
                expected: self.width(),
                actual: features.cols(),
                context: "standardization width",
            });
        }
        let mut out = features.clone();
        for j in 0..self.width() {
            let (m, s) = (self.mean[j], self.std[j]);
            if !(s > 0.0) {
                warn!("column {j} has standard deviation {s}; passing it through");
                continue;
            }
            if m == 0.0 && s == 1.0 {
                continue;
            }
            for i in 0..out.rows() {
                out[(i, j)] = (out[(i, j)] - m) / s;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema::Feature;

    fn schema() -> TableSchema {
        TableSchema::new(
            "y",
            vec!["a".into(), "b".into()],
            vec![
                Feature::numeric("u"),
                Feature::numeric("flat"),
                Feature::categorical("c", ["p", "q"]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn training_split_becomes_unit_scaled() {
        let x = Matrix::from_rows(&[
            [1.0, 5.0, 1.0, 0.0],
            [4.0, 5.0, 0.0, 1.0],
            [10.0, 5.0, 1.0, 0.0],
            [-3.0, 5.0, 0.0, 1.0],
        ])
        .unwrap();
        let s = Standardizer::fit(&x, &schema()).unwrap();
        let z = s.apply(&x).unwrap();
        let col: Vec<f64> = (0..4).map(|i| z[(i, 0)]).collect();
        let mean = col.iter().sum::<f64>() / 4.0;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!(mean.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9);
        // Constant and one-hot columns are untouched.
        for i in 0..4 {
            assert_eq!(z[(i, 1)], 5.0);
            assert_eq!(z[(i, 2)], x[(i, 2)]);
            assert_eq!(z[(i, 3)], x[(i, 3)]);
        }
        assert!(s.validate().is_ok());
    }

    #[test]
    fn identity_stats_leave_data_alone() {
        let x = Matrix::from_rows(&[[0.3, -1.2], [2.5, 0.0]]).unwrap();
        assert_eq!(Standardizer::identity(2).apply(&x).unwrap(), x);
    }

    #[test]
    fn zero_std_passes_through() {
        let s = Standardizer {
            mean: vec![1.0, 2.0],
            std: vec![0.0, 2.0],
        };
        let x = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        assert_eq!(s.apply(&x).unwrap().row(0), &[3.0, 1.0]);
        assert!(s.validate().is_err());
    }
}
