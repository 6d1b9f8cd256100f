//! Tabular data: ingestion, min-max preprocessing, corruption operators,
//! synthetic generators and per-dataset preparation recipes.

mod corrupt;
mod csv_io;
mod recipe;
mod synth;

pub use corrupt::{corrupt, CorruptionKind, CorruptionSpec};
pub use csv_io::{load_csv, read_table, save_csv, write_csv, ColumnRef, CsvOptions, Delimiter, LabelRule, RawTable};
pub use recipe::{JoinMode, Recipe};
pub use synth::{synthesize, SynthPreset, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

/// `n` feature rows of dimension `d`, optionally labelled (`true` = outlier).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub features: Matrix,
    pub labels: Option<Vec<bool>>,
    pub columns: Option<Vec<String>>,
}

impl EmbeddingBatch {
    pub fn new(features: Matrix, labels: Option<Vec<bool>>, columns: Option<Vec<String>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::dim("EmbeddingBatch labels", features.rows(), l.len()));
            }
        }
        if let Some(c) = &columns {
            if c.len() != features.cols() {
                return Err(Error::dim("EmbeddingBatch columns", features.cols(), c.len()));
            }
        }
        Ok(Self {
            features,
            labels,
            columns,
        })
    }

    pub fn unlabeled(features: Matrix) -> Self {
        Self {
            features,
            labels: None,
            columns: None,
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            columns: self.columns.clone(),
        }
    }

    pub fn with_features(&self, features: Matrix) -> Self {
        Self {
            features,
            labels: self.labels.clone(),
            columns: self.columns.clone(),
        }
    }
}

/// Per-column minimum and maximum, fitted once and applied to any batch of
/// the same width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(features: &Matrix) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Data("cannot fit min-max statistics on an empty table".into()));
        }
        let d = features.cols();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for row in features.iter_rows() {
            for (c, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("feature column {c} holds {v}")));
                }
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
        Ok(Self { min, max })
    }

    /// `(x − min)/(max − min)` per column; constant columns map to 0.
    pub fn transform(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.min.len() {
            return Err(Error::dim("MinMaxScaler::transform", self.min.len(), features.cols()));
        }
        let mut out = features.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                let range = self.max[c] - self.min[c];
                *v = if range > 0.0 { (*v - self.min[c]) / range } else { 0.0 };
            }
        }
        Ok(out)
    }

    pub fn transform_batch(&self, batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
        Ok(batch.with_features(self.transform(&batch.features)?))
    }
}

/// Min-max scales every column of `batch` into `[0, 1]` using its own
/// statistics.
pub fn minmax_scale(batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
    MinMaxScaler::fit(&batch.features)?.transform_batch(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minmax_examples() {
        let m = Matrix::from_rows(&[[0.0, 7.0], [5.0, 7.0], [10.0, 7.0]]).unwrap();
        let s = minmax_scale(&EmbeddingBatch::unlabeled(m)).unwrap();
        assert_eq!(s.features.column(0), vec![0.0, 0.5, 1.0]);
        assert_eq!(s.features.column(1), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn scaler_rejects_wrong_width_and_empty() {
        let sc = MinMaxScaler::fit(&Matrix::zeros(2, 3)).unwrap();
        assert!(sc.transform(&Matrix::zeros(2, 2)).is_err());
        assert!(MinMaxScaler::fit(&Matrix::zeros(0, 3)).is_err());
    }

    proptest! {
        #[test]
        fn minmax_is_idempotent_and_bounded(rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 1..30)) {
            let b = EmbeddingBatch::unlabeled(Matrix::from_rows(&rows).unwrap());
            let once = minmax_scale(&b).unwrap();
            let twice = minmax_scale(&once).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.features.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
