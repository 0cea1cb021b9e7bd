//! Feature selection, min-max scaling and sliding windows.

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::datastore::TableFrame;

/// Per-feature `(min, max)` taken from training data. A constant feature
/// (`max == min`) is shifted but not scaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalization {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for row in rows {
            for (j, v) in row.iter().enumerate() {
                min[j] = min[j].min(*v);
                max[j] = max[j].max(*v);
            }
        }
        Self { min, max }
    }

    fn span(&self, j: usize) -> f64 {
        let s = self.max[j] - self.min[j];
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    pub fn normalize(&self, j: usize, x: f64) -> f64 {
        (x - self.min[j]) / self.span(j)
    }

    pub fn denormalize(&self, j: usize, x: f64) -> f64 {
        x * self.span(j) + self.min[j]
    }

    pub fn normalize_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(j, v)| self.normalize(j, *v)).collect()
    }
}

/// Target first, then every other numeric column in frame order.
pub fn feature_columns(frame: &TableFrame, target: &str) -> Result<Vec<String>, ModelError> {
    if frame.kind(target)? != crate::datastore::ColumnKind::Numeric {
        return Err(ModelError::TargetNotNumeric(target.to_string()));
    }
    let mut cols = vec![target.to_string()];
    cols.extend(
        frame
            .numeric_columns()
            .into_iter()
            .filter(|c| *c != target)
            .map(str::to_string),
    );
    Ok(cols)
}

/// Row-major matrix of the given columns.
pub fn feature_rows(frame: &TableFrame, features: &[String]) -> Result<Vec<Vec<f64>>, ModelError> {
    let columns = features
        .iter()
        .map(|c| frame.numeric(c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((0..frame.row_count())
        .map(|r| columns.iter().map(|c| c[r]).collect())
        .collect())
}

/// One supervised example: `lookback` input rows and the target value
/// `lag` steps after the window (feature 0 is the target).
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub inputs: Vec<Vec<f64>>,
    pub target: f64,
}

/// Windows whose target row index is at least `first_target`.
pub fn windows(rows: &[Vec<f64>], lookback: usize, lag: usize, first_target: usize) -> Vec<Window> {
    let span = lookback + lag;
    (first_target.max(span)..rows.len())
        .map(|t| Window {
            inputs: rows[t - span..t - lag].to_vec(),
            target: rows[t][0],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_round_trip() {
        let rows = vec![vec![3.0, 7.0], vec![-1.0, 7.0], vec![5.0, 7.0]];
        let n = Normalization::fit(&rows);
        assert_eq!((n.min.clone(), n.max.clone()), (vec![-1.0, 7.0], vec![5.0, 7.0]));
        assert_eq!(n.normalize(0, 5.0), 1.0);
        assert_eq!(n.normalize(1, 7.0), 0.0);
        for x in [-1.0, 0.123456789, 2.5, 4.999] {
            assert!((n.denormalize(0, n.normalize(0, x)) - x).abs() <= 1e-12);
        }
    }

    #[test]
    fn window_indices() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let w = windows(&rows, 2, 0, 0);
        assert_eq!(w.len(), 4);
        assert_eq!(w[0].inputs, vec![vec![0.0], vec![1.0]]);
        assert_eq!(w[0].target, 2.0);
        let lagged = windows(&rows, 2, 1, 0);
        assert_eq!(lagged.len(), 3);
        assert_eq!((lagged[0].inputs[1][0], lagged[0].target), (1.0, 3.0));
        assert_eq!(windows(&rows, 2, 0, 5).len(), 1);
        assert!(windows(&rows, 6, 0, 0).is_empty());
    }
}
