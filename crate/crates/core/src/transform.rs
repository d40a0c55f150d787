//! Covariate transformations: per-study standardization and the affine
//! distortion `x -> a + b x` used to probe scale sensitivity.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survival::StudyData;

pub const DEFAULT_INTERCEPT: f64 = 10.0;
pub const DEFAULT_SLOPE: f64 = -3.0;

/// Applies `a + b x` to every covariate value. Outcomes are unchanged.
pub fn affine_distort(study: &StudyData, intercept: f64, slope: f64) -> Result<StudyData> {
    if !(intercept.is_finite() && slope.is_finite()) || slope == 0.0 {
        return Err(Error::invalid("affine distortion needs a finite intercept and non-zero slope"));
    }
    study.with_covariates(study.covariates().map(|x| intercept + slope * x))
}

/// Column centering and scaling learned from one data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    /// Means and sample standard deviations; constant columns get scale 1.
    pub fn fit(x: &DMatrix<f64>) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::invalid("standardization needs at least two rows"));
        }
        let mut means = Vec::with_capacity(x.ncols());
        let mut scales = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let sd = var.sqrt();
            means.push(mean);
            scales.push(if sd > 1e-12 * (1.0 + mean.abs()) { sd } else { 1.0 });
        }
        Ok(Self { means, scales })
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.means.len() {
            return Err(Error::DimensionMismatch {
                expected: self.means.len(),
                found: x.ncols(),
                context: "standardizer columns",
            });
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.means[j]) / self.scales[j]
        }))
    }

    pub fn apply_study(&self, study: &StudyData) -> Result<StudyData> {
        study.with_covariates(self.apply(study.covariates())?)
    }

    /// Coefficients on the standardized scale mapped back to raw covariates
    /// (the intercept shift is absorbed by the baseline hazard).
    pub fn unscale_coefficients(&self, beta: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(beta.len(), |j, _| beta[j] / self.scales[j])
    }
}

/// Standardizes a study with its own statistics.
pub fn standardize_study(study: &StudyData) -> Result<(StudyData, Standardizer)> {
    let s = Standardizer::fit(study.covariates())?;
    Ok((s.apply_study(study)?, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn study() -> StudyData {
        StudyData::new(
            "s",
            vec![1.0, 2.0, 3.0, 4.0],
            vec![true, false, true, true],
            DMatrix::from_row_slice(4, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 6.0, 5.0]),
        )
        .unwrap()
    }

    #[test]
    fn standardized_columns() {
        let (s, st) = standardize_study(&study()).unwrap();
        let c0 = s.covariates().column(0);
        assert!(c0.mean().abs() < 1e-14);
        let var = c0.iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!((var - 1.0).abs() < 1e-12);
        // constant column is centered but not scaled
        assert_eq!(st.scales[1], 1.0);
        assert!(s.covariates().column(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn affine_then_standardize_recovers_sign_flip() {
        let raw = study();
        let d = affine_distort(&raw, DEFAULT_INTERCEPT, DEFAULT_SLOPE).unwrap();
        assert_eq!(d.covariates()[(0, 0)], 7.0);
        let (a, _) = standardize_study(&raw).unwrap();
        let (b, _) = standardize_study(&d).unwrap();
        for i in 0..4 {
            assert!((a.covariates()[(i, 0)] + b.covariates()[(i, 0)]).abs() < 1e-12);
        }
        assert!(affine_distort(&raw, 1.0, 0.0).is_err());
    }
}
