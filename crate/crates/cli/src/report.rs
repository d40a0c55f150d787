use hicox::selection::{CvScores, GridPoint};
use hicox::survival::concordance_counts;
use hicox::transform::{standardize_study, Standardizer};
use hicox::{ConvergenceReport, StudyData};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::{FitConfig, Method};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// A study used for fitting, scored with its own coefficients.
    Fit,
    /// A study not used for fitting.
    Holdout,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Fit => "fit",
            Role::Holdout => "holdout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coefficients {
    /// Row 0 is the shared vector, row `k` the coefficients of fit study `k`.
    Bundle { rows: Vec<Vec<f64>>, exact_zero: Vec<Vec<bool>> },
    /// One row per fit study, fitted separately.
    PerStudy { rows: Vec<Vec<f64>> },
    Shared { values: Vec<f64> },
}

impl Coefficients {
    pub fn bundle(rows: Vec<Vec<f64>>) -> Self {
        let exact_zero = rows.iter().map(|r| r.iter().map(|v| *v == 0.0).collect()).collect();
        Coefficients::Bundle { rows, exact_zero }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CRow {
    pub study: String,
    pub role: Role,
    pub n: usize,
    /// `None` when the study has no comparable pairs.
    pub c_statistic: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: Method,
    pub replicate: Option<usize>,
    pub config: FitConfig,
    pub features: Vec<String>,
    pub fit_studies: Vec<String>,
    /// Per fit study; empty when standardization is off.
    pub standardizers: Vec<Standardizer>,
    pub sigma: Option<Vec<Vec<f64>>>,
    pub selected_point: Option<GridPoint>,
    pub selected_lambdas: Option<Vec<f64>>,
    pub coefficients: Coefficients,
    pub tau2: Option<Vec<f64>>,
    pub convergence: Option<ConvergenceReport>,
    pub cv: Option<CvScores>,
    pub c_statistics: Vec<CRow>,
}

/// Scores studies with the coefficients stored in a report.
pub struct Predictor<'a> {
    coefficients: &'a Coefficients,
    standardizers: &'a [Standardizer],
    standardize: bool,
}

impl<'a> Predictor<'a> {
    pub fn new(report: &'a EvaluationReport) -> Self {
        Self {
            coefficients: &report.coefficients,
            standardizers: &report.standardizers,
            standardize: report.config.standardize,
        }
    }

    /// C-statistic of fit study `k`'s coefficients on `data`, using that
    /// study's learned standardization.
    pub fn score_fit(&self, k: usize, data: &StudyData) -> anyhow::Result<CRow> {
        let data = match self.standardizers.get(k) {
            Some(s) if self.standardize => s.apply_study(data)?,
            _ => data.clone(),
        };
        let beta = match self.coefficients {
            Coefficients::Bundle { rows, .. } => row(rows, k + 1)?,
            Coefficients::PerStudy { rows } => row(rows, k)?,
            Coefficients::Shared { values } => DVector::from_column_slice(values),
        };
        Ok(c_row(&data, Role::Fit, c_of(&data, &beta)))
    }

    /// C-statistic on a study not used for fitting, standardized with its
    /// own statistics: the shared vector for pooled and hierarchical fits,
    /// the average of per-study C values for separate fits.
    pub fn score_holdout(&self, data: &StudyData) -> anyhow::Result<CRow> {
        let data = if self.standardize {
            standardize_study(data)?.0
        } else {
            data.clone()
        };
        let c = match self.coefficients {
            Coefficients::Bundle { rows, .. } => c_of(&data, &row(rows, 0)?),
            Coefficients::Shared { values } => c_of(&data, &DVector::from_column_slice(values)),
            Coefficients::PerStudy { rows } => {
                let cs: Vec<f64> = rows
                    .iter()
                    .filter_map(|r| c_of(&data, &DVector::from_column_slice(r)))
                    .collect();
                (!cs.is_empty()).then(|| cs.iter().sum::<f64>() / cs.len() as f64)
            }
        };
        Ok(c_row(&data, Role::Holdout, c))
    }
}

fn row(rows: &[Vec<f64>], i: usize) -> anyhow::Result<DVector<f64>> {
    rows.get(i)
        .map(|r| DVector::from_column_slice(r))
        .ok_or_else(|| anyhow::anyhow!(hicox::Error::InvalidInput(format!("report has no coefficient row {i}"))))
}

fn c_of(data: &StudyData, beta: &DVector<f64>) -> Option<f64> {
    let scores = data.risk_scores(beta).ok()?;
    let counts = concordance_counts(scores.as_slice(), data.times(), data.status()).ok()?;
    (counts.comparable > 0).then(|| counts.value())
}

fn c_row(data: &StudyData, role: Role, c: Option<f64>) -> CRow {
    CRow {
        study: data.study_id.clone(),
        role,
        n: data.n(),
        c_statistic: c,
    }
}
