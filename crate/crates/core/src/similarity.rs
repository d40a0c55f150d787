//! Data-driven estimate of the similarity matrix from per-study ridge fits
//! and cross-study risk-score regressions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_penalized, ridge_lambda_grid, Penalty};
use crate::error::{Error, Result};
use crate::penalties::SimilarityMatrix;
use crate::selection::{kfold_labels, select_best};
use crate::survival::{concordance, CoxStudy, StudyData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimilarityOptions {
    /// Fixed ridge weight for every study; cross-validated when `None`.
    pub ridge_lambda: Option<f64>,
    pub folds: usize,
    /// Ridge weight stabilizing the risk-score regressions.
    pub alpha_ridge: f64,
    /// Relative floor for the smallest eigenvalue.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SimilarityOptions {
    fn default() -> Self {
        Self {
            ridge_lambda: None,
            folds: 5,
            alpha_ridge: 1e-6,
            jitter: 1e-6,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimilarityEstimate {
    pub sigma: SimilarityMatrix,
    /// Unjittered Gram matrix.
    pub raw: DMatrix<f64>,
    /// `K x (K-1)`; row `k` holds the weights of the other studies in order.
    pub alpha: DMatrix<f64>,
    /// `K x p` ridge estimates.
    pub initial_betas: DMatrix<f64>,
    /// `K x p` combinations `sum_{k' != k} alpha_{k,k'} beta_{k'}`.
    pub projected_betas: DMatrix<f64>,
    pub ridge_lambdas: Vec<f64>,
    pub jitter: f64,
}

/// Ridge weight maximizing the mean held-out C over stratified folds
/// (ties: smallest weight).
pub fn select_ridge_lambda(study: &StudyData, grid: &[f64], folds: usize, seed: u64, k: usize) -> Result<f64> {
    if folds < 2 {
        return Err(Error::invalid("at least two folds are required"));
    }
    let labels = kfold_labels(study, folds, seed, k);
    let mut sums = vec![0.0; grid.len()];
    let mut counts = vec![0usize; grid.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..study.n()).filter(|&i| labels[i] != f).collect();
        let test: Vec<usize> = (0..study.n()).filter(|&i| labels[i] == f).collect();
        let train = study.subset(&train)?;
        if train.n_events() == 0 || test.is_empty() {
            continue;
        }
        let test = study.subset(&test)?;
        let cox = CoxStudy::new(&train)?;
        let mut warm: Option<DVector<f64>> = None;
        for (i, &lambda) in grid.iter().enumerate() {
            let beta = match fit_penalized(&[&cox], Penalty::Ridge, lambda, warm.as_ref()) {
                Ok(b) => b,
                Err(Error::SolverStall { last_iterate, .. }) => DVector::from_vec(last_iterate),
                Err(e) => return Err(e),
            };
            let scores = test.risk_scores(&beta)?;
            if let Ok(c) = concordance(scores.as_slice(), test.times(), test.status()) {
                sums[i] += c;
                counts[i] += 1;
            }
            warm = Some(beta);
        }
    }
    let means: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    select_best(&means, |a, b| grid[a].total_cmp(&grid[b]))
        .map(|i| grid[i])
        .ok_or_else(|| Error::UndefinedStatistic(format!("no fold of study `{}` has comparable pairs", study.study_id)))
}

/// Row `k` maximizes `l(beta, D_k) - lambda_k ||beta||^2`.
pub fn initial_ridge_fits(studies: &[StudyData], lambdas: &[f64]) -> Result<DMatrix<f64>> {
    let p = common_p(studies)?;
    if lambdas.len() != studies.len() {
        return Err(Error::DimensionMismatch {
            expected: studies.len(),
            found: lambdas.len(),
            context: "ridge weights",
        });
    }
    let rows = studies
        .par_iter()
        .zip(lambdas)
        .map(|(s, &l)| fit_penalized(&[&CoxStudy::new(s)?], Penalty::Ridge, l, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(studies.len(), p, |k, j| rows[k][j]))
}

fn common_p(studies: &[StudyData]) -> Result<usize> {
    let p = studies.first().ok_or_else(|| Error::invalid("no studies"))?.p();
    if let Some(s) = studies.iter().find(|s| s.p() != p) {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: s.p(),
            context: "study covariate count",
        });
    }
    Ok(p)
}

/// Cox regression of study `k`'s outcomes on the `K - 1` risk scores
/// `X_k beta_{k'}`, `k' != k`, with a small ridge.
pub fn estimate_alpha(k: usize, studies: &[StudyData], initial_betas: &DMatrix<f64>, alpha_ridge: f64) -> Result<DVector<f64>> {
    let kk = studies.len();
    if kk < 2 {
        return Err(Error::invalid("at least two studies are required"));
    }
    if k >= kk || initial_betas.nrows() != kk {
        return Err(Error::invalid(format!("study index {k} or coefficient rows inconsistent with {kk} studies")));
    }
    let others: Vec<usize> = (0..kk).filter(|&o| o != k).collect();
    let study = &studies[k];
    let z = DMatrix::from_fn(study.n(), others.len(), |i, c| {
        study.covariates().row(i).dot(&initial_betas.row(others[c]))
    });
    let cox = CoxStudy::new(&study.with_covariates(z)?)?;
    match fit_penalized(&[&cox], Penalty::Ridge, alpha_ridge, None) {
        Ok(a) => Ok(a),
        Err(Error::SolverStall { last_iterate, gradient_norm, .. }) => {
            log::warn!("risk-score regression for study {k} stopped at gradient norm {gradient_norm:.2e}");
            Ok(DVector::from_vec(last_iterate))
        }
        Err(e) => Err(e),
    }
}

/// `Sigma = B B' / p` (uncentered), then `delta I` added with
/// `delta = max(0, jitter * trace / K - lambda_min)`.
pub fn gram_similarity(projected: &DMatrix<f64>, jitter: f64) -> Result<(SimilarityMatrix, DMatrix<f64>, f64)> {
    let p = projected.ncols() as f64;
    let raw = (projected * projected.transpose()) / p;
    let raw = (&raw + raw.transpose()) * 0.5;
    let k = raw.nrows();
    let lmin = SymmetricEigen::new(raw.clone()).eigenvalues.min();
    let mut floor = jitter * raw.trace() / k as f64;
    if !(floor > 0.0) {
        floor = jitter;
    }
    let delta = (floor - lmin).max(0.0);
    let mut jittered = raw.clone();
    for i in 0..k {
        jittered[(i, i)] += delta;
    }
    Ok((SimilarityMatrix::new(jittered)?, raw, delta))
}

pub fn estimate_sigma(studies: &[StudyData], opts: &SimilarityOptions) -> Result<SimilarityEstimate> {
    let kk = studies.len();
    if kk < 2 {
        return Err(Error::invalid("similarity estimation needs at least two studies"));
    }
    let p = common_p(studies)?;
    let ridge_lambdas = match opts.ridge_lambda {
        Some(l) => vec![l; kk],
        None => studies
            .par_iter()
            .enumerate()
            .map(|(k, s)| select_ridge_lambda(s, &ridge_lambda_grid(s.n_events()), opts.folds, opts.seed, k))
            .collect::<Result<Vec<_>>>()?,
    };
    let initial_betas = initial_ridge_fits(studies, &ridge_lambdas)?;
    let alphas = (0..kk)
        .into_par_iter()
        .map(|k| estimate_alpha(k, studies, &initial_betas, opts.alpha_ridge))
        .collect::<Result<Vec<_>>>()?;

    let mut alpha = DMatrix::zeros(kk, kk - 1);
    let mut projected = DMatrix::zeros(kk, p);
    for (k, a) in alphas.iter().enumerate() {
        let others = (0..kk).filter(|&o| o != k);
        for (c, o) in others.enumerate() {
            alpha[(k, c)] = a[c];
            let row = initial_betas.row(o) * a[c];
            let mut target = projected.row_mut(k);
            target += row;
        }
    }
    if alpha.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite risk-score weights".into()));
    }
    let (sigma, raw, jitter) = gram_similarity(&projected, opts.jitter)?;
    Ok(SimilarityEstimate {
        sigma,
        raw,
        alpha,
        initial_betas,
        projected_betas: projected,
        ridge_lambdas,
        jitter,
    })
}
