//! Comparison methods: single-study and pooled penalized Cox fits, and
//! fixed/random-effects combination of per-study estimates.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{lbfgs, prox_gradient_l1, LbfgsOptions, Minimum, ProxGradOptions};
use crate::selection::{cross_validate, logspace, select_best, CvModel, CvPlan};
use crate::survival::{CoxStudy, StudyData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    /// `lambda ||beta||_1`
    Lasso,
    /// `lambda ||beta||_2^2`
    Ridge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselineMethod {
    SL,
    SR,
    PL,
    PR,
    FE,
    RE,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 6] = [Self::SL, Self::SR, Self::PL, Self::PR, Self::FE, Self::RE];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SL => "SL",
            Self::SR => "SR",
            Self::PL => "PL",
            Self::PR => "PR",
            Self::FE => "FE",
            Self::RE => "RE",
        }
    }

    pub fn penalty(self) -> Penalty {
        match self {
            Self::SL | Self::PL => Penalty::Lasso,
            _ => Penalty::Ridge,
        }
    }

    pub fn is_single_study(self) -> bool {
        matches!(self, Self::SL | Self::SR)
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown baseline method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetaMode {
    FE,
    RE,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum BaselineCoefficients {
    /// One row per study.
    PerStudy(Vec<Vec<f64>>),
    Shared(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFit {
    pub method: BaselineMethod,
    pub coefficients: BaselineCoefficients,
    /// Per-study, per-coefficient variances feeding FE/RE.
    pub variances: Option<Vec<Vec<f64>>>,
    /// Between-study variance per coefficient (RE only).
    pub tau2: Option<Vec<f64>>,
}

impl BaselineFit {
    /// Coefficients used to score study `k` of the fitted collection.
    pub fn study_coefficients(&self, k: usize) -> Result<DVector<f64>> {
        match &self.coefficients {
            BaselineCoefficients::PerStudy(rows) => rows
                .get(k)
                .map(|r| DVector::from_column_slice(r))
                .ok_or_else(|| Error::invalid(format!("no coefficients for study {k}"))),
            BaselineCoefficients::Shared(v) => Ok(DVector::from_column_slice(v)),
        }
    }
}

const INNER_TOL: f64 = 1e-7;

fn finish(m: Minimum) -> Result<DVector<f64>> {
    if !m.value.is_finite() {
        return Err(Error::Numerical("non-finite penalized likelihood".into()));
    }
    if m.converged {
        Ok(m.x)
    } else {
        Err(Error::SolverStall {
            iterations: m.iterations,
            gradient_norm: m.grad_norm,
            last_iterate: m.x.as_slice().to_vec(),
        })
    }
}

/// Maximizer of `sum_s l(beta, D_s) - pen(beta)` over one or more strata.
pub fn fit_penalized(
    strata: &[&CoxStudy],
    penalty: Penalty,
    lambda: f64,
    warm_start: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let p = check_strata(strata)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    let x0 = match warm_start {
        Some(w) if w.len() == p => w.clone(),
        Some(w) => {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: w.len(),
                context: "warm start length",
            })
        }
        None => DVector::zeros(p),
    };
    let neg_lik = |b: &DVector<f64>, g: &mut DVector<f64>| {
        g.fill(0.0);
        let mut value = 0.0;
        for s in strata {
            let (v, grad) = s.log_lik_grad(b);
            value -= v;
            *g -= grad;
        }
        value
    };
    match penalty {
        Penalty::Lasso => finish(prox_gradient_l1(neg_lik, lambda, x0, &ProxGradOptions::default())),
        Penalty::Ridge => {
            let objective = |b: &DVector<f64>, g: &mut DVector<f64>| {
                let v = neg_lik(b, g);
                g.axpy(2.0 * lambda, b, 1.0);
                v + lambda * b.norm_squared()
            };
            let opts = LbfgsOptions {
                grad_tol: INNER_TOL,
                max_iter: 5000,
                ..Default::default()
            };
            finish(lbfgs(objective, x0, &opts))
        }
    }
}

fn check_strata(strata: &[&CoxStudy]) -> Result<usize> {
    let first = strata.first().ok_or_else(|| Error::invalid("at least one study is required"))?;
    let p = first.p();
    if let Some(s) = strata.iter().find(|s| s.p() != p) {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: s.p(),
            context: "study covariate count",
        });
    }
    Ok(p)
}

pub fn fit_single(study: &StudyData, penalty: Penalty, lambda: f64) -> Result<DVector<f64>> {
    fit_penalized(&[&CoxStudy::new(study)?], penalty, lambda, None)
}

/// Pooled fit with a separate baseline hazard per study: the partial
/// likelihood sums over within-study risk sets.
pub fn fit_pooled(studies: &[StudyData], penalty: Penalty, lambda: f64) -> Result<DVector<f64>> {
    let prepared = studies.iter().map(CoxStudy::new).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&CoxStudy> = prepared.iter().collect();
    fit_penalized(&refs, penalty, lambda, None)
}

/// Smallest LASSO weight at which the all-zero vector is optimal:
/// `max_j |sum_s d l_s / d beta_j|` at zero.
pub fn lasso_lambda_max(strata: &[&CoxStudy]) -> Result<f64> {
    let p = check_strata(strata)?;
    let zero = DVector::zeros(p);
    let mut g = DVector::zeros(p);
    for s in strata {
        g += s.log_lik_grad(&zero).1;
    }
    Ok(g.amax())
}

/// Ridge estimate and per-coefficient variances, the diagonal of the inverse
/// penalized information `(I(beta) + 2 lambda I)^{-1}` at the optimum.
pub fn ridge_with_variances(study: &CoxStudy, lambda: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    let beta = fit_penalized(&[study], Penalty::Ridge, lambda, None)?;
    let mut h = study.information(&beta);
    for j in 0..h.nrows() {
        h[(j, j)] += 2.0 * lambda;
    }
    let inv = h
        .cholesky()
        .ok_or_else(|| Error::Numerical("penalized information is not positive definite".into()))?
        .inverse();
    Ok((beta, inv.diagonal()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaEstimate {
    pub estimate: DVector<f64>,
    /// Between-study variance per coefficient; zero for FE.
    pub tau2: DVector<f64>,
}

/// Inverse-variance (FE) or DerSimonian-Laird (RE) combination, coefficient
/// by coefficient. Rows of the inputs are studies.
pub fn meta_combine(estimates: &DMatrix<f64>, variances: &DMatrix<f64>, mode: MetaMode) -> Result<MetaEstimate> {
    if estimates.shape() != variances.shape() {
        return Err(Error::DimensionMismatch {
            expected: estimates.len(),
            found: variances.len(),
            context: "variance matrix size",
        });
    }
    if estimates.nrows() == 0 {
        return Err(Error::invalid("at least one study is required"));
    }
    if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("variances must be positive and finite"));
    }
    let k = estimates.nrows();
    let p = estimates.ncols();
    let mut estimate = DVector::zeros(p);
    let mut tau2 = DVector::zeros(p);
    for j in 0..p {
        let y = estimates.column(j);
        let w = variances.column(j).map(|v| 1.0 / v);
        let sw = w.sum();
        let fixed = w.dot(&y) / sw;
        if mode == MetaMode::FE || k < 2 {
            estimate[j] = fixed;
            continue;
        }
        let q: f64 = (0..k).map(|i| w[i] * (y[i] - fixed).powi(2)).sum();
        let c = sw - w.norm_squared() / sw;
        let t2 = if c > 0.0 {
            ((q - (k - 1) as f64) / c).max(0.0)
        } else {
            0.0
        };
        tau2[j] = t2;
        estimate[j] = if t2 == 0.0 {
            fixed
        } else {
            let wr = variances.column(j).map(|v| 1.0 / (v + t2));
            wr.dot(&y) / wr.sum()
        };
    }
    Ok(MetaEstimate { estimate, tau2 })
}

/// Fits one baseline with a given penalty weight per study (single-study
/// methods and FE/RE inputs) or a single pooled weight.
pub fn fit_baseline(method: BaselineMethod, studies: &[CoxStudy], lambdas: &[f64]) -> Result<BaselineFit> {
    let k = studies.len();
    let per_study = |i: usize| lambdas.get(i).or(lambdas.first()).copied().unwrap_or(0.0);
    match method {
        BaselineMethod::SL | BaselineMethod::SR => {
            let rows = (0..k)
                .into_par_iter()
                .map(|i| fit_penalized(&[&studies[i]], method.penalty(), per_study(i), None))
                .collect::<Result<Vec<_>>>()?;
            Ok(BaselineFit {
                method,
                coefficients: BaselineCoefficients::PerStudy(rows.iter().map(|r| r.as_slice().to_vec()).collect()),
                variances: None,
                tau2: None,
            })
        }
        BaselineMethod::PL | BaselineMethod::PR => {
            let refs: Vec<&CoxStudy> = studies.iter().collect();
            let beta = fit_penalized(&refs, method.penalty(), per_study(0), None)?;
            Ok(BaselineFit {
                method,
                coefficients: BaselineCoefficients::Shared(beta.as_slice().to_vec()),
                variances: None,
                tau2: None,
            })
        }
        BaselineMethod::FE | BaselineMethod::RE => {
            let fits = (0..k)
                .into_par_iter()
                .map(|i| ridge_with_variances(&studies[i], per_study(i)))
                .collect::<Result<Vec<_>>>()?;
            let p = studies[0].p();
            let est = DMatrix::from_fn(k, p, |i, j| fits[i].0[j]);
            let var = DMatrix::from_fn(k, p, |i, j| fits[i].1[j]);
            let mode = if method == BaselineMethod::FE { MetaMode::FE } else { MetaMode::RE };
            let combined = meta_combine(&est, &var, mode)?;
            Ok(BaselineFit {
                method,
                coefficients: BaselineCoefficients::Shared(combined.estimate.as_slice().to_vec()),
                variances: Some(var.row_iter().map(|r| r.iter().copied().collect()).collect()),
                tau2: (mode == MetaMode::RE).then(|| combined.tau2.as_slice().to_vec()),
            })
        }
    }
}

/// Ridge weights scaled by the number of events:
/// `m * logspace(10, 1e-3, 9)`, largest first.
pub fn ridge_lambda_grid(n_events: usize) -> Vec<f64> {
    logspace(1e1, 1e-3, 9).into_iter().map(|v| v * n_events as f64).collect()
}

/// LASSO weights `lambda_max * logspace(1, 0.01, 8)`, largest first.
pub fn lasso_lambda_grid(lambda_max: f64) -> Vec<f64> {
    logspace(1.0, 1e-2, 8).into_iter().map(|v| v * lambda_max).collect()
}

/// Default data-relative grid for one penalty over the given strata.
pub fn penalty_grid(strata: &[&CoxStudy], penalty: Penalty) -> Result<Vec<f64>> {
    match penalty {
        Penalty::Ridge => Ok(ridge_lambda_grid(strata.iter().map(|s| s.n_events()).sum())),
        Penalty::Lasso => Ok(lasso_lambda_grid(lasso_lambda_max(strata)?)),
    }
}

/// Separate fits per study, each with its own grid; point `i` uses
/// `grids[k][i]` for study `k`.
pub struct SingleStudyModel {
    pub penalty: Penalty,
    pub grids: Vec<Vec<f64>>,
}

impl CvModel for SingleStudyModel {
    type Fit = Vec<DVector<f64>>;

    fn n_points(&self) -> usize {
        self.grids.iter().map(Vec::len).min().unwrap_or(0)
    }

    fn fit(&self, train: &[CoxStudy], point: usize, warm: Option<&Self::Fit>) -> Result<Self::Fit> {
        train
            .iter()
            .enumerate()
            .map(|(k, s)| fit_penalized(&[s], self.penalty, self.grids[k][point], warm.map(|w| &w[k])))
            .collect()
    }

    fn coefficients(&self, fit: &Self::Fit, k: usize) -> DVector<f64> {
        fit[k].clone()
    }
}

/// One fit on all studies with a stratified likelihood.
pub struct PooledModel {
    pub penalty: Penalty,
    pub grid: Vec<f64>,
}

impl CvModel for PooledModel {
    type Fit = DVector<f64>;

    fn n_points(&self) -> usize {
        self.grid.len()
    }

    fn fit(&self, train: &[CoxStudy], point: usize, warm: Option<&Self::Fit>) -> Result<Self::Fit> {
        let refs: Vec<&CoxStudy> = train.iter().collect();
        fit_penalized(&refs, self.penalty, self.grid[point], warm)
    }

    fn coefficients(&self, fit: &Self::Fit, _k: usize) -> DVector<f64> {
        fit.clone()
    }
}

/// Per-study penalty weights chosen by cross-validation on each study's own
/// validation C (ties: smallest weight).
pub fn select_single_lambdas(studies: &[StudyData], penalty: Penalty, plan: &CvPlan) -> Result<Vec<f64>> {
    let grids = studies
        .iter()
        .map(|s| penalty_grid(&[&CoxStudy::new(s)?], penalty))
        .collect::<Result<Vec<_>>>()?;
    let model = SingleStudyModel { penalty, grids };
    let scores = cross_validate(studies, plan, &model)?;
    (0..studies.len())
        .map(|k| {
            let per_point: Vec<Option<f64>> = (0..model.n_points()).map(|i| scores.study_mean(i, k)).collect();
            let grid = &model.grids[k];
            select_best(&per_point, |a, b| grid[a].total_cmp(&grid[b]))
                .map(|i| grid[i])
                .ok_or_else(|| Error::Numerical(format!("no usable penalty weight for study {k}")))
        })
        .collect()
}

/// Pooled penalty weight chosen by the weighted validation C (ties: smallest).
pub fn select_pooled_lambda(studies: &[StudyData], penalty: Penalty, plan: &CvPlan) -> Result<f64> {
    let prepared = studies.iter().map(CoxStudy::new).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&CoxStudy> = prepared.iter().collect();
    let model = PooledModel {
        penalty,
        grid: penalty_grid(&refs, penalty)?,
    };
    let scores = cross_validate(studies, plan, &model)?;
    let means: Vec<Option<f64>> = (0..model.n_points()).map(|i| scores.mean_score(i)).collect();
    select_best(&means, |a, b| model.grid[a].total_cmp(&model.grid[b]))
        .map(|i| model.grid[i])
        .ok_or_else(|| Error::Numerical("no usable pooled penalty weight".into()))
}

/// Selects penalty weights by cross-validation and fits `method` on all
/// data. FE and RE reuse the per-study ridge weights.
pub fn fit_baseline_cv(method: BaselineMethod, studies: &[StudyData], plan: &CvPlan) -> Result<BaselineFit> {
    let lambdas = if method.is_single_study() || matches!(method, BaselineMethod::FE | BaselineMethod::RE) {
        select_single_lambdas(studies, method.penalty(), plan)?
    } else {
        vec![select_pooled_lambda(studies, method.penalty(), plan)?]
    };
    let prepared = studies.iter().map(CoxStudy::new).collect::<Result<Vec<_>>>()?;
    fit_baseline(method, &prepared, &lambdas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{gen_covariates, gen_survival, substream, Baseline, Censoring};
    use approx::assert_relative_eq;

    fn sim_study(n: usize, beta: &[f64], seed: u64) -> StudyData {
        let mut rng = substream(seed, 0, 0, 0);
        let x = gen_covariates(n, beta.len(), 0.3, &mut rng);
        let (t, s) = gen_survival(
            &x,
            &DVector::from_column_slice(beta),
            &Baseline::default(),
            &Censoring::CalibratedExponential { fraction: 0.3 },
            &mut rng,
        )
        .unwrap();
        StudyData::new(format!("s{seed}"), t, s, x).unwrap()
    }

    #[test]
    fn lasso_zero_above_threshold() {
        let s = sim_study(80, &[0.8, -0.5, 0.0, 0.3], 1);
        let c = CoxStudy::new(&s).unwrap();
        let lmax = lasso_lambda_max(&[&c]).unwrap();
        let above = fit_penalized(&[&c], Penalty::Lasso, lmax * 1.01, None).unwrap();
        assert!(above.iter().all(|v| *v == 0.0));
        let below = fit_penalized(&[&c], Penalty::Lasso, lmax * 0.5, None).unwrap();
        assert!(below.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn ridge_scalar_matches_bisection() {
        let s = sim_study(60, &[0.7], 2);
        let c = CoxStudy::new(&s).unwrap();
        let lambda = 1e-8;
        let beta = fit_single(&s, Penalty::Ridge, lambda).unwrap()[0];
        // root of the penalized score by bisection on the concave objective
        let score = |b: f64| c.log_lik_grad(&DVector::from_element(1, b)).1[0] - 2.0 * lambda * b;
        let (mut lo, mut hi) = (-5.0, 5.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if score(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((beta - 0.5 * (lo + hi)).abs() < 1e-6);
    }

    #[test]
    fn ridge_norm_non_increasing() {
        let s = sim_study(80, &[0.8, -0.5, 0.2], 3);
        let a = fit_single(&s, Penalty::Ridge, 1.0).unwrap();
        let b = fit_single(&s, Penalty::Ridge, 2.0).unwrap();
        assert!(b.norm() <= a.norm() + 1e-12);
    }

    #[test]
    fn pooled_copies_match_single_at_scaled_lambda() {
        let s = sim_study(70, &[0.6, -0.4], 4);
        for penalty in [Penalty::Ridge, Penalty::Lasso] {
            let single = fit_single(&s, penalty, 0.7).unwrap();
            let pooled = fit_pooled(&[s.clone(), s.clone(), s.clone()], penalty, 2.1).unwrap();
            assert!((single - pooled).amax() < 1e-5);
        }
        let one = fit_pooled(std::slice::from_ref(&s), Penalty::Ridge, 0.7).unwrap();
        assert_eq!(one, fit_single(&s, Penalty::Ridge, 0.7).unwrap());
    }

    #[test]
    fn pooled_conflict_cancels() {
        let a = sim_study(300, &[1.0, 0.5], 5);
        let b = sim_study(300, &[-1.0, 0.5], 6);
        let beta = fit_pooled(&[a, b], Penalty::Ridge, 0.01).unwrap();
        assert!(beta[0].abs() < 0.2, "{beta}");
        // the shared effect keeps its sign, attenuated by the unmodelled conflict
        assert!(beta[1] > 0.15, "{beta}");
    }

    #[test]
    fn fe_equal_weights() {
        let e = DMatrix::from_row_slice(2, 1, &[1.0, 3.0]);
        let v = DMatrix::from_element(2, 1, 1.0);
        assert_eq!(meta_combine(&e, &v, MetaMode::FE).unwrap().estimate[0], 2.0);
    }

    #[test]
    fn identical_studies_have_no_heterogeneity() {
        let e = DMatrix::from_row_slice(3, 2, &[0.4, -1.0, 0.4, -1.0, 0.4, -1.0]);
        let v = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.1, 0.2, 0.1, 0.2]);
        let fe = meta_combine(&e, &v, MetaMode::FE).unwrap();
        let re = meta_combine(&e, &v, MetaMode::RE).unwrap();
        assert_eq!(re.tau2, DVector::zeros(2));
        assert_eq!(fe.estimate, re.estimate);
        assert_relative_eq!(fe.estimate[0], 0.4, epsilon = 1e-15);
    }

    #[test]
    fn dersimonian_laird_by_hand() {
        // y = (0, 1, 3), v = (1, 0.5, 0.25): w = (1, 2, 4), sum 7
        // FE = (0 + 2 + 12) / 7 = 2
        // Q = 1*4 + 2*1 + 4*1 = 10, C = 7 - 21/7 = 4, tau2 = (10 - 2)/4 = 2
        // RE weights 1/3, 1/2.5, 1/2.25
        let e = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 3.0]);
        let v = DMatrix::from_column_slice(3, 1, &[1.0, 0.5, 0.25]);
        assert_relative_eq!(meta_combine(&e, &v, MetaMode::FE).unwrap().estimate[0], 2.0, epsilon = 1e-12);
        let re = meta_combine(&e, &v, MetaMode::RE).unwrap();
        assert_relative_eq!(re.tau2[0], 2.0, epsilon = 1e-12);
        let (w1, w2, w3) = (1.0 / 3.0, 1.0 / 2.5, 1.0 / 2.25);
        let expected = (w2 * 1.0 + w3 * 3.0) / (w1 + w2 + w3);
        assert_relative_eq!(re.estimate[0], expected, epsilon = 1e-12);
    }

    #[test]
    fn meta_rejects_bad_variance() {
        let e = DMatrix::from_element(2, 1, 1.0);
        let v = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert!(meta_combine(&e, &v, MetaMode::FE).is_err());
    }

    #[test]
    fn single_study_fits_are_isolated() {
        let a = sim_study(60, &[0.5, 0.1], 7);
        let b = sim_study(60, &[-0.3, 0.4], 8);
        let b2 = sim_study(60, &[0.9, 0.9], 9);
        let fit1 = fit_baseline(BaselineMethod::SR, &[CoxStudy::new(&a).unwrap(), CoxStudy::new(&b).unwrap()], &[0.5]).unwrap();
        let fit2 = fit_baseline(BaselineMethod::SR, &[CoxStudy::new(&a).unwrap(), CoxStudy::new(&b2).unwrap()], &[0.5]).unwrap();
        assert_eq!(fit1.study_coefficients(0).unwrap(), fit2.study_coefficients(0).unwrap());
    }
}
