//! ADMM for the hierarchically regularized Cox model.
//!
//! The problem `max sum_k l(beta_k) - R0(beta_0) - R1(beta)` is split as
//! `min sum_k -l(beta_k) + R0(beta_0) + R1(z)` subject to `beta = z`, and the
//! scaled augmented Lagrangian is minimized block by block:
//!
//! 1. `beta`: closed-form soft threshold for `beta_0`, an L-BFGS solve of a
//!    proximal Cox problem for each `beta_k` (independent across studies);
//! 2. `z`: the proximal map of `R1`, independent across covariates;
//! 3. `u <- u + beta - z`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{lbfgs, LbfgsOptions};
use crate::penalties::{full_objective, CoefficientBundle, FusionExponent, PenaltyConfig};
use crate::survival::{CoxStudy, StudyData};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub rho: f64,
    /// Tolerance on both `||beta - z||_2` and `||z_new - z_old||_2`.
    pub epsilon: f64,
    pub max_iter: usize,
    /// Final gradient tolerance (infinity norm) of the per-study subproblems.
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub lbfgs_memory: usize,
    /// Residual balancing: double or halve rho when the primal and dual
    /// residuals differ by more than a factor of ten.
    pub adaptive_rho: bool,
    pub track_objective: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rho: 1.0,
            epsilon: 1e-5,
            max_iter: 2000,
            inner_tol: 1e-7,
            inner_max_iter: 1000,
            lbfgs_memory: 10,
            adaptive_rho: false,
            track_objective: true,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.epsilon > 0.0) || !(self.inner_tol > 0.0) {
            return Err(Error::invalid("solver tolerances must be positive"));
        }
        if self.max_iter == 0 || self.lbfgs_memory == 0 {
            return Err(Error::invalid("iteration cap and L-BFGS memory must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolverState {
    pub beta: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub rho: f64,
    pub iteration: usize,
    pub primal_residual: f64,
    pub z_change: f64,
}

impl SolverState {
    /// `beta = z = start`, `u = 0`.
    pub fn new(start: DMatrix<f64>, rho: f64) -> Self {
        let u = DMatrix::zeros(start.nrows(), start.ncols());
        Self {
            z: start.clone(),
            beta: start,
            u,
            rho,
            iteration: 0,
            primal_residual: 0.0,
            z_change: 0.0,
        }
    }

    pub fn k(&self) -> usize {
        self.beta.nrows() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub converged: bool,
    pub iterations: usize,
    pub final_primal_residual: f64,
    pub final_z_change: f64,
    pub final_rho: f64,
    pub objective_trace: Vec<f64>,
}

/// `s(x, lambda) = (1 - lambda / |x|)_+ x`
pub fn soft_threshold(x: f64, lambda: f64) -> f64 {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        0.0
    }
}

/// `beta_0 = S(rho (z_0 - u_0), lambda0) / (rho + 2 lambda1)`
pub fn beta0_update(state: &SolverState, cfg: &PenaltyConfig) -> DVector<f64> {
    let rho = state.rho;
    let denom = rho + 2.0 * cfg.lambda1;
    DVector::from_fn(state.beta.ncols(), |j, _| {
        soft_threshold(rho * (state.z[(0, j)] - state.u[(0, j)]), cfg.lambda0) / denom
    })
}

/// Minimizes `-w l(b) + rho/2 ||b - center||^2` starting from `start`.
pub(crate) fn proximal_cox(
    study: &CoxStudy,
    weight: f64,
    center: &DVector<f64>,
    rho: f64,
    start: DVector<f64>,
    opts: &SolverOptions,
) -> Result<DVector<f64>> {
    let objective = |b: &DVector<f64>, g: &mut DVector<f64>| {
        let diff = b - center;
        let (mut value, mut grad) = if weight == 0.0 {
            (0.0, DVector::zeros(b.len()))
        } else {
            let (v, g) = study.log_lik_grad(b);
            (-weight * v, g * -weight)
        };
        grad.axpy(rho, &diff, 1.0);
        value += 0.5 * rho * diff.norm_squared();
        g.copy_from(&grad);
        value
    };
    let lopts = LbfgsOptions {
        memory: opts.lbfgs_memory,
        grad_tol: opts.inner_tol,
        max_iter: opts.inner_max_iter,
    };
    let m = lbfgs(objective, start, &lopts);
    if !m.value.is_finite() {
        return Err(Error::Numerical("non-finite value in a study subproblem".into()));
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

/// `beta_k = argmin_b -l(b, D_k) + rho ||b - z_k + u_k||^2 / 2` for study
/// `k >= 1`, warm-started from the current `beta_k`.
pub fn betak_update(
    k: usize,
    state: &SolverState,
    study: &CoxStudy,
    opts: &SolverOptions,
) -> Result<DVector<f64>> {
    if k == 0 || k > state.k() {
        return Err(Error::invalid(format!("study index {k} outside 1..={}", state.k())));
    }
    let center = (state.z.row(k) - state.u.row(k)).transpose();
    let start = state.beta.row(k).transpose();
    proximal_cox(study, 1.0, &center, state.rho, start, opts)
}

/// Proximal map of the fusion penalty for a fixed `rho`, applied column by
/// column to `beta + u`.
#[derive(Debug, Clone)]
pub enum ZStep {
    /// `(I + 2 H' Sigma^{-1} H / rho)^{-1}` with `H = [-1, I]`.
    Quadratic { operator: DMatrix<f64> },
    /// Eliminating the shared coordinate leaves
    /// `min_d ||d||_Sigma + rho/2 (d - w)' P (d - w)` with
    /// `P = I - 11'/(K+1)`. With `d = Sigma^{1/2} e` the minimizer solves a
    /// one-dimensional secular equation in the eigenbasis of
    /// `Q = Sigma^{1/2} P Sigma^{1/2}`.
    Mahalanobis {
        rho: f64,
        sigma_half: DMatrix<f64>,
        q_vectors: DMatrix<f64>,
        q_values: DVector<f64>,
    },
}

impl ZStep {
    pub fn new(cfg: &PenaltyConfig, rho: f64) -> Result<Self> {
        let k = cfg.sigma.dim();
        match cfg.exponent {
            FusionExponent::Two => {
                let mut h = DMatrix::zeros(k, k + 1);
                for s in 0..k {
                    h[(s, 0)] = -1.0;
                    h[(s, s + 1)] = 1.0;
                }
                let sigma_inv_h = cfg.sigma.solve(&h);
                let m = DMatrix::identity(k + 1, k + 1) + h.tr_mul(&sigma_inv_h) * (2.0 / rho);
                let chol = Cholesky::new(m)
                    .ok_or_else(|| Error::Numerical("z-step system is not positive definite".into()))?;
                Ok(ZStep::Quadratic {
                    operator: chol.inverse(),
                })
            }
            FusionExponent::One => {
                let eig = SymmetricEigen::new(cfg.sigma.entries().clone());
                let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
                let sigma_half =
                    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
                let p = centering(k);
                let q = &sigma_half * p * &sigma_half;
                let q = (&q + q.transpose()) * 0.5;
                let qe = SymmetricEigen::new(q);
                Ok(ZStep::Mahalanobis {
                    rho,
                    sigma_half,
                    q_vectors: qe.eigenvectors,
                    q_values: qe.eigenvalues,
                })
            }
        }
    }

    /// `z = argmin_z R1(z) + rho/2 ||z - v||^2` for `v = beta + u`.
    pub fn apply(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            ZStep::Quadratic { operator } => Ok(operator * v),
            ZStep::Mahalanobis {
                rho,
                sigma_half,
                q_vectors,
                q_values,
            } => {
                let k1 = v.nrows();
                let k = k1 - 1;
                let p = centering(k);
                let mut z = DMatrix::zeros(k1, v.ncols());
                for j in 0..v.ncols() {
                    let col = v.column(j);
                    let w = DVector::from_fn(k, |s, _| col[s + 1] - col[0]);
                    let b = (sigma_half * (&p * &w)) * *rho;
                    let d = if b.norm() <= 1.0 {
                        DVector::zeros(k)
                    } else {
                        let bt = q_vectors.tr_mul(&b);
                        let t = solve_secular(&bt, q_values, *rho)?;
                        let et = DVector::from_fn(k, |i, _| bt[i] * t / (rho * q_values[i] * t + 1.0));
                        sigma_half * (q_vectors * et)
                    };
                    let c = (col[0] + (0..k).map(|s| col[s + 1] - d[s]).sum::<f64>()) / k1 as f64;
                    z[(0, j)] = c;
                    for s in 0..k {
                        z[(s + 1, j)] = c + d[s];
                    }
                }
                Ok(z)
            }
        }
    }
}

fn centering(k: usize) -> DMatrix<f64> {
    DMatrix::identity(k, k) - DMatrix::from_element(k, k, 1.0 / (k as f64 + 1.0))
}

/// Finds `t > 0` with `sum_i b_i^2 / (rho q_i t + 1)^2 = 1`, given that the
/// left side exceeds one at `t = 0`. Newton on `1/r(t) - 1`, which is close to
/// linear, safeguarded by bisection.
fn solve_secular(b: &DVector<f64>, q: &DVector<f64>, rho: f64) -> Result<f64> {
    let r_and_slope = |t: f64| {
        let mut s = 0.0;
        let mut ds = 0.0;
        for i in 0..b.len() {
            let den = rho * q[i] * t + 1.0;
            s += b[i] * b[i] / (den * den);
            ds += -2.0 * b[i] * b[i] * rho * q[i] / (den * den * den);
        }
        let r = s.sqrt();
        (r, ds / (2.0 * r))
    };
    let q_min = q.min().max(0.0);
    let b_norm = b.norm();
    let mut lo = 0.0;
    let mut hi = if q_min > 0.0 {
        (b_norm - 1.0) / (rho * q_min)
    } else {
        f64::INFINITY
    };
    if !hi.is_finite() {
        // Q always has eigenvalues >= lambda_min(Sigma)/(K+1) > 0
        return Err(Error::Numerical("degenerate fusion subproblem".into()));
    }
    let mut t = 0.0;
    for _ in 0..200 {
        let (r, dr) = r_and_slope(t);
        let g = 1.0 / r - 1.0;
        if g.abs() <= 1e-15 {
            return Ok(t);
        }
        if g < 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let dg = -dr / (r * r);
        let mut next = t - g / dg;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - t).abs() <= 1e-15 * t.abs().max(1e-300) {
            return Ok(next);
        }
        t = next;
    }
    Err(Error::SolverStall {
        iterations: 200,
        gradient_norm: f64::NAN,
        last_iterate: vec![t],
    })
}

pub fn z_update(state: &SolverState, cfg: &PenaltyConfig) -> Result<DMatrix<f64>> {
    ZStep::new(cfg, state.rho)?.apply(&(&state.beta + &state.u))
}

pub fn u_update(state: &SolverState) -> DMatrix<f64> {
    &state.u + &state.beta - &state.z
}

/// Fits the model from raw studies, starting at zero.
pub fn fit(
    studies: &[StudyData],
    cfg: &PenaltyConfig,
    opts: &SolverOptions,
) -> Result<(CoefficientBundle, ConvergenceReport)> {
    let prepared = studies.iter().map(CoxStudy::new).collect::<Result<Vec<_>>>()?;
    fit_prepared(&prepared, cfg, opts, None)
}

/// The coefficients reported from a state: the consensus block `z`, except
/// that shared coefficients zeroed by the `beta_0` soft threshold are
/// reported as exact zeros.
pub fn reported_bundle(state: &SolverState) -> CoefficientBundle {
    let mut out = state.z.clone();
    for j in 0..out.ncols() {
        if state.beta[(0, j)] == 0.0 {
            out[(0, j)] = 0.0;
        }
    }
    CoefficientBundle::from_matrix(out)
}

pub fn fit_prepared(
    studies: &[CoxStudy],
    cfg: &PenaltyConfig,
    opts: &SolverOptions,
    warm_start: Option<&CoefficientBundle>,
) -> Result<(CoefficientBundle, ConvergenceReport)> {
    let (state, report) = run(studies, cfg, opts, warm_start)?;
    Ok((reported_bundle(&state), report))
}

/// Early subproblems are solved loosely; the tolerance tightens with the
/// residuals and reaches `inner_tol` near convergence.
fn inner_tolerance(state: &SolverState, opts: &SolverOptions) -> f64 {
    if state.iteration == 0 {
        return opts.inner_tol.max(1e-3);
    }
    let progress = state.primal_residual.max(state.rho * state.z_change);
    (0.01 * progress).clamp(opts.inner_tol, 1e-3)
}

/// Runs the iteration and returns the final state alongside the report.
pub fn run(
    studies: &[CoxStudy],
    cfg: &PenaltyConfig,
    opts: &SolverOptions,
    warm_start: Option<&CoefficientBundle>,
) -> Result<(SolverState, ConvergenceReport)> {
    opts.validate()?;
    let k = studies.len();
    if k == 0 {
        return Err(Error::invalid("at least one study is required"));
    }
    if cfg.sigma.dim() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: cfg.sigma.dim(),
            context: "similarity matrix dimension",
        });
    }
    let p = studies[0].p();
    if let Some(s) = studies.iter().find(|s| s.p() != p) {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: s.p(),
            context: "study covariate count",
        });
    }
    let start = match warm_start {
        Some(b) if b.k() == k && b.p() == p => b.matrix().clone(),
        Some(b) => {
            return Err(Error::DimensionMismatch {
                expected: (k + 1) * p,
                found: (b.k() + 1) * b.p(),
                context: "warm start size",
            })
        }
        None => DMatrix::zeros(k + 1, p),
    };

    let mut state = SolverState::new(start, opts.rho);
    let mut zstep = ZStep::new(cfg, state.rho)?;
    let mut trace = Vec::new();
    let mut converged = false;

    while state.iteration < opts.max_iter {
        // step i
        let beta0 = beta0_update(&state, cfg);
        let step_opts = SolverOptions {
            inner_tol: inner_tolerance(&state, opts),
            ..*opts
        };
        let rows: Vec<Result<DVector<f64>>> = (1..=k)
            .into_par_iter()
            .map(|s| match betak_update(s, &state, &studies[s - 1], &step_opts) {
                Err(Error::SolverStall {
                    last_iterate,
                    gradient_norm,
                    ..
                }) => {
                    log::debug!("study {s} subproblem stalled at gradient norm {gradient_norm:.3e}");
                    Ok(DVector::from_vec(last_iterate))
                }
                other => other,
            })
            .collect();
        state.beta.set_row(0, &beta0.transpose());
        for (s, row) in rows.into_iter().enumerate() {
            state.beta.set_row(s + 1, &row?.transpose());
        }

        // step ii
        let z_new = zstep.apply(&(&state.beta + &state.u))?;
        state.z_change = (&z_new - &state.z).norm();
        state.z = z_new;

        // step iii
        state.u = u_update(&state);
        state.primal_residual = (&state.beta - &state.z).norm();
        state.iteration += 1;

        if opts.track_objective {
            let value = full_objective(&reported_bundle(&state), studies, cfg)?;
            if value.is_nan() {
                return Err(Error::Numerical(format!(
                    "objective is NaN at iteration {}",
                    state.iteration
                )));
            }
            trace.push(value);
        }
        if !state.z.iter().all(|v| v.is_finite()) || !state.beta.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite iterate at iteration {}",
                state.iteration
            )));
        }

        if state.primal_residual <= opts.epsilon && state.z_change <= opts.epsilon {
            converged = true;
            break;
        }

        if opts.adaptive_rho {
            let dual = state.rho * state.z_change;
            let factor = if state.primal_residual > 10.0 * dual {
                2.0
            } else if dual > 10.0 * state.primal_residual {
                0.5
            } else {
                1.0
            };
            if factor != 1.0 {
                state.rho *= factor;
                state.u /= factor;
                zstep = ZStep::new(cfg, state.rho)?;
            }
        }
    }

    let report = ConvergenceReport {
        converged,
        iterations: state.iteration,
        final_primal_residual: state.primal_residual,
        final_z_change: state.z_change,
        final_rho: state.rho,
        objective_trace: trace,
    };
    Ok((state, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::penalties::SimilarityMatrix;
    use approx::assert_relative_eq;

    fn tiny_study() -> CoxStudy {
        let s = StudyData::new(
            "t",
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
            vec![true, true, false, true, true, false, true],
            DMatrix::from_column_slice(7, 1, &[0.5, 1.0, -0.3, 0.2, -1.0, 0.4, -0.6]),
        )
        .unwrap();
        CoxStudy::new(&s).unwrap()
    }

    fn config(l0: f64, l1: f64, a: FusionExponent, sigma: DMatrix<f64>) -> PenaltyConfig {
        PenaltyConfig::new(l0, l1, a, SimilarityMatrix::new(sigma).unwrap()).unwrap()
    }

    #[test]
    fn soft_threshold_values() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-4.0, 1.5), -2.5);
        assert_eq!(soft_threshold(0.0, 0.0), 0.0);
    }

    #[test]
    fn beta0_closed_form() {
        let mut state = SolverState::new(DMatrix::zeros(2, 2), 1.0);
        state.z[(0, 0)] = 3.0;
        state.z[(0, 1)] = 0.5;
        let c = config(1.0, 0.0, FusionExponent::Two, DMatrix::identity(1, 1));
        let b = beta0_update(&state, &c);
        assert_eq!(b.as_slice(), &[2.0, 0.0]);

        let mut state = SolverState::new(DMatrix::zeros(2, 1), 2.0);
        state.z[(0, 0)] = 3.5;
        state.u[(0, 0)] = 0.5;
        let c = config(1.0, 0.5, FusionExponent::Two, DMatrix::identity(1, 1));
        assert_relative_eq!(beta0_update(&state, &c)[0], 5.0 / 3.0, epsilon = 1e-15);

        let c = config(0.0, 0.5, FusionExponent::Two, DMatrix::identity(1, 1));
        assert_relative_eq!(beta0_update(&state, &c)[0], 2.0 * 3.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn prox_without_likelihood_is_the_center() {
        let study = tiny_study();
        let center = DVector::from_vec(vec![0.7]);
        let b = proximal_cox(&study, 0.0, &center, 2.0, DVector::zeros(1), &SolverOptions::default()).unwrap();
        assert_relative_eq!(b[0], 0.7, epsilon = 1e-10);
    }

    #[test]
    fn betak_matches_scalar_root_finding() {
        let study = tiny_study();
        let mut state = SolverState::new(DMatrix::zeros(2, 1), 1.5);
        state.z[(1, 0)] = 0.4;
        state.u[(1, 0)] = -0.1;
        let b = betak_update(1, &state, &study, &SolverOptions::default()).unwrap();

        // stationarity: -l'(b) + rho (b - c) = 0, increasing in b; bisection
        let c = 0.5;
        let h = |b: f64| -study.log_lik_grad(&DVector::from_element(1, b)).1[0] + 1.5 * (b - c);
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if h(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((b[0] - 0.5 * (lo + hi)).abs() < 1e-8, "{} vs {}", b[0], lo);
        assert!(h(b[0]).abs() < 1e-6);
    }

    #[test]
    fn z_step_two_by_two() {
        let c = config(0.0, 0.0, FusionExponent::Two, DMatrix::identity(1, 1));
        let mut state = SolverState::new(DMatrix::zeros(2, 1), 2.0);
        state.beta[(0, 0)] = 3.0;
        let z = z_update(&state, &c).unwrap();
        assert_relative_eq!(z[(0, 0)], 2.0, epsilon = 1e-14);
        assert_relative_eq!(z[(1, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn z_step_keeps_consensus_columns() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        for a in [FusionExponent::One, FusionExponent::Two] {
            let c = config(0.0, 0.0, a, sigma.clone());
            let mut state = SolverState::new(DMatrix::from_row_slice(3, 2, &[1.0, -2.0, 1.0, -2.0, 1.0, -2.0]), 1.3);
            state.u = DMatrix::from_element(3, 2, 0.25);
            let z = z_update(&state, &c).unwrap();
            let v = &state.beta + &state.u;
            assert!((z - v).amax() < 1e-12);
        }
    }

    #[test]
    fn mahalanobis_z_step_fuses_small_deviations() {
        let c = config(0.0, 0.0, FusionExponent::One, DMatrix::identity(2, 2));
        let mut state = SolverState::new(DMatrix::from_column_slice(3, 1, &[0.0, 0.1, -0.2]), 1.0);
        state.u.fill(0.0);
        let z = z_update(&state, &c).unwrap();
        assert_eq!(z[(1, 0)], z[(0, 0)]);
        assert_eq!(z[(2, 0)], z[(0, 0)]);
    }

    #[test]
    fn u_update_is_affine() {
        let mut state = SolverState::new(DMatrix::from_element(2, 2, 1.0), 1.0);
        assert_eq!(u_update(&state), state.u);
        state.z = DMatrix::from_element(2, 2, 0.25);
        let u1 = u_update(&state);
        assert_eq!(u1, DMatrix::from_element(2, 2, 0.75));
        state.u = u1;
        state.z = DMatrix::from_element(2, 2, 0.5);
        assert_eq!(u_update(&state), DMatrix::from_element(2, 2, 1.25));
    }
}
