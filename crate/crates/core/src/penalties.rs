//! Penalty terms of the hierarchical model: an elastic net on the shared
//! vector and a similarity-weighted fusion penalty tying each covariate's
//! study-specific coefficients to the shared one.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survival::CoxStudy;

/// Symmetric positive-definite `K x K` matrix controlling cross-study
/// shrinkage. Holds a Cholesky factor so that `Sigma^{-1}` is only ever
/// applied through triangular solves.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    entries: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    min_eigenvalue: f64,
    max_eigenvalue: f64,
}

impl PartialEq for SimilarityMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl SimilarityMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let k = entries.nrows();
        if k == 0 || entries.ncols() != k {
            return Err(Error::invalid(format!(
                "similarity matrix must be square and non-empty, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("similarity matrix has non-finite entries"));
        }
        let scale = entries.amax().max(1.0);
        for i in 0..k {
            for j in 0..i {
                if (entries[(i, j)] - entries[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::invalid(format!(
                        "similarity matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        // symmetrize exactly
        let entries = (&entries + entries.transpose()) * 0.5;
        let eig = SymmetricEigen::new(entries.clone());
        let min_eigenvalue = eig.eigenvalues.min();
        let max_eigenvalue = eig.eigenvalues.max();
        if min_eigenvalue <= 0.0 {
            return Err(Error::invalid(format!(
                "similarity matrix is not positive definite (min eigenvalue {min_eigenvalue:.3e})"
            )));
        }
        let factor = Cholesky::new(entries.clone())
            .ok_or_else(|| Error::invalid("similarity matrix Cholesky factorization failed"))?;
        Ok(Self {
            entries,
            factor,
            min_eigenvalue,
            max_eigenvalue,
        })
    }

    pub fn identity(k: usize) -> Self {
        Self::new(DMatrix::identity(k, k)).expect("identity is positive definite")
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.max_eigenvalue
    }

    /// `Sigma^{-1} B` via the cached factor.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(rhs)
    }

    /// `x' Sigma^{-1} x`
    pub fn inv_quad(&self, x: &DVector<f64>) -> f64 {
        let l = self.factor.l_dirty();
        let y = l
            .solve_lower_triangular(x)
            .expect("Cholesky factor has a non-zero diagonal");
        y.norm_squared()
    }

    /// The Sigma-norm `sqrt(x' Sigma^{-1} x)`.
    pub fn norm(&self, x: &DVector<f64>) -> f64 {
        self.inv_quad(x).sqrt()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::invalid(format!("similarity scale must be positive, got {c}")));
        }
        Self::new(&self.entries * c)
    }

    /// Reorders studies: entry `(a, b)` of the result is entry
    /// `(perm[a], perm[b])` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let k = self.dim();
        if perm.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: perm.len(),
                context: "permutation length",
            });
        }
        Self::new(DMatrix::from_fn(k, k, |a, b| self.entries[(perm[a], perm[b])]))
    }
}

impl Serialize for SimilarityMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let k = self.dim();
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| self.entries[(i, j)]).collect())
            .collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SimilarityMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(serde::de::Error::custom("similarity matrix must be square"));
        }
        let m = DMatrix::from_fn(k, k, |i, j| rows[i][j]);
        SimilarityMatrix::new(m).map_err(serde::de::Error::custom)
    }
}

/// Exponent applied to the Sigma-norm in the fusion penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum FusionExponent {
    /// Sum of Mahalanobis distances; produces exact column fusions.
    One,
    /// Quadratic; the hierarchical-normal case.
    Two,
}

impl FusionExponent {
    pub fn as_f64(self) -> f64 {
        match self {
            FusionExponent::One => 1.0,
            FusionExponent::Two => 2.0,
        }
    }
}

impl TryFrom<u8> for FusionExponent {
    type Error = String;

    fn try_from(a: u8) -> std::result::Result<Self, String> {
        match a {
            1 => Ok(FusionExponent::One),
            2 => Ok(FusionExponent::Two),
            other => Err(format!("fusion exponent must be 1 or 2, got {other}")),
        }
    }
}

impl From<FusionExponent> for u8 {
    fn from(a: FusionExponent) -> u8 {
        match a {
            FusionExponent::One => 1,
            FusionExponent::Two => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyConfig {
    pub lambda0: f64,
    pub lambda1: f64,
    pub exponent: FusionExponent,
    pub sigma: SimilarityMatrix,
}

impl PenaltyConfig {
    pub fn new(lambda0: f64, lambda1: f64, exponent: FusionExponent, sigma: SimilarityMatrix) -> Result<Self> {
        if !(lambda0 >= 0.0 && lambda0.is_finite()) || !(lambda1 >= 0.0 && lambda1.is_finite()) {
            return Err(Error::invalid(format!(
                "penalty weights must be finite and non-negative (lambda0={lambda0}, lambda1={lambda1})"
            )));
        }
        Ok(Self {
            lambda0,
            lambda1,
            exponent,
            sigma,
        })
    }
}

/// The `(K+1) x p` parameter block. Row 0 is the shared vector, row `k` the
/// coefficients of study `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientBundle {
    coefs: DMatrix<f64>,
}

impl CoefficientBundle {
    pub fn from_matrix(coefs: DMatrix<f64>) -> Self {
        Self { coefs }
    }

    pub fn zeros(k: usize, p: usize) -> Self {
        Self::from_matrix(DMatrix::zeros(k + 1, p))
    }

    /// A bundle in which every study carries the same coefficients.
    pub fn shared(beta0: &DVector<f64>, k: usize) -> Self {
        Self::from_matrix(DMatrix::from_fn(k + 1, beta0.len(), |_, j| beta0[j]))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.coefs
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.coefs
    }

    /// Number of studies `K`.
    pub fn k(&self) -> usize {
        self.coefs.nrows().saturating_sub(1)
    }

    pub fn p(&self) -> usize {
        self.coefs.ncols()
    }

    pub fn beta0(&self) -> DVector<f64> {
        self.row(0)
    }

    /// Coefficients of study `k` (1-based; 0 is the shared vector).
    pub fn row(&self, k: usize) -> DVector<f64> {
        self.coefs.row(k).transpose()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.coefs
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || rows.iter().any(|r| r.len() != p) {
            return Err(Error::invalid("coefficient rows must be non-empty and of equal length"));
        }
        Ok(Self::from_matrix(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j])))
    }
}

impl Serialize for CoefficientBundle {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for CoefficientBundle {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        CoefficientBundle::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

pub fn elastic_net_value(beta0: &DVector<f64>, cfg: &PenaltyConfig) -> f64 {
    cfg.lambda0 * beta0.lp_norm(1) + cfg.lambda1 * beta0.norm_squared()
}

/// `sum_j || beta_{1:K, j} - beta_{0, j} 1 ||_Sigma ^ a`
pub fn fusion_penalty_value(beta: &CoefficientBundle, cfg: &PenaltyConfig) -> Result<f64> {
    let k = cfg.sigma.dim();
    if beta.k() != k {
        return Err(Error::DimensionMismatch {
            expected: k + 1,
            found: beta.k() + 1,
            context: "coefficient bundle rows",
        });
    }
    let m = beta.matrix();
    let p = m.ncols();
    let deviations = DMatrix::from_fn(k, p, |s, j| m[(s + 1, j)] - m[(0, j)]);
    let l = cfg.sigma.factor.l_dirty();
    let whitened = l
        .solve_lower_triangular(&deviations)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let total = whitened
        .column_iter()
        .map(|c| {
            let q = c.norm_squared();
            match cfg.exponent {
                FusionExponent::One => q.sqrt(),
                FusionExponent::Two => q,
            }
        })
        .sum();
    Ok(total)
}

/// The regularized log partial likelihood
/// `sum_k l(beta_k, D_k) - R0(beta_0) - R1(beta)`.
pub fn full_objective(beta: &CoefficientBundle, studies: &[CoxStudy], cfg: &PenaltyConfig) -> Result<f64> {
    if studies.len() != beta.k() {
        return Err(Error::DimensionMismatch {
            expected: beta.k(),
            found: studies.len(),
            context: "number of studies",
        });
    }
    let mut total = 0.0;
    for (k, s) in studies.iter().enumerate() {
        if s.p() != beta.p() {
            return Err(Error::DimensionMismatch {
                expected: beta.p(),
                found: s.p(),
                context: "study covariate count",
            });
        }
        total += s.log_lik(&beta.row(k + 1));
    }
    Ok(total - elastic_net_value(&beta.beta0(), cfg) - fusion_penalty_value(beta, cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg(l0: f64, l1: f64, a: FusionExponent, sigma: DMatrix<f64>) -> PenaltyConfig {
        PenaltyConfig::new(l0, l1, a, SimilarityMatrix::new(sigma).unwrap()).unwrap()
    }

    #[test]
    fn elastic_net_special_cases() {
        let c = cfg(1.0, 0.5, FusionExponent::Two, DMatrix::identity(1, 1));
        assert_eq!(elastic_net_value(&DVector::zeros(3), &c), 0.0);
        let b = DVector::from_vec(vec![1.0, -2.0]);
        assert_relative_eq!(elastic_net_value(&b, &c), 5.5);
        let lasso = cfg(2.0, 0.0, FusionExponent::Two, DMatrix::identity(1, 1));
        assert_relative_eq!(elastic_net_value(&b, &lasso), 2.0 * 3.0);
        let ridge = cfg(0.0, 3.0, FusionExponent::Two, DMatrix::identity(1, 1));
        assert_relative_eq!(elastic_net_value(&b, &ridge), 3.0 * 5.0);
    }

    #[test]
    fn fusion_zero_at_consensus() {
        let c = cfg(0.0, 0.0, FusionExponent::One, DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]));
        let b = CoefficientBundle::shared(&DVector::from_vec(vec![0.4, -1.0, 2.0]), 2);
        assert_eq!(fusion_penalty_value(&b, &c).unwrap(), 0.0);
    }

    #[test]
    fn fusion_euclidean_case() {
        let c = cfg(0.0, 0.0, FusionExponent::Two, DMatrix::identity(2, 2));
        // one covariate, shared 0, studies (1, -1)
        let b = CoefficientBundle::from_matrix(DMatrix::from_column_slice(3, 1, &[0.0, 1.0, -1.0]));
        assert_relative_eq!(fusion_penalty_value(&b, &c).unwrap(), 2.0);
    }

    #[test]
    fn fusion_matches_dense_solve() {
        let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.5, -0.3, 0.1, -0.3, 1.0]);
        let c = cfg(0.0, 0.0, FusionExponent::One, sigma.clone());
        let m = DMatrix::from_row_slice(4, 2, &[0.3, -0.2, 1.0, 0.5, -0.4, 0.1, 0.8, -0.9]);
        let b = CoefficientBundle::from_matrix(m.clone());
        let inv = sigma.try_inverse().unwrap();
        let mut expected = 0.0;
        for j in 0..2 {
            let v = DVector::from_fn(3, |s, _| m[(s + 1, j)] - m[(0, j)]);
            expected += (v.transpose() * &inv * &v)[(0, 0)].sqrt();
        }
        assert_relative_eq!(fusion_penalty_value(&b, &c).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn scaling_sigma_scales_penalty() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.8]);
        let m = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.7, -0.5, -0.3, 0.9]);
        let b = CoefficientBundle::from_matrix(m);
        for a in [FusionExponent::One, FusionExponent::Two] {
            let base = fusion_penalty_value(&b, &cfg(0.0, 0.0, a, sigma.clone())).unwrap();
            let scaled = fusion_penalty_value(&b, &cfg(0.0, 0.0, a, &sigma * 3.0)).unwrap();
            assert_relative_eq!(scaled, base * 3f64.powf(-a.as_f64() / 2.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(SimilarityMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0])).is_err());
        assert!(SimilarityMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).is_err());
        assert!(FusionExponent::try_from(3).is_err());
        assert!(PenaltyConfig::new(-1.0, 0.0, FusionExponent::Two, SimilarityMatrix::identity(1)).is_err());
    }

    #[test]
    fn similarity_json_round_trip() {
        let s = SimilarityMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.25, 0.25, 0.5])).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, "[[1.0,0.25],[0.25,0.5]]");
        let back: SimilarityMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
