//! Monte-Carlo cross-validation with study-weighted C-statistic scoring.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{fit_prepared, ConvergenceReport, SolverOptions};
use crate::error::{Error, Result};
use crate::penalties::{CoefficientBundle, FusionExponent, PenaltyConfig, SimilarityMatrix};
use crate::simulate::substream;
use crate::survival::{study_concordance, CoxStudy, StudyData};

const STREAM_SPLIT: u64 = 101;
const STREAM_FOLD: u64 = 102;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda0: f64,
    pub lambda1: f64,
    /// Multiplier applied to the similarity matrix.
    #[serde(default = "one")]
    pub sigma_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl GridPoint {
    pub fn new(lambda0: f64, lambda1: f64) -> Self {
        Self {
            lambda0,
            lambda1,
            sigma_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum StudyWeights {
    /// `w_k = 1 / sqrt(m_k)` with `m_k` the number of distinct event times in
    /// study `k`'s validation half.
    InverseSqrtEvents,
    Equal,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvPlan {
    pub m: usize,
    pub train_fraction: f64,
    pub grid: Vec<GridPoint>,
    pub weights: StudyWeights,
    pub seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self {
            m: 20,
            train_fraction: 0.8,
            grid: default_grid(),
            weights: StudyWeights::InverseSqrtEvents,
            seed: 1,
        }
    }
}

impl CvPlan {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::invalid("the number of splits must be at least 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.grid.is_empty() {
            return Err(Error::invalid("the grid is empty"));
        }
        for g in &self.grid {
            if !(g.lambda0 >= 0.0 && g.lambda1 >= 0.0 && g.sigma_scale > 0.0)
                || !(g.lambda0.is_finite() && g.lambda1.is_finite() && g.sigma_scale.is_finite())
            {
                return Err(Error::invalid(format!("invalid grid point {g:?}")));
            }
        }
        if let StudyWeights::Fixed(w) = &self.weights {
            if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::invalid("study weights must be non-negative"));
            }
        }
        Ok(())
    }
}

/// `n` log-spaced values from `from` to `to` inclusive.
pub fn logspace(from: f64, to: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![from];
    }
    let (a, b) = (from.ln(), to.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// `lambda0 in {0} U logspace(1e-3, 10, 7)`, `lambda1 in logspace(1e-3, 100, 8)`,
/// ordered from the most to the least penalized so warm starts move
/// gradually.
pub fn default_grid() -> Vec<GridPoint> {
    let mut l0 = logspace(1e1, 1e-3, 7);
    l0.push(0.0);
    let l1 = logspace(1e2, 1e-3, 8);
    grid_product(&l0, &l1)
}

/// The ridge-type preset: `lambda0 = 0`, `lambda1` from the default values.
pub fn ridge_grid() -> Vec<GridPoint> {
    grid_product(&[0.0], &logspace(1e2, 1e-3, 8))
}

pub fn grid_product(lambda0: &[f64], lambda1: &[f64]) -> Vec<GridPoint> {
    lambda0
        .iter()
        .flat_map(|&a| lambda1.iter().map(move |&b| GridPoint::new(a, b)))
        .collect()
}

/// Random stratified split of one study: events and censored subjects are
/// divided separately so both halves contain events.
fn split_indices(study: &StudyData, fraction: f64, seed: u64, split: usize, k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = study.n();
    let mut events: Vec<usize> = (0..n).filter(|&i| study.status()[i]).collect();
    let mut censored: Vec<usize> = (0..n).filter(|&i| !study.status()[i]).collect();
    if events.len() < 2 {
        return Err(Error::invalid(format!(
            "study `{}` needs at least two events to split, has {}",
            study.study_id,
            events.len()
        )));
    }
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let e_train = ((fraction * events.len() as f64).round() as usize).clamp(1, events.len() - 1);
    let c_train = n_train.saturating_sub(e_train).min(censored.len());
    let e_train = (n_train - c_train).clamp(1, events.len() - 1);

    let mut rng = substream(seed, STREAM_SPLIT, split as u64, k as u64);
    events.shuffle(&mut rng);
    censored.shuffle(&mut rng);
    let mut train: Vec<usize> = events[..e_train].iter().chain(&censored[..c_train]).copied().collect();
    let mut valid: Vec<usize> = events[e_train..].iter().chain(&censored[c_train..]).copied().collect();
    train.sort_unstable();
    valid.sort_unstable();
    Ok((train, valid))
}

/// Training and validation collections for split `split_index`.
pub fn mc_split(studies: &[StudyData], plan: &CvPlan, split_index: usize) -> Result<(Vec<StudyData>, Vec<StudyData>)> {
    let mut train = Vec::with_capacity(studies.len());
    let mut valid = Vec::with_capacity(studies.len());
    for (k, s) in studies.iter().enumerate() {
        let (t, v) = split_indices(s, plan.train_fraction, plan.seed, split_index, k)?;
        train.push(s.subset(&t)?);
        valid.push(s.subset(&v)?);
    }
    Ok((train, valid))
}

/// Stratified fold labels in `0..folds`.
pub fn kfold_labels(study: &StudyData, folds: usize, seed: u64, k: usize) -> Vec<usize> {
    let mut rng = substream(seed, STREAM_FOLD, k as u64, 0);
    let mut labels = vec![0; study.n()];
    let mut events: Vec<usize> = (0..study.n()).filter(|&i| study.status()[i]).collect();
    let mut censored: Vec<usize> = (0..study.n()).filter(|&i| !study.status()[i]).collect();
    events.shuffle(&mut rng);
    censored.shuffle(&mut rng);
    for (pos, &i) in events.iter().chain(&censored).enumerate() {
        labels[i] = pos % folds;
    }
    labels
}

/// Weights `1 / sqrt(m_k)` from distinct event-time counts.
pub fn inverse_sqrt_weights(event_counts: &[usize]) -> Vec<f64> {
    event_counts
        .iter()
        .map(|&m| if m == 0 { 0.0 } else { 1.0 / (m as f64).sqrt() })
        .collect()
}

fn split_weights(rule: &StudyWeights, valid: &[StudyData]) -> Result<Vec<f64>> {
    match rule {
        StudyWeights::InverseSqrtEvents => Ok(inverse_sqrt_weights(
            &valid.iter().map(StudyData::n_unique_event_times).collect::<Vec<_>>(),
        )),
        StudyWeights::Equal => Ok(vec![1.0; valid.len()]),
        StudyWeights::Fixed(w) if w.len() == valid.len() => Ok(w.clone()),
        StudyWeights::Fixed(w) => Err(Error::DimensionMismatch {
            expected: valid.len(),
            found: w.len(),
            context: "study weights",
        }),
    }
}

/// `sum_k w_k C(beta_k, D_k)` using each study's own coefficients (bundle
/// rows `1..=K`).
pub fn weighted_cstat(bundle: &CoefficientBundle, validation: &[StudyData], weights: &[f64]) -> Result<f64> {
    if bundle.k() != validation.len() || weights.len() != validation.len() {
        return Err(Error::DimensionMismatch {
            expected: validation.len(),
            found: weights.len().min(bundle.k()),
            context: "studies in weighted C-statistic",
        });
    }
    let mut total = 0.0;
    for (k, (study, w)) in validation.iter().zip(weights).enumerate() {
        total += w * study_concordance(study, &bundle.row(k + 1))?;
    }
    Ok(total)
}

/// A model that can be refitted along a grid and scored per study.
pub trait CvModel: Sync {
    type Fit: Send + Sync;

    fn n_points(&self) -> usize;

    /// Fit at grid point `point`, optionally warm-started from the previous
    /// point's fit on the same training data.
    fn fit(&self, train: &[CoxStudy], point: usize, warm: Option<&Self::Fit>) -> Result<Self::Fit>;

    /// Coefficients scoring study `k` (0-based).
    fn coefficients(&self, fit: &Self::Fit, k: usize) -> DVector<f64>;
}

/// Per-study validation C for every grid point and split, plus the weights
/// used for each split. `None` marks a failed fit or an undefined statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvScores {
    /// `values[point][split][study]`
    pub values: Vec<Vec<Vec<Option<f64>>>>,
    /// `weights[split][study]`
    pub weights: Vec<Vec<f64>>,
    /// Grid points at which at least one fit failed.
    pub failed: Vec<bool>,
}

impl CvScores {
    /// Weighted C of one split, weights renormalized over the studies with a
    /// defined statistic so the value stays in [0, 1].
    pub fn split_score(&self, point: usize, split: usize) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for (c, w) in self.values[point][split].iter().zip(&self.weights[split]) {
            if let Some(c) = c {
                num += w * c;
                den += w;
            }
        }
        (den > 0.0).then(|| num / den)
    }

    /// Mean of [`CvScores::split_score`] over splits; `None` for failed points.
    pub fn mean_score(&self, point: usize) -> Option<f64> {
        if self.failed[point] {
            return None;
        }
        let v: Vec<f64> = (0..self.weights.len()).filter_map(|s| self.split_score(point, s)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean validation C of a single study across splits.
    pub fn study_mean(&self, point: usize, k: usize) -> Option<f64> {
        if self.failed[point] {
            return None;
        }
        let v: Vec<f64> = self.values[point].iter().filter_map(|s| s[k]).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Runs every split (in parallel) and every grid point (in order, with warm
/// starts) of `model` on `studies`.
pub fn cross_validate<M: CvModel>(studies: &[StudyData], plan: &CvPlan, model: &M) -> Result<CvScores> {
    plan.validate()?;
    let points = model.n_points();
    if points == 0 {
        return Err(Error::invalid("the grid is empty"));
    }
    let per_split = (0..plan.m)
        .into_par_iter()
        .map(|split| -> Result<(Vec<Vec<Option<f64>>>, Vec<f64>, Vec<bool>)> {
            let (train, valid) = mc_split(studies, plan, split)?;
            let weights = split_weights(&plan.weights, &valid)?;
            let prepared = train.iter().map(CoxStudy::new).collect::<Result<Vec<_>>>()?;
            let mut warm: Option<M::Fit> = None;
            let mut scores = Vec::with_capacity(points);
            let mut failed = Vec::with_capacity(points);
            for point in 0..points {
                match model.fit(&prepared, point, warm.as_ref()) {
                    Ok(fit) => {
                        let row = valid
                            .iter()
                            .enumerate()
                            .map(|(k, v)| study_concordance(v, &model.coefficients(&fit, k)).ok())
                            .collect();
                        scores.push(row);
                        failed.push(false);
                        warm = Some(fit);
                    }
                    Err(e) => {
                        log::debug!("split {split}, grid point {point}: {e}");
                        scores.push(vec![None; valid.len()]);
                        failed.push(true);
                    }
                }
            }
            Ok((scores, weights, failed))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut values = vec![Vec::with_capacity(plan.m); points];
    let mut weights = Vec::with_capacity(plan.m);
    let mut failed = vec![false; points];
    for (scores, w, f) in per_split {
        for (point, row) in scores.into_iter().enumerate() {
            values[point].push(row);
            failed[point] |= f[point];
        }
        weights.push(w);
    }
    Ok(CvScores { values, weights, failed })
}

/// Index of the best score; among ties the first in `order`.
pub fn select_best(scores: &[Option<f64>], order: impl Fn(usize, usize) -> std::cmp::Ordering) -> Option<usize> {
    let best = scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..scores.len())
        .filter(|&i| scores[i] == Some(best))
        .min_by(|&a, &b| order(a, b))
}

/// The hierarchical model over a grid of penalty weights.
pub struct HierarchicalModel<'a> {
    pub grid: &'a [GridPoint],
    pub exponent: FusionExponent,
    pub sigma: &'a SimilarityMatrix,
    pub solver: SolverOptions,
}

impl HierarchicalModel<'_> {
    pub fn config(&self, point: usize) -> Result<PenaltyConfig> {
        let g = self.grid[point];
        let sigma = if g.sigma_scale == 1.0 {
            self.sigma.clone()
        } else {
            self.sigma.scaled(g.sigma_scale)?
        };
        PenaltyConfig::new(g.lambda0, g.lambda1, self.exponent, sigma)
    }
}

impl CvModel for HierarchicalModel<'_> {
    type Fit = CoefficientBundle;

    fn n_points(&self) -> usize {
        self.grid.len()
    }

    fn fit(&self, train: &[CoxStudy], point: usize, warm: Option<&CoefficientBundle>) -> Result<CoefficientBundle> {
        let (bundle, report) = fit_prepared(train, &self.config(point)?, &self.solver, warm)?;
        if !report.converged {
            log::debug!(
                "grid point {point} reached the iteration cap (residual {:.2e})",
                report.final_primal_residual
            );
        }
        Ok(bundle)
    }

    fn coefficients(&self, fit: &CoefficientBundle, k: usize) -> DVector<f64> {
        fit.row(k + 1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvResult {
    pub grid: Vec<GridPoint>,
    /// Mean weighted C per grid point; `None` where a fit failed.
    pub mean_scores: Vec<Option<f64>>,
    pub scores: CvScores,
    pub selected_index: usize,
    pub selected: GridPoint,
    pub bundle: CoefficientBundle,
    pub report: ConvergenceReport,
}

/// Cross-validates the hierarchical model over `plan.grid`, selects the grid
/// point with the highest mean weighted C (ties: smallest `lambda0`, then
/// smallest `lambda1`) and refits on all data there. Objective traces are
/// recorded for the final fit only.
pub fn grid_search(
    studies: &[StudyData],
    sigma: &SimilarityMatrix,
    exponent: FusionExponent,
    plan: &CvPlan,
    solver: &SolverOptions,
) -> Result<CvResult> {
    let model = HierarchicalModel {
        grid: &plan.grid,
        exponent,
        sigma,
        solver: SolverOptions {
            track_objective: false,
            ..*solver
        },
    };
    let scores = cross_validate(studies, plan, &model)?;
    let mean_scores: Vec<Option<f64>> = (0..plan.grid.len()).map(|i| scores.mean_score(i)).collect();
    let grid = &plan.grid;
    let selected_index = select_best(&mean_scores, |a, b| {
        (grid[a].lambda0, grid[a].lambda1, grid[a].sigma_scale)
            .partial_cmp(&(grid[b].lambda0, grid[b].lambda1, grid[b].sigma_scale))
            .unwrap_or(std::cmp::Ordering::Equal)
    })
    .ok_or_else(|| Error::Numerical("every grid point failed during cross-validation".into()))?;

    let prepared = studies.iter().map(CoxStudy::new).collect::<Result<Vec<_>>>()?;
    let (bundle, report) = fit_prepared(&prepared, &model.config(selected_index)?, solver, None)?;
    Ok(CvResult {
        grid: plan.grid.clone(),
        mean_scores,
        scores,
        selected_index,
        selected: plan.grid[selected_index],
        bundle,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn study(n: usize, events: usize) -> StudyData {
        StudyData::new(
            "s",
            (1..=n).map(|i| i as f64).collect(),
            (0..n).map(|i| i < events).collect(),
            DMatrix::from_fn(n, 1, |i, _| (i as f64).sin()),
        )
        .unwrap()
    }

    #[test]
    fn split_arithmetic() {
        let s = study(10, 5);
        let plan = CvPlan::default();
        let (t, v) = mc_split(std::slice::from_ref(&s), &plan, 0).unwrap();
        assert_eq!((t[0].n(), v[0].n()), (8, 2));
        let (t2, v2) = mc_split(std::slice::from_ref(&s), &plan, 0).unwrap();
        assert_eq!((t, v), (t2, v2));
    }

    #[test]
    fn heavily_censored_splits_keep_events() {
        let s = study(40, 12);
        for split in 0..100 {
            let plan = CvPlan { seed: 9, ..Default::default() };
            let (t, v) = mc_split(std::slice::from_ref(&s), &plan, split).unwrap();
            assert!(t[0].n_events() >= 1 && v[0].n_events() >= 1);
        }
        assert!(mc_split(&[study(10, 1)], &CvPlan::default(), 0).is_err());
    }

    #[test]
    fn weights_from_event_counts() {
        let w = inverse_sqrt_weights(&[4, 9, 16]);
        assert_eq!(w, vec![0.5, 1.0 / 3.0, 0.25]);
    }

    #[test]
    fn split_score_renormalizes_over_defined_studies() {
        let s = CvScores {
            values: vec![vec![vec![Some(0.6), None, Some(0.9)]]],
            weights: vec![vec![1.0, 5.0, 2.0]],
            failed: vec![false],
        };
        assert!((s.split_score(0, 0).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn ties_prefer_smaller_penalties() {
        let grid = [GridPoint::new(1.0, 0.1), GridPoint::new(0.0, 2.0), GridPoint::new(0.0, 1.0)];
        let scores = [Some(0.7), Some(0.7), Some(0.7)];
        let i = select_best(&scores, |a, b| {
            (grid[a].lambda0, grid[a].lambda1).partial_cmp(&(grid[b].lambda0, grid[b].lambda1)).unwrap()
        });
        assert_eq!(i, Some(2));
        assert_eq!(select_best(&[None, Some(0.1)], |a, b| a.cmp(&b)), Some(1));
    }

    #[test]
    fn default_grid_shape() {
        let g = default_grid();
        assert_eq!(g.len(), 64);
        assert!(g.iter().any(|p| p.lambda0 == 0.0));
        let l = logspace(1e-3, 1e2, 8);
        assert!((l[0] - 1e-3).abs() < 1e-15 && (l[7] - 1e2).abs() < 1e-10);
    }
}
