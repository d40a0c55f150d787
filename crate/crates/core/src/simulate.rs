//! Simulated multi-study collections: block-structured similarity matrices,
//! coefficients drawn around a sparse shared vector, AR(1)-correlated
//! covariates and proportional-hazards outcomes with censoring.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::penalties::SimilarityMatrix;
use crate::survival::StudyData;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Baseline {
    /// `S(t) = exp(-(t / scale)^shape)` with the scale set by the median.
    Weibull { shape: f64, median: f64 },
}

impl Baseline {
    fn validate(&self) -> Result<()> {
        match *self {
            Baseline::Weibull { shape, median } if shape > 0.0 && median > 0.0 => Ok(()),
            _ => Err(Error::invalid("Weibull shape and median must be positive")),
        }
    }

    /// Event time with survival `S(t)^{exp(eta)}` at uniform draw `u`.
    fn invert(&self, eta: f64, u: f64) -> f64 {
        match *self {
            Baseline::Weibull { shape, median } => {
                let scale = median / std::f64::consts::LN_2.powf(1.0 / shape);
                let cumulative = -u.ln() * (-eta).exp();
                scale * cumulative.powf(1.0 / shape)
            }
        }
    }

    pub fn survival(&self, t: f64) -> f64 {
        match *self {
            Baseline::Weibull { shape, median } => {
                let scale = median / std::f64::consts::LN_2.powf(1.0 / shape);
                (-(t / scale).powf(shape)).exp()
            }
        }
    }
}

impl Default for Baseline {
    fn default() -> Self {
        Baseline::Weibull {
            shape: 1.2,
            median: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Censoring {
    None,
    Exponential { rate: f64 },
    /// Exponential censoring whose rate is solved per study so that the
    /// expected censored fraction equals `fraction`.
    CalibratedExponential { fraction: f64 },
}

impl Default for Censoring {
    fn default() -> Self {
        Censoring::CalibratedExponential { fraction: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockValues {
    pub diagonal: f64,
    pub within: f64,
    pub between: f64,
}

impl Default for BlockValues {
    fn default() -> Self {
        Self {
            diagonal: 0.05,
            within: 0.04,
            between: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimScenario {
    pub name: String,
    pub k_total: usize,
    pub k_fit: usize,
    /// Explicit 0-based indices of the studies used for fitting.
    pub fit_studies: Option<Vec<usize>>,
    pub p: usize,
    /// Probability that a shared coefficient is exactly zero.
    pub p0: f64,
    /// 1, 2 or 3 clusters of studies.
    pub sigma_scenario: u8,
    pub cluster_sizes: Option<Vec<usize>>,
    pub block_values: BlockValues,
    pub n_range: (usize, usize),
    pub holdout_per_study: usize,
    pub coef_variance: f64,
    pub ar_decay: f64,
    pub baseline: Baseline,
    pub censoring: Censoring,
    pub seed: u64,
}

impl Default for SimScenario {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            k_total: 18,
            k_fit: 5,
            fit_studies: None,
            p: 500,
            p0: 0.0,
            sigma_scenario: 1,
            cluster_sizes: None,
            block_values: BlockValues::default(),
            n_range: (100, 500),
            holdout_per_study: 1000,
            coef_variance: 0.1,
            ar_decay: 0.3,
            baseline: Baseline::default(),
            censoring: Censoring::default(),
            seed: 1,
        }
    }
}

/// Order in which the 18 studies of the reference design enter the fitted
/// set; any prefix of length 2, 5, 10 or 15 gives the nested fitted
/// collections (the first 5 span clusters one and two only).
const REFERENCE_FIT_ORDER: [usize; 18] = [0, 9, 1, 10, 11, 2, 3, 12, 13, 14, 4, 5, 6, 7, 8, 15, 16, 17];

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        if self.k_total == 0 || self.k_fit == 0 || self.k_fit > self.k_total {
            return Err(Error::invalid(format!(
                "need 1 <= k_fit <= k_total, got k_fit={} k_total={}",
                self.k_fit, self.k_total
            )));
        }
        if self.p == 0 {
            return Err(Error::invalid("p must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p0) {
            return Err(Error::invalid(format!("p0 must lie in [0, 1], got {}", self.p0)));
        }
        if !(self.ar_decay > -1.0 && self.ar_decay < 1.0) {
            return Err(Error::invalid(format!("ar_decay must lie in (-1, 1), got {}", self.ar_decay)));
        }
        if self.n_range.0 < 2 || self.n_range.0 > self.n_range.1 {
            return Err(Error::invalid(format!("invalid n_range {:?}", self.n_range)));
        }
        if !(self.coef_variance >= 0.0) {
            return Err(Error::invalid("coef_variance must be non-negative"));
        }
        self.baseline.validate()?;
        if let Some(f) = &self.fit_studies {
            if f.len() != self.k_fit || f.iter().any(|&i| i >= self.k_total) {
                return Err(Error::invalid("fit_studies must list k_fit indices below k_total"));
            }
        }
        Ok(())
    }

    pub fn cluster_sizes(&self) -> Result<Vec<usize>> {
        match &self.cluster_sizes {
            Some(c) if c.iter().sum::<usize>() == self.k_total => Ok(c.clone()),
            Some(_) => Err(Error::invalid("cluster sizes must sum to k_total")),
            None => default_cluster_sizes(self.sigma_scenario, self.k_total),
        }
    }

    pub fn sigma_true(&self) -> Result<SimilarityMatrix> {
        block_sigma_with(&self.cluster_sizes()?, self.block_values)
    }

    /// 0-based indices of the studies used for fitting, in fitting order.
    pub fn fit_indices(&self) -> Vec<usize> {
        if let Some(f) = &self.fit_studies {
            return f.clone();
        }
        if self.k_total == REFERENCE_FIT_ORDER.len() {
            REFERENCE_FIT_ORDER[..self.k_fit].to_vec()
        } else {
            (0..self.k_fit).collect()
        }
    }

    pub fn holdout_indices(&self) -> Vec<usize> {
        let fit = self.fit_indices();
        (0..self.k_total).filter(|i| !fit.contains(i)).collect()
    }
}

fn default_cluster_sizes(scenario: u8, k_total: usize) -> Result<Vec<usize>> {
    let clusters = match scenario {
        1 => 3,
        2 => 2,
        3 => 1,
        other => return Err(Error::invalid(format!("similarity scenario must be 1, 2 or 3, got {other}"))),
    };
    if k_total < clusters {
        return Err(Error::invalid(format!("{k_total} studies cannot form {clusters} clusters")));
    }
    Ok((0..clusters)
        .map(|c| k_total / clusters + usize::from(c < k_total % clusters))
        .collect())
}

/// Block-diagonal similarity matrix for scenario 1 (three clusters), 2 (two)
/// or 3 (one) with the default entry values.
pub fn block_sigma(scenario: u8, k_total: usize) -> Result<SimilarityMatrix> {
    block_sigma_with(&default_cluster_sizes(scenario, k_total)?, BlockValues::default())
}

pub fn block_sigma_with(cluster_sizes: &[usize], values: BlockValues) -> Result<SimilarityMatrix> {
    let labels: Vec<usize> = cluster_sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &size)| std::iter::repeat_n(c, size))
        .collect();
    let k = labels.len();
    let m = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            values.diagonal
        } else if labels[i] == labels[j] {
            values.within
        } else {
            values.between
        }
    });
    SimilarityMatrix::new(m)
}

/// Cluster label of each study under the scenario's block structure.
pub fn cluster_labels(cluster_sizes: &[usize]) -> Vec<usize> {
    cluster_sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &size)| std::iter::repeat_n(c, size))
        .collect()
}

/// Independent, reproducible random stream for a `(purpose, a, b)` triple.
pub fn substream(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h ^= a.wrapping_add(0xBF58_476D_1CE4_E5B9).rotate_left(21);
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= b.wrapping_add(0x2545_F491_4F6C_DD1D).rotate_left(43);
    rng.set_stream(h);
    rng
}

/// `(K_total + 1) x p`: row 0 the shared vector (zero with probability `p0`,
/// otherwise normal with variance `coef_variance`), rows `1..` the shared
/// vector plus per-covariate deviations drawn jointly from `N(0, Sigma)`.
pub fn gen_coefficients<R: Rng>(
    k_total: usize,
    p: usize,
    p0: f64,
    coef_variance: f64,
    sigma: &SimilarityMatrix,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if sigma.dim() != k_total {
        return Err(Error::DimensionMismatch {
            expected: k_total,
            found: sigma.dim(),
            context: "similarity matrix dimension",
        });
    }
    let sd = coef_variance.sqrt();
    let l = Cholesky::new(sigma.entries().clone())
        .ok_or_else(|| Error::Numerical("similarity matrix Cholesky failed".into()))?
        .unpack();
    let mut out = DMatrix::zeros(k_total + 1, p);
    for j in 0..p {
        let zero = rng.random::<f64>() < p0;
        let normal: f64 = rng.sample(StandardNormal);
        out[(0, j)] = if zero { 0.0 } else { sd * normal };
        let e = DVector::from_fn(k_total, |_, _| rng.sample::<f64, _>(StandardNormal));
        let dev = &l * e;
        for k in 0..k_total {
            out[(k + 1, j)] = out[(0, j)] + dev[k];
        }
    }
    Ok(out)
}

/// Rows drawn from `N(0, V)` with `V_{j,j'} = decay^{|j - j'|}`, generated by
/// the AR(1) recursion along the covariate index.
pub fn gen_covariates<R: Rng>(n: usize, p: usize, ar_decay: f64, rng: &mut R) -> DMatrix<f64> {
    let innovation = (1.0 - ar_decay * ar_decay).sqrt();
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let mut prev: f64 = rng.sample(StandardNormal);
        x[(i, 0)] = prev;
        for j in 1..p {
            let e: f64 = rng.sample(StandardNormal);
            prev = ar_decay * prev + innovation * e;
            x[(i, j)] = prev;
        }
    }
    x
}

/// Proportional-hazards outcomes: event times by inverse transform of
/// `S(t)^{exp(x'beta)}`, observed time `min(event, censoring)`.
pub fn gen_survival<R: Rng>(
    covariates: &DMatrix<f64>,
    beta: &DVector<f64>,
    baseline: &Baseline,
    censoring: &Censoring,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if covariates.ncols() != beta.len() {
        return Err(Error::DimensionMismatch {
            expected: covariates.ncols(),
            found: beta.len(),
            context: "coefficient length",
        });
    }
    let eta = covariates * beta;
    let n = covariates.nrows();
    let events: Vec<f64> = (0..n)
        .map(|i| {
            let u: f64 = 1.0 - rng.random::<f64>();
            baseline.invert(eta[i], u).max(f64::MIN_POSITIVE)
        })
        .collect();
    let rate = match *censoring {
        Censoring::None => None,
        Censoring::Exponential { rate } => Some(rate),
        Censoring::CalibratedExponential { fraction } => Some(calibrate_censoring_rate(&events, fraction)?),
    };
    let mut times = Vec::with_capacity(n);
    let mut status = Vec::with_capacity(n);
    for &t in &events {
        let c = match rate {
            Some(r) if r > 0.0 => {
                let u: f64 = 1.0 - rng.random::<f64>();
                (-u.ln() / r).max(f64::MIN_POSITIVE)
            }
            _ => f64::INFINITY,
        };
        if c < t {
            times.push(c);
            status.push(false);
        } else {
            times.push(t);
            status.push(true);
        }
    }
    Ok((times, status))
}

/// Rate `r` with `mean_i (1 - exp(-r T_i)) = fraction`, the expected censored
/// fraction under exponential censoring independent of the event times.
pub fn calibrate_censoring_rate(event_times: &[f64], fraction: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("censoring fraction must lie in [0, 1), got {fraction}")));
    }
    if fraction == 0.0 {
        return Ok(0.0);
    }
    let expected = |r: f64| event_times.iter().map(|t| -(-r * t).exp_m1()).sum::<f64>() / event_times.len() as f64;
    let (mut lo, mut hi) = (-60.0f64, 60.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected(mid.exp()) < fraction {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// One simulated replicate of a scenario.
#[derive(Debug, Clone)]
pub struct SimCollection {
    pub replicate: usize,
    pub fit_indices: Vec<usize>,
    pub holdout_indices: Vec<usize>,
    /// Training data of every study (indexed 0..k_total).
    pub studies: Vec<StudyData>,
    /// Independent evaluation sample of each study.
    pub eval_sets: Vec<StudyData>,
    /// `(k_total + 1) x p` true coefficients, row 0 shared.
    pub true_coefficients: DMatrix<f64>,
    pub sample_sizes: Vec<usize>,
}

impl SimCollection {
    pub fn fit_studies(&self) -> Vec<StudyData> {
        self.fit_indices.iter().map(|&i| self.studies[i].clone()).collect()
    }

    pub fn fit_eval_sets(&self) -> Vec<StudyData> {
        self.fit_indices.iter().map(|&i| self.eval_sets[i].clone()).collect()
    }

    pub fn holdout_studies(&self) -> Vec<StudyData> {
        self.holdout_indices.iter().map(|&i| self.studies[i].clone()).collect()
    }

    pub fn holdout_eval_sets(&self) -> Vec<StudyData> {
        self.holdout_indices.iter().map(|&i| self.eval_sets[i].clone()).collect()
    }
}

const STREAM_SIZES: u64 = 1;
const STREAM_TRAIN_X: u64 = 2;
const STREAM_EVAL_X: u64 = 3;
const STREAM_COEF: u64 = 4;
const STREAM_TRAIN_Y: u64 = 5;
const STREAM_EVAL_Y: u64 = 6;

pub fn study_id(k: usize) -> String {
    format!("study_{:02}", k + 1)
}

/// Sample sizes and covariate matrices are fixed by the scenario seed;
/// coefficients and outcomes are redrawn for each replicate.
pub fn gen_collection(scenario: &SimScenario, replicate: usize) -> Result<SimCollection> {
    scenario.validate()?;
    let seed = scenario.seed;
    let k_total = scenario.k_total;
    let mut size_rng = substream(seed, STREAM_SIZES, 0, 0);
    let sample_sizes: Vec<usize> = (0..k_total)
        .map(|_| size_rng.random_range(scenario.n_range.0..=scenario.n_range.1))
        .collect();

    let sigma = scenario.sigma_true()?;
    let mut coef_rng = substream(seed, STREAM_COEF, replicate as u64, 0);
    let coefs = gen_coefficients(
        k_total,
        scenario.p,
        scenario.p0,
        scenario.coef_variance,
        &sigma,
        &mut coef_rng,
    )?;

    let mut studies = Vec::with_capacity(k_total);
    let mut eval_sets = Vec::with_capacity(k_total);
    for k in 0..k_total {
        let beta = coefs.row(k + 1).transpose();
        let x = gen_covariates(
            sample_sizes[k],
            scenario.p,
            scenario.ar_decay,
            &mut substream(seed, STREAM_TRAIN_X, k as u64, 0),
        );
        let (t, s) = gen_survival(
            &x,
            &beta,
            &scenario.baseline,
            &scenario.censoring,
            &mut substream(seed, STREAM_TRAIN_Y, replicate as u64, k as u64),
        )?;
        studies.push(StudyData::new(study_id(k), t, s, x)?);

        let xe = gen_covariates(
            scenario.holdout_per_study,
            scenario.p,
            scenario.ar_decay,
            &mut substream(seed, STREAM_EVAL_X, k as u64, 0),
        );
        let (t, s) = gen_survival(
            &xe,
            &beta,
            &scenario.baseline,
            &scenario.censoring,
            &mut substream(seed, STREAM_EVAL_Y, replicate as u64, k as u64),
        )?;
        eval_sets.push(StudyData::new_unchecked_events(study_id(k), t, s, xe)?);
    }

    Ok(SimCollection {
        replicate,
        fit_indices: scenario.fit_indices(),
        holdout_indices: scenario.holdout_indices(),
        studies,
        eval_sets,
        true_coefficients: coefs,
        sample_sizes,
    })
}
