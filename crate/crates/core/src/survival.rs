//! Survival data containers, the Breslow partial log-likelihood and Harrell's
//! concordance statistic.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Right-censored survival data from a single study.
///
/// `status[i]` is `true` when `times[i]` is an observed event and `false`
/// when the subject was censored at that time.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyData {
    pub study_id: String,
    times: Vec<f64>,
    status: Vec<bool>,
    covariates: DMatrix<f64>,
}

impl StudyData {
    pub fn new(
        study_id: impl Into<String>,
        times: Vec<f64>,
        status: Vec<bool>,
        covariates: DMatrix<f64>,
    ) -> Result<Self> {
        let study = Self::new_unchecked_events(study_id, times, status, covariates)?;
        if study.n_events() == 0 {
            return Err(Error::NoEvents(study.study_id));
        }
        Ok(study)
    }

    /// Same validation as [`StudyData::new`] except that zero events are
    /// allowed. Evaluation sets built by splitting may legitimately lack events.
    pub fn new_unchecked_events(
        study_id: impl Into<String>,
        times: Vec<f64>,
        status: Vec<bool>,
        covariates: DMatrix<f64>,
    ) -> Result<Self> {
        let study_id = study_id.into();
        let n = times.len();
        if n == 0 {
            return Err(Error::invalid(format!("study `{study_id}` is empty")));
        }
        if status.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: status.len(),
                context: "status length",
            });
        }
        if covariates.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: covariates.nrows(),
                context: "covariate rows",
            });
        }
        if covariates.ncols() == 0 {
            return Err(Error::invalid(format!("study `{study_id}` has no covariates")));
        }
        if let Some(i) = times.iter().position(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::invalid(format!(
                "study `{study_id}`: time at row {i} must be finite and positive, got {}",
                times[i]
            )));
        }
        if let Some(idx) = covariates.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "study `{study_id}`: non-finite covariate at row {}, column {}",
                idx % n,
                idx / n
            )));
        }
        Ok(Self {
            study_id,
            times,
            status,
            covariates,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn status(&self) -> &[bool] {
        &self.status
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn n_events(&self) -> usize {
        self.status.iter().filter(|s| **s).count()
    }

    /// Number of distinct observed event times.
    pub fn n_unique_event_times(&self) -> usize {
        let mut t: Vec<f64> = self
            .times
            .iter()
            .zip(&self.status)
            .filter(|(_, s)| **s)
            .map(|(t, _)| *t)
            .collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t.len()
    }

    /// Rows `idx` of this study, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let covariates = self.covariates.select_rows(idx);
        Self::new_unchecked_events(
            self.study_id.clone(),
            idx.iter().map(|&i| self.times[i]).collect(),
            idx.iter().map(|&i| self.status[i]).collect(),
            covariates,
        )
    }

    /// Replaces the covariate matrix, keeping outcomes.
    pub fn with_covariates(&self, covariates: DMatrix<f64>) -> Result<Self> {
        Self::new_unchecked_events(
            self.study_id.clone(),
            self.times.clone(),
            self.status.clone(),
            covariates,
        )
    }

    /// Linear predictor `X beta`.
    pub fn risk_scores(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(beta.len(), self.p(), "coefficient length")?;
        Ok(&self.covariates * beta)
    }
}

fn check_len(found: usize, expected: usize, context: &'static str) -> Result<()> {
    if found != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found,
            context,
        });
    }
    Ok(())
}

/// Breslow summary of a study: unique event times, tie counts, the summed
/// covariates of the tied events and where each risk set starts in the
/// time-sorted data.
#[derive(Debug, Clone, PartialEq)]
pub struct EventTable {
    pub event_times: Vec<f64>,
    pub tie_counts: Vec<usize>,
    /// `m x p`; row `l` sums the covariates of the events at `event_times[l]`.
    pub tied_covariate_sums: DMatrix<f64>,
    /// Risk set `l` is `sorted[risk_start[l]..]`.
    pub risk_start: Vec<usize>,
    /// `order[r]` is the original row placed at sorted position `r`.
    pub order: Vec<usize>,
    pub n: usize,
}

impl EventTable {
    pub fn m(&self) -> usize {
        self.event_times.len()
    }

    pub fn risk_set_sizes(&self) -> Vec<usize> {
        self.risk_start.iter().map(|s| self.n - s).collect()
    }

    pub fn n_events(&self) -> usize {
        self.tie_counts.iter().sum()
    }
}

pub fn build_event_table(study: &StudyData) -> Result<EventTable> {
    if study.n_events() == 0 {
        return Err(Error::NoEvents(study.study_id.clone()));
    }
    let n = study.n();
    let p = study.p();
    let times = study.times();
    let status = study.status();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)));

    let mut event_times = Vec::new();
    let mut tie_counts = Vec::new();
    let mut risk_start = Vec::new();
    let mut sums: Vec<DVector<f64>> = Vec::new();

    let mut r = 0;
    while r < n {
        let t = times[order[r]];
        let start = r;
        let mut d = 0;
        let mut sum = DVector::zeros(p);
        while r < n && times[order[r]] == t {
            let i = order[r];
            if status[i] {
                d += 1;
                sum += study.covariates().row(i).transpose();
            }
            r += 1;
        }
        if d > 0 {
            event_times.push(t);
            tie_counts.push(d);
            risk_start.push(start);
            sums.push(sum);
        }
    }

    let m = event_times.len();
    let tied_covariate_sums = DMatrix::from_fn(m, p, |l, j| sums[l][j]);
    Ok(EventTable {
        event_times,
        tie_counts,
        tied_covariate_sums,
        risk_start,
        order,
        n,
    })
}

/// A study prepared for repeated likelihood evaluation: its event table
/// together with the covariates permuted into time order.
#[derive(Debug, Clone)]
pub struct CoxStudy {
    pub table: EventTable,
    pub sorted_covariates: DMatrix<f64>,
    /// `sum_l tilde x_l`, the linear part of the log-likelihood.
    event_sum: DVector<f64>,
}

impl CoxStudy {
    pub fn new(study: &StudyData) -> Result<Self> {
        let table = build_event_table(study)?;
        let sorted_covariates = study.covariates().select_rows(&table.order);
        let event_sum = table.tied_covariate_sums.row_sum().transpose();
        Ok(Self {
            table,
            sorted_covariates,
            event_sum,
        })
    }

    pub fn p(&self) -> usize {
        self.sorted_covariates.ncols()
    }

    pub fn n_events(&self) -> usize {
        self.table.n_events()
    }

    pub fn n(&self) -> usize {
        self.table.n
    }

    pub fn log_lik(&self, beta: &DVector<f64>) -> f64 {
        let eta = &self.sorted_covariates * beta;
        let log_s0 = log_risk_sums(&self.table, &eta);
        let mut value = self.event_sum.dot(beta);
        for (d, ls) in self.table.tie_counts.iter().zip(&log_s0) {
            value -= *d as f64 * ls;
        }
        value
    }

    /// Log-likelihood and its gradient in one pass.
    pub fn log_lik_grad(&self, beta: &DVector<f64>) -> (f64, DVector<f64>) {
        let eta = &self.sorted_covariates * beta;
        let log_s0 = log_risk_sums(&self.table, &eta);
        let mut value = self.event_sum.dot(beta);
        for (d, ls) in self.table.tie_counts.iter().zip(&log_s0) {
            value -= *d as f64 * ls;
        }
        let a = risk_weights(&self.table, &eta, &log_s0);
        let grad = &self.event_sum - self.sorted_covariates.tr_mul(&a);
        (value, grad)
    }

    /// Negative Hessian (observed information) of the log-likelihood.
    pub fn information(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let x = &self.sorted_covariates;
        let p = x.ncols();
        let eta = x * beta;
        let log_s0 = log_risk_sums(&self.table, &eta);
        let a = risk_weights(&self.table, &eta, &log_s0);

        // sum_l d_l S2_l / S0_l = X' diag(a) X
        let mut weighted = x.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= a[i];
        }
        let mut info = x.tr_mul(&weighted);

        // minus sum_l d_l mu_l mu_l', with mu_l the risk-set weighted mean
        let n = self.table.n;
        let mut shift = f64::NEG_INFINITY;
        let mut s1 = DVector::<f64>::zeros(p);
        let mut next = n;
        for l in (0..self.table.m()).rev() {
            for i in (self.table.risk_start[l]..next).rev() {
                if eta[i] > shift {
                    s1 *= (shift - eta[i]).exp();
                    shift = eta[i];
                }
                s1.axpy((eta[i] - shift).exp(), &x.row(i).transpose(), 1.0);
            }
            next = self.table.risk_start[l];
            let mu = &s1 * (shift - log_s0[l]).exp();
            info.ger(-(self.table.tie_counts[l] as f64), &mu, &mu, 1.0);
        }
        info
    }
}

/// `log sum_{i in R_l} exp(eta_i)` per event time, accumulated in one
/// reverse pass with a running maximum.
fn log_risk_sums(table: &EventTable, eta: &DVector<f64>) -> Vec<f64> {
    let m = table.m();
    let mut out = vec![0.0; m];
    let mut shift = f64::NEG_INFINITY;
    let mut acc = 0.0;
    let mut next = table.n;
    for l in (0..m).rev() {
        for i in (table.risk_start[l]..next).rev() {
            let e = eta[i];
            if e > shift {
                acc *= (shift - e).exp();
                shift = e;
            }
            acc += (e - shift).exp();
        }
        next = table.risk_start[l];
        out[l] = shift + acc.ln();
    }
    out
}

/// `a_i = sum_{l : i in R_l} d_l exp(eta_i - log S0_l)`, so that the
/// risk-set part of the gradient is `X' a`.
fn risk_weights(table: &EventTable, eta: &DVector<f64>, log_s0: &[f64]) -> DVector<f64> {
    let n = table.n;
    let m = table.m();
    let mut a = DVector::zeros(n);
    // r carries sum_{l' <= l} d_l' exp(log S0_l - log S0_l'), every exponent <= 0.
    let mut r = 0.0;
    let mut current_log = 0.0;
    let mut l = 0;
    for i in 0..n {
        while l < m && table.risk_start[l] <= i {
            if l > 0 || r > 0.0 {
                r *= (log_s0[l] - current_log).exp();
            }
            r += table.tie_counts[l] as f64;
            current_log = log_s0[l];
            l += 1;
        }
        if r > 0.0 {
            a[i] = (eta[i] - current_log).exp() * r;
        }
    }
    a
}

fn check_inputs(table: &EventTable, x: &DMatrix<f64>, beta: &DVector<f64>) -> Result<()> {
    check_len(x.nrows(), table.n, "sorted covariate rows")?;
    check_len(beta.len(), x.ncols(), "coefficient length")?;
    check_len(
        table.tied_covariate_sums.ncols(),
        x.ncols(),
        "tied covariate sum columns",
    )
}

/// Breslow partial log-likelihood
/// `sum_l { tilde x_l' beta - d_l log sum_{i : Y_i >= t_l} exp(x_i' beta) }`.
pub fn partial_log_lik(
    table: &EventTable,
    sorted_covariates: &DMatrix<f64>,
    beta: &DVector<f64>,
) -> Result<f64> {
    check_inputs(table, sorted_covariates, beta)?;
    let eta = sorted_covariates * beta;
    let log_s0 = log_risk_sums(table, &eta);
    let linear: f64 = (&table.tied_covariate_sums * beta).sum();
    Ok(linear
        - table
            .tie_counts
            .iter()
            .zip(&log_s0)
            .map(|(d, ls)| *d as f64 * ls)
            .sum::<f64>())
}

pub fn partial_log_lik_grad(
    table: &EventTable,
    sorted_covariates: &DMatrix<f64>,
    beta: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_inputs(table, sorted_covariates, beta)?;
    let eta = sorted_covariates * beta;
    let log_s0 = log_risk_sums(table, &eta);
    let a = risk_weights(table, &eta, &log_s0);
    Ok(table.tied_covariate_sums.row_sum().transpose() - sorted_covariates.tr_mul(&a))
}

/// Harrell's C: the fraction of comparable pairs (the earlier time is an
/// observed event, times strictly ordered) in which the earlier subject has the
/// higher score. Tied scores count one half.
pub fn concordance(scores: &[f64], times: &[f64], status: &[bool]) -> Result<f64> {
    let counts = concordance_counts(scores, times, status)?;
    if counts.comparable == 0 {
        return Err(Error::UndefinedStatistic(
            "no comparable pairs for the C-statistic".into(),
        ));
    }
    Ok(counts.value())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConcordanceCounts {
    pub concordant: u64,
    pub tied: u64,
    pub comparable: u64,
}

impl ConcordanceCounts {
    pub fn value(&self) -> f64 {
        (2 * self.concordant + self.tied) as f64 / (2 * self.comparable) as f64
    }
}

pub fn concordance_counts(
    scores: &[f64],
    times: &[f64],
    status: &[bool],
) -> Result<ConcordanceCounts> {
    let n = scores.len();
    check_len(times.len(), n, "concordance times")?;
    check_len(status.len(), n, "concordance status")?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut counts = ConcordanceCounts::default();
    for (pos, &i) in order.iter().enumerate() {
        if !status[i] {
            continue;
        }
        // skip partners with the same time; they are not comparable
        let mut start = pos + 1;
        while start < n && times[order[start]] == times[i] {
            start += 1;
        }
        for &j in &order[start..] {
            counts.comparable += 1;
            if scores[i] > scores[j] {
                counts.concordant += 1;
            } else if scores[i] == scores[j] {
                counts.tied += 1;
            }
        }
    }
    Ok(counts)
}

/// C-statistic of the linear predictor `X beta` on `study`.
pub fn study_concordance(study: &StudyData, beta: &DVector<f64>) -> Result<f64> {
    let scores = study.risk_scores(beta)?;
    concordance(scores.as_slice(), study.times(), study.status())
}
