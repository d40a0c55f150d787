use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hicox::admm::fit_prepared;
use hicox::baselines::{fit_baseline, select_pooled_lambda, select_single_lambdas, BaselineCoefficients, BaselineMethod};
use hicox::penalties::PenaltyConfig;
use hicox::selection::grid_search;
use hicox::similarity::{estimate_sigma, SimilarityOptions};
use hicox::simulate::{gen_collection, SimScenario};
use hicox::transform::{affine_distort, Standardizer, DEFAULT_INTERCEPT, DEFAULT_SLOPE};
use hicox::{CoxStudy, SimilarityMatrix, StudyData};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{FitConfig, Method, SigmaSource};
use crate::io::default_feature_names;
use crate::report::{Coefficients, EvaluationReport, Predictor, Role};

/// Data for one fit: training studies, optional per-study evaluation sets
/// (in-study C falls back to the training data) and hold-out studies.
#[derive(Debug, Clone)]
pub struct FitInput {
    pub studies: Vec<StudyData>,
    pub eval_sets: Option<Vec<StudyData>>,
    pub holdouts: Vec<StudyData>,
    pub features: Vec<String>,
}

pub fn load_sigma(path: &Path) -> Result<SimilarityMatrix> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing similarity matrix {}", path.display()))
}

fn resolve_sigma(cfg: &FitConfig, studies: &[StudyData]) -> Result<SimilarityMatrix> {
    let k = studies.len();
    let sigma = match &cfg.sigma {
        SigmaSource::Identity => SimilarityMatrix::identity(k),
        SigmaSource::File { path } => load_sigma(path)?,
        SigmaSource::Estimate => {
            let opts = SimilarityOptions {
                seed: cfg.seed,
                ..cfg.similarity.clone()
            };
            estimate_sigma(studies, &opts).context("estimating the similarity matrix")?.sigma
        }
    };
    if sigma.dim() != k {
        return Err(hicox::Error::DimensionMismatch {
            expected: k,
            found: sigma.dim(),
            context: "similarity matrix dimension",
        }
        .into());
    }
    Ok(sigma)
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Fits the configured method and scores every evaluation and hold-out set.
pub fn run_fit(cfg: &FitConfig, input: &FitInput) -> Result<EvaluationReport> {
    cfg.validate()?;
    let method = cfg.method;
    let (studies, standardizers) = if cfg.standardize {
        let mut out = Vec::with_capacity(input.studies.len());
        let mut maps = Vec::with_capacity(input.studies.len());
        for s in &input.studies {
            let map = Standardizer::fit(s.covariates())?;
            out.push(map.apply_study(s)?);
            maps.push(map);
        }
        (out, maps)
    } else {
        (input.studies.clone(), Vec::new())
    };
    let plan = cfg.plan();

    let mut report = EvaluationReport {
        method,
        replicate: None,
        config: cfg.clone(),
        features: input.features.clone(),
        fit_studies: input.studies.iter().map(|s| s.study_id.clone()).collect(),
        standardizers,
        sigma: None,
        selected_point: None,
        selected_lambdas: None,
        coefficients: Coefficients::Shared { values: Vec::new() },
        tau2: None,
        convergence: None,
        cv: None,
        c_statistics: Vec::new(),
    };

    match method {
        Method::Baseline(b) => {
            let lambdas = match cfg.lambda {
                Some(l) => vec![l],
                None if b.is_single_study() || matches!(b, BaselineMethod::FE | BaselineMethod::RE) => {
                    select_single_lambdas(&studies, b.penalty(), &plan)?
                }
                None => vec![select_pooled_lambda(&studies, b.penalty(), &plan)?],
            };
            let prepared = studies.iter().map(CoxStudy::new).collect::<hicox::Result<Vec<_>>>()?;
            let fit = fit_baseline(b, &prepared, &lambdas)?;
            report.coefficients = match fit.coefficients {
                BaselineCoefficients::PerStudy(rows) => Coefficients::PerStudy { rows },
                BaselineCoefficients::Shared(values) => Coefficients::Shared { values },
            };
            report.tau2 = fit.tau2;
            report.selected_lambdas = Some(lambdas);
        }
        _ => {
            let sigma = resolve_sigma(cfg, &studies)?;
            report.sigma = Some(matrix_rows(sigma.entries()));
            match cfg.fixed_point() {
                Some(point) => {
                    let pcfg = PenaltyConfig::new(point.lambda0, point.lambda1, method.exponent(), sigma)?;
                    let prepared = studies.iter().map(CoxStudy::new).collect::<hicox::Result<Vec<_>>>()?;
                    let (bundle, conv) = fit_prepared(&prepared, &pcfg, &cfg.solver, None)?;
                    report.coefficients = Coefficients::bundle(bundle.to_rows());
                    report.convergence = Some(conv);
                    report.selected_point = Some(point);
                }
                None => {
                    let result = grid_search(&studies, &sigma, method.exponent(), &plan, &cfg.solver)?;
                    report.coefficients = Coefficients::bundle(result.bundle.to_rows());
                    report.convergence = Some(result.report);
                    report.selected_point = Some(result.selected);
                    report.cv = Some(result.scores);
                }
            }
            if let Some(conv) = &report.convergence {
                if !conv.converged {
                    log::warn!(
                        "{method}: solver stopped at the iteration cap (residual {:.2e})",
                        conv.final_primal_residual
                    );
                }
            }
        }
    }

    let predictor = Predictor::new(&report);
    let in_study = input.eval_sets.as_ref().unwrap_or(&input.studies);
    let mut rows = Vec::new();
    for (k, data) in in_study.iter().enumerate() {
        rows.push(predictor.score_fit(k, data)?);
    }
    for data in &input.holdouts {
        rows.push(predictor.score_holdout(data)?);
    }
    report.c_statistics = rows;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scenario: String,
    pub replicate: usize,
    pub method: String,
    pub study: String,
    pub role: Role,
    pub c_statistic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scenario: String,
    pub method: String,
    pub study: String,
    pub role: Role,
    pub mean_c: Option<f64>,
    pub replicates: usize,
}

#[derive(Debug, Clone)]
pub struct BenchmarkSpec {
    pub scenario: SimScenario,
    pub methods: Vec<Method>,
    pub replicates: usize,
    pub base: FitConfig,
    /// Positions (0-based, within the fit list) of studies whose covariates
    /// are distorted by `x -> 10 - 3x`.
    pub distort: Vec<usize>,
    pub reports_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct BenchmarkOutcome {
    pub rows: Vec<BenchRow>,
    /// `(replicate, method, error)` for excluded runs.
    pub failures: Vec<(usize, String, String)>,
}

/// Simulated inputs of one replicate, with any requested distortion.
pub fn replicate_input(spec: &BenchmarkSpec, replicate: usize) -> Result<FitInput> {
    let c = gen_collection(&spec.scenario, replicate)?;
    let mut studies = c.fit_studies();
    let mut evals = c.fit_eval_sets();
    for &i in &spec.distort {
        if i >= studies.len() {
            anyhow::bail!(hicox::Error::InvalidInput(format!("cannot distort study {i}: only {} fit studies", studies.len())));
        }
        studies[i] = affine_distort(&studies[i], DEFAULT_INTERCEPT, DEFAULT_SLOPE)?;
        evals[i] = affine_distort(&evals[i], DEFAULT_INTERCEPT, DEFAULT_SLOPE)?;
    }
    Ok(FitInput {
        studies,
        eval_sets: Some(evals),
        holdouts: c.holdout_eval_sets(),
        features: default_feature_names(spec.scenario.p),
    })
}

/// Runs every method on every replicate. Jobs run in parallel; results are
/// ordered by (replicate, method) regardless of scheduling.
pub fn run_benchmark(spec: &BenchmarkSpec) -> Result<BenchmarkOutcome> {
    spec.scenario.validate()?;
    if let Some(dir) = &spec.reports_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let per_replicate: Vec<Vec<(Method, Result<EvaluationReport>)>> = (0..spec.replicates)
        .into_par_iter()
        .map(|r| {
            let input = match replicate_input(spec, r) {
                Ok(i) => i,
                Err(e) => {
                    let msg = format!("{e:#}");
                    return spec.methods.iter().map(|&m| (m, Err(anyhow::anyhow!(msg.clone())))).collect();
                }
            };
            spec.methods
                .par_iter()
                .map(|&m| {
                    let cfg = FitConfig {
                        method: m,
                        seed: spec.base.seed.wrapping_add(r as u64),
                        ..spec.base.clone()
                    };
                    let out = run_fit(&cfg, &input).map(|mut rep| {
                        rep.replicate = Some(r);
                        rep
                    });
                    (m, out)
                })
                .collect()
        })
        .collect();

    let mut outcome = BenchmarkOutcome::default();
    for (r, results) in per_replicate.into_iter().enumerate() {
        for (m, result) in results {
            match result {
                Ok(rep) => {
                    if let Some(dir) = &spec.reports_dir {
                        let path = dir.join(format!("replicate_{r:03}_{}.json", m.name()));
                        write_json(&path, &rep)?;
                    }
                    outcome.rows.extend(rep.c_statistics.into_iter().map(|c| BenchRow {
                        scenario: spec.scenario.name.clone(),
                        replicate: r,
                        method: m.name().to_string(),
                        study: c.study,
                        role: c.role,
                        c_statistic: c.c_statistic,
                    }));
                }
                Err(e) => {
                    log::warn!("replicate {r}, method {m}: excluded ({e:#})");
                    outcome.failures.push((r, m.name().to_string(), format!("{e:#}")));
                }
            }
        }
    }
    Ok(outcome)
}

/// Mean C per (scenario, method, study, role) over replicates with a
/// defined statistic.
pub fn aggregate(rows: &[BenchRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, String, Role), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let entry = groups
            .entry((r.scenario.clone(), r.method.clone(), r.study.clone(), r.role))
            .or_default();
        if let Some(c) = r.c_statistic {
            entry.push(c);
        }
    }
    groups
        .into_iter()
        .map(|((scenario, method, study, role), v)| SummaryRow {
            scenario,
            method,
            study,
            role,
            mean_c: (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64),
            replicates: v.len(),
        })
        .collect()
}

fn fmt_c(c: Option<f64>) -> String {
    c.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

pub fn write_long_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "replicate", "method", "study", "role", "c_statistic"])?;
    for r in rows {
        w.write_record([
            r.scenario.as_str(),
            &r.replicate.to_string(),
            &r.method,
            &r.study,
            r.role.as_str(),
            &fmt_c(r.c_statistic),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "method", "study", "role", "mean_c_statistic", "replicates"])?;
    for r in rows {
        w.write_record([
            r.scenario.as_str(),
            &r.method,
            &r.study,
            r.role.as_str(),
            &fmt_c(r.mean_c),
            &r.replicates.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(rep: usize, study: &str, c: Option<f64>) -> BenchRow {
        BenchRow {
            scenario: "s".into(),
            replicate: rep,
            method: "SR".into(),
            study: study.into(),
            role: Role::Fit,
            c_statistic: c,
        }
    }

    #[test]
    fn aggregation_means_and_counts() {
        let rows = vec![row(0, "a", Some(0.6)), row(1, "a", Some(0.8)), row(0, "b", None)];
        let s = aggregate(&rows);
        assert_eq!(s.len(), 2);
        assert!((s[0].mean_c.unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(s[0].replicates, 2);
        assert_eq!(s[1].mean_c, None);
        let mut buf = Vec::new();
        write_summary_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(2).unwrap().ends_with(",NA,0"));
    }
}
