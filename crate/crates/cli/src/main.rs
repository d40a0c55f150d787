use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hicox::simulate::{gen_collection, SimScenario};
use hicox::transform::{affine_distort, DEFAULT_INTERCEPT, DEFAULT_SLOPE};
use hicox_cli::config::{parse_methods, FitConfig, Method, SigmaSource};
use hicox_cli::io::{default_feature_names, ingest, ingest_aligned, read_study, write_study};
use hicox_cli::report::{EvaluationReport, Predictor};
use hicox_cli::run::{aggregate, run_benchmark, run_fit, write_json, write_long_csv, write_summary_csv, BenchmarkSpec, FitInput};
use hicox_cli::{exit, exit_code};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "hicox", version, about = "Hierarchically regularized Cox models across studies")]
struct Cli {
    /// Seed for cross-validation splits, similarity estimation and simulation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "HICOX_THREADS")]
    threads: Option<usize>,
    /// JSON fit configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one replicate of a simulation scenario as study CSV files.
    Simulate {
        /// Scenario JSON; defaults are used for missing fields.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one method and write a JSON report.
    Fit(FitArgs),
    /// Cross-validate over the penalty grid, ignoring fixed penalty weights.
    Cv {
        #[command(flatten)]
        fit: FitArgs,
        /// Mean validation C per grid point.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Recompute C-statistics from a stored report.
    Evaluate {
        #[arg(long)]
        report: PathBuf,
        /// Data for the fit studies, in the report's study order.
        #[arg(long, num_args = 0..)]
        data: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        holdout: Vec<PathBuf>,
        /// CSV output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run methods over simulated replicates and write long and summary CSVs.
    Benchmark {
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Comma-separated method names.
        #[arg(long, default_value = "HR-R,SR,PR")]
        methods: String,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
        /// Fit-list positions (0-based) whose covariates are distorted.
        #[arg(long, value_delimiter = ',')]
        distort: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write every per-replicate report.
        #[arg(long)]
        reports: bool,
    },
    /// Apply the covariate map `x -> intercept + slope * x` to a study file.
    Transform {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = DEFAULT_INTERCEPT, allow_hyphen_values = true)]
        intercept: f64,
        #[arg(long, default_value_t = DEFAULT_SLOPE, allow_hyphen_values = true)]
        slope: f64,
    },
}

#[derive(Args)]
struct FitArgs {
    /// Study CSV files used for fitting.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Evaluation files for the fit studies, in the same order.
    #[arg(long, num_args = 1..)]
    eval: Vec<PathBuf>,
    /// Studies not used for fitting.
    #[arg(long, num_args = 1..)]
    holdout: Vec<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    /// Baseline penalty weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// JSON similarity matrix to use instead of estimating one.
    #[arg(long, conflicts_with = "identity_sigma")]
    sigma: Option<PathBuf>,
    #[arg(long)]
    identity_sigma: bool,
    #[arg(long)]
    cv_splits: Option<usize>,
    #[arg(long)]
    no_standardize: bool,
    #[arg(long)]
    out: PathBuf,
}

fn base_config(cli: &Cli) -> Result<FitConfig> {
    let mut cfg = match &cli.config {
        Some(p) => FitConfig::load(p)?,
        None => FitConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_scenario(path: Option<&Path>, seed: Option<u64>) -> Result<SimScenario> {
    let mut scenario: SimScenario = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing scenario {}", p.display()))?
        }
        None => SimScenario::default(),
    };
    if let Some(s) = seed {
        scenario.seed = s;
    }
    scenario.validate()?;
    Ok(scenario)
}

fn fit_config(cli: &Cli, args: &FitArgs) -> Result<FitConfig> {
    let mut cfg = base_config(cli)?;
    if let Some(m) = args.method {
        cfg.method = m;
    }
    cfg.lambda0 = args.lambda0.or(cfg.lambda0);
    cfg.lambda1 = args.lambda1.or(cfg.lambda1);
    cfg.lambda = args.lambda.or(cfg.lambda);
    if let Some(p) = &args.sigma {
        cfg.sigma = SigmaSource::File { path: p.clone() };
    }
    if args.identity_sigma {
        cfg.sigma = SigmaSource::Identity;
    }
    if let Some(m) = args.cv_splits {
        cfg.cv_splits = m;
    }
    if args.no_standardize {
        cfg.standardize = false;
    }
    Ok(cfg)
}

fn fit_input(args: &FitArgs) -> Result<FitInput> {
    let (studies, features) = ingest(&args.data)?;
    let eval_sets = if args.eval.is_empty() {
        None
    } else {
        if args.eval.len() != studies.len() {
            anyhow::bail!(hicox::Error::InvalidInput(format!(
                "{} evaluation files for {} fit studies",
                args.eval.len(),
                studies.len()
            )));
        }
        Some(ingest_aligned(&args.eval, &features)?)
    };
    let holdouts = ingest_aligned(&args.holdout, &features)?;
    Ok(FitInput {
        studies,
        eval_sets,
        holdouts,
        features,
    })
}

fn fit_and_write(cfg: &FitConfig, args: &FitArgs) -> Result<EvaluationReport> {
    let input = fit_input(args)?;
    let report = run_fit(cfg, &input).with_context(|| format!("fitting {}", cfg.method))?;
    write_json(&args.out, &report)?;
    Ok(report)
}

fn converged(report: &EvaluationReport) -> i32 {
    match &report.convergence {
        Some(c) if !c.converged => exit::CONVERGENCE,
        _ => exit::SUCCESS,
    }
}

#[derive(Serialize)]
struct Truth {
    fit_studies: Vec<String>,
    holdout_studies: Vec<String>,
    sigma: hicox::SimilarityMatrix,
    /// Row 0 is the shared vector, row `k + 1` study `k` of the collection.
    coefficients: Vec<Vec<f64>>,
}

fn simulate(scenario: &SimScenario, replicate: usize, out: &Path) -> Result<()> {
    let c = gen_collection(scenario, replicate)?;
    let features = default_feature_names(scenario.p);
    for sub in ["train", "eval"] {
        std::fs::create_dir_all(out.join(sub)).with_context(|| format!("creating {}", out.display()))?;
    }
    for (s, e) in c.studies.iter().zip(&c.eval_sets) {
        write_study(&out.join("train").join(format!("{}.csv", s.study_id)), s, &features)?;
        write_study(&out.join("eval").join(format!("{}.csv", e.study_id)), e, &features)?;
    }
    let truth = Truth {
        fit_studies: c.fit_indices.iter().map(|&i| c.studies[i].study_id.clone()).collect(),
        holdout_studies: c.holdout_indices.iter().map(|&i| c.studies[i].study_id.clone()).collect(),
        sigma: scenario.sigma_true()?,
        coefficients: c.true_coefficients.row_iter().map(|r| r.iter().copied().collect()).collect(),
    };
    write_json(&out.join("truth.json"), &truth)
}

fn write_cv_table(path: &Path, report: &EvaluationReport) -> Result<()> {
    let Some(cv) = &report.cv else {
        return Ok(());
    };
    let grid = report.config.plan().grid;
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["lambda0", "lambda1", "sigma_scale", "mean_c_statistic"])?;
    for (i, g) in grid.iter().enumerate() {
        let c = cv.mean_score(i).map_or_else(|| "NA".into(), |v| v.to_string());
        w.write_record([g.lambda0.to_string(), g.lambda1.to_string(), g.sigma_scale.to_string(), c])?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate(report: &Path, data: &[PathBuf], holdout: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(report).with_context(|| format!("reading {}", report.display()))?;
    let report: EvaluationReport = serde_json::from_str(&text).context("parsing report")?;
    let predictor = Predictor::new(&report);
    let mut rows = Vec::new();
    for (k, p) in data.iter().enumerate() {
        let s = hicox_cli::io::select_features(&read_study(p)?, &report.features)?;
        rows.push(predictor.score_fit(k, &s.data)?);
    }
    for s in ingest_aligned(holdout, &report.features)? {
        rows.push(predictor.score_holdout(&s)?);
    }
    let sink: Box<dyn std::io::Write> = match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["study", "role", "n", "c_statistic"])?;
    for r in rows {
        let c = r.c_statistic.map_or_else(|| "NA".into(), |v| v.to_string());
        w.write_record([r.study, r.role.as_str().into(), r.n.to_string(), c])?;
    }
    w.flush()?;
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<i32> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("building the worker pool")?;
    }
    match &cli.command {
        Command::Simulate { scenario, replicate, out } => {
            let scenario = load_scenario(scenario.as_deref(), cli.seed)?;
            simulate(&scenario, *replicate, out)?;
            Ok(exit::SUCCESS)
        }
        Command::Fit(args) => {
            let cfg = fit_config(cli, args)?;
            let report = fit_and_write(&cfg, args)?;
            Ok(converged(&report))
        }
        Command::Cv { fit, table } => {
            let mut cfg = fit_config(cli, fit)?;
            cfg.lambda0 = None;
            cfg.lambda1 = None;
            cfg.lambda = None;
            let report = fit_and_write(&cfg, fit)?;
            if let Some(t) = table {
                write_cv_table(t, &report)?;
            }
            Ok(converged(&report))
        }
        Command::Evaluate { report, data, holdout, out } => {
            evaluate(report, data, holdout, out.as_deref())?;
            Ok(exit::SUCCESS)
        }
        Command::Benchmark {
            scenario,
            methods,
            replicates,
            distort,
            out,
            reports,
        } => {
            let spec = BenchmarkSpec {
                scenario: load_scenario(scenario.as_deref(), cli.seed)?,
                methods: parse_methods(methods)?,
                replicates: *replicates,
                base: base_config(cli)?,
                distort: distort.clone(),
                reports_dir: reports.then(|| out.join("reports")),
            };
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let outcome = run_benchmark(&spec)?;
            let long = out.join("benchmark_long.csv");
            write_long_csv(&outcome.rows, BufWriter::new(File::create(&long)?))?;
            let summary = out.join("benchmark_summary.csv");
            write_summary_csv(&aggregate(&outcome.rows), BufWriter::new(File::create(&summary)?))?;
            if !outcome.failures.is_empty() {
                log::warn!("{} replicate-method runs excluded", outcome.failures.len());
            }
            Ok(exit::SUCCESS)
        }
        Command::Transform {
            input,
            output,
            intercept,
            slope,
        } => {
            let study = read_study(input)?;
            let mapped = affine_distort(&study.data, *intercept, *slope)?;
            write_study(output, &mapped, &study.features)?;
            Ok(exit::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
