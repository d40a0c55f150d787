use std::path::Path;
use std::process::Command;

use hicox::baselines::BaselineMethod;
use hicox::selection::GridPoint;
use hicox::simulate::{gen_collection, SimScenario};
use hicox_cli::config::{FitConfig, Method};
use hicox_cli::io::{ingest, read_study};
use hicox_cli::report::Role;
use hicox_cli::run::{run_benchmark, run_fit, write_long_csv, BenchmarkSpec, FitInput};

fn small_scenario() -> SimScenario {
    SimScenario {
        name: "small".into(),
        k_total: 4,
        k_fit: 3,
        p: 6,
        cluster_sizes: Some(vec![2, 2]),
        n_range: (60, 90),
        holdout_per_study: 120,
        coef_variance: 0.3,
        seed: 11,
        ..Default::default()
    }
}

fn quick_config(method: Method) -> FitConfig {
    FitConfig {
        method,
        cv_splits: 3,
        grid: method
            .is_hierarchical()
            .then(|| vec![GridPoint::new(0.0, 0.5), GridPoint::new(0.0, 5.0), GridPoint::new(0.0, 50.0)]),
        ..Default::default()
    }
}

fn hicox() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hicox"))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) {
    std::fs::write(path, serde_json::to_string(v).unwrap()).unwrap();
}

#[test]
fn simulate_write_ingest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scen = small_scenario();
    let spath = dir.path().join("scenario.json");
    write_json(&spath, &scen);
    let out = dir.path().join("sim");
    let status = hicox()
        .args(["simulate", "--scenario"])
        .arg(&spath)
        .args(["--replicate", "1", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let c = gen_collection(&scen, 1).unwrap();
    for s in &c.studies {
        let back = read_study(&out.join("train").join(format!("{}.csv", s.study_id))).unwrap();
        assert_eq!(&back.data, s);
    }
    assert!(out.join("truth.json").exists());
}

#[test]
fn single_study_sr_reports_one_in_study_c() {
    let c = gen_collection(&small_scenario(), 0).unwrap();
    let input = FitInput {
        studies: vec![c.studies[0].clone()],
        eval_sets: None,
        holdouts: vec![],
        features: hicox_cli::io::default_feature_names(6),
    };
    let rep = run_fit(&quick_config(Method::Baseline(BaselineMethod::SR)), &input).unwrap();
    assert_eq!(rep.c_statistics.len(), 1);
    assert_eq!(rep.c_statistics[0].role, Role::Fit);
    assert!(rep.c_statistics[0].c_statistic.unwrap() > 0.5);
}

#[test]
fn hr_ridge_report_structure() {
    let c = gen_collection(&small_scenario(), 0).unwrap();
    let input = FitInput {
        studies: c.fit_studies(),
        eval_sets: Some(c.fit_eval_sets()),
        holdouts: c.holdout_eval_sets(),
        features: hicox_cli::io::default_feature_names(6),
    };
    let rep = run_fit(&quick_config(Method::HrRidge), &input).unwrap();
    let sigma = rep.sigma.as_ref().unwrap();
    assert_eq!(sigma.len(), 3);
    assert!(sigma.iter().all(|r| r.len() == 3));
    assert_eq!(rep.c_statistics.len(), 4);
    assert_eq!(rep.c_statistics.iter().filter(|r| r.role == Role::Fit).count(), 3);
    assert_eq!(rep.c_statistics[3].study, c.studies[3].study_id);
    assert_eq!(rep.selected_point.unwrap().lambda0, 0.0);
    let cv = rep.cv.as_ref().unwrap();
    assert_eq!(cv.values.len(), 3);
    assert_eq!(cv.values[0].len(), 3);
}

#[test]
fn fit_is_byte_deterministic_and_evaluate_recomputes() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert!(hicox()
        .args(["simulate", "--out"])
        .arg(&sim)
        .arg("--scenario")
        .arg({
            let p = dir.path().join("s.json");
            write_json(&p, &small_scenario());
            p
        })
        .status()
        .unwrap()
        .success());
    let cfg = dir.path().join("cfg.json");
    write_json(&cfg, &quick_config(Method::HrRidge));
    let train: Vec<_> = (0..3).map(|k| sim.join("train").join(format!("study_{:02}.csv", k + 1))).collect();
    let eval: Vec<_> = (0..3).map(|k| sim.join("eval").join(format!("study_{:02}.csv", k + 1))).collect();
    let hold = sim.join("eval").join("study_04.csv");
    let mut outputs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("r{i}.json"));
        let st = hicox()
            .arg("--config")
            .arg(&cfg)
            .args(["--seed", "5", "fit", "--data"])
            .args(&train)
            .arg("--eval")
            .args(&eval)
            .arg("--holdout")
            .arg(&hold)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert_eq!(st.code(), Some(0));
        outputs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);

    let table = hicox()
        .arg("evaluate")
        .arg("--report")
        .arg(dir.path().join("r0.json"))
        .arg("--data")
        .args(&eval)
        .arg("--holdout")
        .arg(&hold)
        .output()
        .unwrap();
    assert!(table.status.success());
    let report: serde_json::Value = serde_json::from_slice(&outputs[0]).unwrap();
    let text = String::from_utf8(table.stdout).unwrap();
    let lines: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(lines.len(), 4);
    for (line, row) in lines.iter().zip(report["c_statistics"].as_array().unwrap()) {
        let c: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(c, row["c_statistic"].as_f64().unwrap());
    }
}

#[test]
fn benchmark_bookkeeping() {
    let spec = BenchmarkSpec {
        scenario: small_scenario(),
        methods: vec![Method::Baseline(BaselineMethod::SR)],
        replicates: 2,
        base: quick_config(Method::Baseline(BaselineMethod::SR)),
        distort: vec![],
        reports_dir: None,
    };
    let out = run_benchmark(&spec).unwrap();
    assert!(out.failures.is_empty());
    assert_eq!(out.rows.len(), 2 * 4);
    for k in 0..4 {
        let id = format!("study_{:02}", k + 1);
        assert_eq!(out.rows.iter().filter(|r| r.study == id).count(), 2);
    }
    let mut buf = Vec::new();
    write_long_csv(&out.rows, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 9);
}

#[test]
fn distortion_leaves_standardized_sr_unchanged() {
    let base = BenchmarkSpec {
        scenario: small_scenario(),
        methods: vec![Method::Baseline(BaselineMethod::SR)],
        replicates: 1,
        base: quick_config(Method::Baseline(BaselineMethod::SR)),
        distort: vec![],
        reports_dir: None,
    };
    let distorted = BenchmarkSpec {
        distort: vec![0, 2],
        ..base.clone()
    };
    let a = run_benchmark(&base).unwrap().rows;
    let b = run_benchmark(&distorted).unwrap().rows;
    for k in [0, 2] {
        let ca = a[k].c_statistic.unwrap();
        let cb = b[k].c_statistic.unwrap();
        assert!((ca - cb).abs() < 1e-9, "study {k}: {ca} vs {cb}");
    }
}

#[test]
fn benchmark_command_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let scen = dir.path().join("s.json");
    write_json(&scen, &small_scenario());
    let cfg = dir.path().join("cfg.json");
    write_json(&cfg, &quick_config(Method::HrRidge));
    let mut sums = Vec::new();
    for (i, threads) in ["1", "4"].iter().enumerate() {
        let out = dir.path().join(format!("b{i}"));
        let st = hicox()
            .args(["--threads", threads, "--config"])
            .arg(&cfg)
            .args(["benchmark", "--methods", "HR-R,SR,PR,FE", "--replicates", "2", "--scenario"])
            .arg(&scen)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(st.success());
        sums.push(std::fs::read(out.join("benchmark_summary.csv")).unwrap());
    }
    assert_eq!(sums[0], sums[1]);
}

#[test]
fn transform_applies_the_affine_map() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("a.csv");
    std::fs::write(&input, "time,status,g1,g2\n1.5,1,0.5,-1\n2,0,2,0\n").unwrap();
    let output = dir.path().join("b.csv");
    assert!(hicox()
        .args(["transform", "--input"])
        .arg(&input)
        .arg("--output")
        .arg(&output)
        .status()
        .unwrap()
        .success());
    let (studies, names) = ingest(&[&output]).unwrap();
    assert_eq!(names, vec!["g1", "g2"]);
    let x = studies[0].covariates();
    assert_eq!((x[(0, 0)], x[(0, 1)], x[(1, 0)], x[(1, 1)]), (8.5, 13.0, 4.0, 10.0));
    assert_eq!(studies[0].times(), &[1.5, 2.0]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "time,status,g\n-1,1,0\n").unwrap();
    let st = hicox()
        .args(["fit", "--method", "SR", "--data"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("r.json"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
    let st = hicox().args(["fit", "--method", "NOPE", "--data", "x.csv", "--out", "r.json"]).status().unwrap();
    assert_eq!(st.code(), Some(2));
}
