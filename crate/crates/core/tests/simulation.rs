use hicox::simulate::{
    block_sigma_with, gen_coefficients, gen_collection, gen_covariates, gen_survival, substream, Baseline, BlockValues,
    Censoring, SimScenario,
};
use nalgebra::{DMatrix, DVector};

/// Kaplan-Meier survival at `t`.
fn kaplan_meier(times: &[f64], status: &[bool], t: f64) -> f64 {
    let mut idx: Vec<usize> = (0..times.len()).collect();
    idx.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut s = 1.0;
    let mut at_risk = times.len() as f64;
    for &i in &idx {
        if times[i] > t {
            break;
        }
        if status[i] {
            s *= 1.0 - 1.0 / at_risk;
        }
        at_risk -= 1.0;
    }
    s
}

#[test]
fn shared_zeros_follow_the_binomial() {
    let sigma = block_sigma_with(&[2], BlockValues::default()).unwrap();
    let p = 4000;
    let coefs = gen_coefficients(2, p, 0.9, 0.1, &sigma, &mut substream(3, 4, 0, 0)).unwrap();
    let zeros = (0..p).filter(|&j| coefs[(0, j)] == 0.0).count() as f64;
    let (mean, sd) = (0.9 * p as f64, (p as f64 * 0.9 * 0.1).sqrt());
    assert!((zeros - mean).abs() < 4.0 * sd, "{zeros} zeros");
}

#[test]
fn deviations_have_the_block_covariance() {
    let sigma = block_sigma_with(&[2, 1], BlockValues::default()).unwrap();
    let p = 40000;
    let coefs = gen_coefficients(3, p, 0.0, 0.1, &sigma, &mut substream(5, 4, 0, 0)).unwrap();
    let dev = DMatrix::from_fn(3, p, |k, j| coefs[(k + 1, j)] - coefs[(0, j)]);
    let cov = &dev * dev.transpose() / p as f64;
    let target = sigma.entries();
    for a in 0..3 {
        for b in 0..3 {
            assert!((cov[(a, b)] - target[(a, b)]).abs() < 3e-3, "({a},{b}) {} vs {}", cov[(a, b)], target[(a, b)]);
        }
    }
    let shared_var = coefs.row(0).iter().map(|v| v * v).sum::<f64>() / p as f64;
    assert!((shared_var - 0.1).abs() < 5e-3);
}

#[test]
fn covariates_are_ar1() {
    let n = 20000;
    let x = gen_covariates(n, 4, 0.3, &mut substream(7, 2, 0, 0));
    let corr = |a: usize, b: usize| {
        let (ca, cb) = (x.column(a), x.column(b));
        ca.dot(&cb) / (ca.norm() * cb.norm())
    };
    assert!((corr(0, 1) - 0.3).abs() < 0.03);
    assert!((corr(1, 3) - 0.09).abs() < 0.03);
    let var3 = x.column(3).norm_squared() / n as f64;
    assert!((var3 - 1.0).abs() < 0.05);
}

#[test]
fn censoring_and_baseline_match_their_targets() {
    let n = 4000;
    let x = gen_covariates(n, 3, 0.3, &mut substream(9, 2, 0, 0));
    let beta = DVector::from_vec(vec![0.5, -0.3, 0.2]);
    let (t, s) = gen_survival(
        &x,
        &beta,
        &Baseline::default(),
        &Censoring::CalibratedExponential { fraction: 0.3 },
        &mut substream(9, 5, 0, 0),
    )
    .unwrap();
    let censored = s.iter().filter(|d| !**d).count() as f64 / n as f64;
    assert!((censored - 0.3).abs() < 0.03, "censored fraction {censored}");

    // beta = 0: the Kaplan-Meier curve estimates the baseline survival
    let zero = DVector::zeros(3);
    let (t0, s0) = gen_survival(
        &x,
        &zero,
        &Baseline::default(),
        &Censoring::Exponential { rate: 0.1 },
        &mut substream(9, 5, 1, 0),
    )
    .unwrap();
    for q in [1.0, 3.0, 6.0] {
        let km = kaplan_meier(&t0, &s0, q);
        assert!((km - Baseline::default().survival(q)).abs() < 0.03, "t={q}: {km}");
    }
    assert!(t.iter().all(|v| *v > 0.0 && v.is_finite()));
}

#[test]
fn default_evaluation_sets_have_1000_rows() {
    let s = SimScenario {
        k_total: 3,
        k_fit: 2,
        p: 4,
        n_range: (50, 60),
        ..Default::default()
    };
    let c = gen_collection(&s, 0).unwrap();
    assert!(c.eval_sets.iter().all(|e| e.n() == 1000));
    assert!(c.studies.iter().zip(&c.sample_sizes).all(|(st, n)| st.n() == *n && (50..=60).contains(n)));
    assert_eq!(c.holdout_indices, vec![2]);
}

#[test]
fn null_covariates_have_no_predictive_value() {
    let s = SimScenario {
        k_total: 3,
        k_fit: 3,
        p: 50,
        p0: 0.9,
        cluster_sizes: Some(vec![3]),
        block_values: BlockValues {
            diagonal: 1e-12,
            within: 0.0,
            between: 0.0,
        },
        n_range: (50, 60),
        holdout_per_study: 3000,
        ..Default::default()
    };
    let c = gen_collection(&s, 0).unwrap();
    let e = &c.eval_sets[0];
    let nulls: Vec<usize> = (0..50).filter(|&j| c.true_coefficients[(0, j)] == 0.0).collect();
    assert!(!nulls.is_empty());
    // a null covariate far (in AR(1) lag) from every active one
    let active: Vec<usize> = (0..50).filter(|j| !nulls.contains(j)).collect();
    let far = nulls
        .iter()
        .copied()
        .max_by_key(|&j| active.iter().map(|&a| a.abs_diff(j)).min().unwrap_or(50))
        .unwrap();
    let scores: Vec<f64> = e.covariates().column(far).iter().copied().collect();
    let cstat = hicox::concordance(&scores, e.times(), e.status()).unwrap();
    assert!((cstat - 0.5).abs() < 0.05, "covariate {far}: C = {cstat}");
}
