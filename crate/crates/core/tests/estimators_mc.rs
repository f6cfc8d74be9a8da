//! Finite-sample behavior of the cross-fitted estimators and baselines on
//! DGPs with known effects.

use rayon::prelude::*;

use ltbridge::bench::BenchmarkConfig;
use ltbridge::data::split_folds;
use ltbridge::estimators::{
    cross_fit, estimate_from_fits, imputation_baseline, naive_dim, tau_bridge_all, tau_dr, tau_sel, EstimatorConfig,
    Method, Needs,
};
use ltbridge::gmm::{BasisSpec, SelectionOffset};
use ltbridge::rng::derive_seed;
use ltbridge::synthetic::{
    biased_subsample, discrete_oracle_h, discrete_oracle_q, discrete_true_tau, gen_discrete_dgp, gen_linear_sem,
    gen_semisynthetic, linear_sem_true_tau, sample_discrete, verify_identification, LinearSemParams, SubsampleConfig,
};

fn sem_cfg(seed: u64) -> EstimatorConfig {
    let mut cfg = EstimatorConfig {
        seed,
        ..EstimatorConfig::default()
    };
    cfg.gmm.selection_offset = SelectionOffset::ArmShare;
    cfg
}

fn tabular_cfg(seed: u64) -> EstimatorConfig {
    EstimatorConfig {
        seed,
        basis: BasisSpec::tabular(),
        ..EstimatorConfig::default()
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

#[test]
fn tabular_bridges_recover_discrete_tau() {
    let d = gen_discrete_dgp(2, 2, 2, 3, 1.5, 21).unwrap();
    let tau = discrete_true_tau(&d);
    let (s, _) = sample_discrete(&d, 40_000, 40_000, 22).unwrap();
    for est in tau_bridge_all(&s, &tabular_cfg(1)).unwrap() {
        assert!(
            (est.tau_hat - tau).abs() < 0.03,
            "{:?}: {} vs {tau}",
            est.method,
            est.tau_hat
        );
    }
}

#[test]
fn misspecification_grid_on_discrete_dgp() {
    // A DGP whose population both-garbled gap is clearly nonzero; the gap
    // vanishes by accident on some tables.
    let d = (23u64..)
        .map(|seed| gen_discrete_dgp(2, 2, 2, 3, 1.5, seed).unwrap())
        .find(|d| verify_identification(d).unwrap().dr_both_garbled.gap.abs() > 0.2)
        .unwrap();
    let tau = discrete_true_tau(&d);
    let (s, _) = sample_discrete(&d, 80_000, 80_000, 24).unwrap();
    let folds = split_folds(&s, 5, 3).unwrap();
    let cf = cross_fit(&s, &folds, &tabular_cfg(3), Needs::BOTH).unwrap();
    let h_bad = discrete_oracle_h(&d).unwrap().affine(1.5, 0.3);
    let q_bad = discrete_oracle_q(&d).unwrap().affine(1.5, 0.3);
    let dr_with = |h: bool, q: bool| {
        let mut c = cf.clone();
        for f in c.fits.iter_mut() {
            if h {
                f.h = h_bad.clone();
            }
            if q {
                f.q = q_bad.clone();
            }
        }
        estimate_from_fits(Method::Dr, &s, &c).unwrap().tau_hat - tau
    };
    let (gh, gq, gb) = (dr_with(true, false), dr_with(false, true), dr_with(true, true));
    assert!(gh.abs() < 0.05, "h garbled, q fit: error {gh}");
    assert!(gq.abs() < 0.05, "h fit, q garbled: error {gq}");
    assert!(gb.abs() >= 0.05, "both garbled: error {gb}");
}

#[test]
fn fold_count_does_not_move_the_estimate() {
    let (s, _) = gen_linear_sem(&LinearSemParams::confounded_default(), 20_000, 20_000, 25).unwrap();
    let mut c2 = sem_cfg(4);
    c2.k = 2;
    let (a, b) = (tau_dr(&s, &c2).unwrap(), tau_dr(&s, &sem_cfg(4)).unwrap());
    let se = b.std_error().unwrap();
    assert!(
        (a.tau_hat - b.tau_hat).abs() < 2.0 * se,
        "K=2 {} vs K=5 {} (se {se})",
        a.tau_hat,
        b.tau_hat
    );
}

#[test]
fn no_confounding_sel_and_naive_agree_with_truth() {
    let mut p = LinearSemParams::confounded_default();
    p.kappa1 = vec![0.0];
    p.kappa2 = vec![0.0];
    let tau = linear_sem_true_tau(&p);
    let (s, _) = gen_linear_sem(&p, 40_000, 40_000, 26).unwrap();
    let sel = tau_sel(&s, &sem_cfg(5)).unwrap().tau_hat;
    let naive = naive_dim(&s).unwrap().tau_hat;
    let se = tau_dr(&s, &sem_cfg(5)).unwrap().std_error().unwrap();
    assert!((sel - tau).abs() < 4.0 * se, "sel {sel} vs {tau}");
    assert!((naive - tau).abs() < 4.0 * se, "naive {naive} vs {tau}");
    assert!((sel - naive).abs() < 4.0 * se);
}

#[test]
fn sel_beats_naive_under_confounding() {
    let p = LinearSemParams::confounded_default();
    let tau = linear_sem_true_tau(&p);
    let wins = (0..200u64)
        .into_par_iter()
        .filter(|&r| {
            let (s, _) = gen_linear_sem(&p, 100_000, 100_000, derive_seed(27, r)).unwrap();
            let sel = tau_sel(&s, &sem_cfg(r)).unwrap().tau_hat;
            (sel - tau).abs() < (naive_dim(&s).unwrap().tau_hat - tau).abs()
        })
        .count();
    assert!(wins >= 180, "sel closer than naive in {wins}/200 replications");
}

#[test]
fn more_experimental_rows_shrink_the_experimental_share() {
    let p = LinearSemParams::confounded_default();
    let share = |n_e: usize| {
        let (s, _) = gen_linear_sem(&p, 4000, n_e, 28).unwrap();
        let c = tau_dr(&s, &sem_cfg(6)).unwrap().variance_components.unwrap();
        c[0] / (c[0] + c[1])
    };
    let (a, b) = (share(4000), share(8000));
    assert!(b < a, "E share {a} at n_E = 4000, {b} at n_E = 8000");
}

#[test]
fn naive_is_consistent_without_confounding() {
    let mut p = LinearSemParams::confounded_default();
    p.kappa1 = vec![0.0];
    p.kappa2 = vec![0.0];
    let (s, _) = gen_linear_sem(&p, 100_000, 10, 29).unwrap();
    let est = naive_dim(&s).unwrap();
    assert!((est.tau_hat - linear_sem_true_tau(&p)).abs() < 0.05, "{}", est.tau_hat);
}

#[test]
fn naive_bias_grows_with_subsampling_strength() {
    let source = BenchmarkConfig::default().dgp;
    let tau = linear_sem_true_tau(&source.sem);
    let bias = |eta: f64| {
        let b: Vec<f64> = (0..20u64)
            .map(|r| {
                let (s, lat) = gen_semisynthetic(&source, 20_000, 100, derive_seed(30, r)).unwrap();
                let out = biased_subsample(&s, &lat, &SubsampleConfig::new(eta, derive_seed(31, r))).unwrap();
                naive_dim(&out.sample).unwrap().tau_hat - tau
            })
            .collect();
        mean_sd(&b).0.abs()
    };
    let (b0, b1, b2) = (bias(0.0), bias(0.5), bias(1.0));
    assert!(b0 < b1 && b1 < b2, "naive bias {b0} {b1} {b2}");
}

#[test]
fn imputation_is_consistent_without_persistent_confounding() {
    let mut p = LinearSemParams::confounded_default();
    p.gamma_y = vec![0.0];
    let (s, _) = gen_linear_sem(&p, 50_000, 50_000, 32).unwrap();
    let est = imputation_baseline(&s).unwrap();
    assert!((est.tau_hat - linear_sem_true_tau(&p)).abs() < 0.05, "{}", est.tau_hat);
}

#[test]
fn imputation_is_biased_under_persistent_confounding() {
    let p = LinearSemParams::confounded_default();
    let tau = linear_sem_true_tau(&p);
    let est: Vec<f64> = (0..20u64)
        .into_par_iter()
        .map(|r| {
            let (s, _) = gen_linear_sem(&p, 200_000, 200_000, derive_seed(33, r)).unwrap();
            imputation_baseline(&s).unwrap().tau_hat
        })
        .collect();
    let (m, sd) = mean_sd(&est);
    let se = sd / (est.len() as f64).sqrt();
    assert!((m - tau).abs() > 3.0 * se, "imputation mean {m} vs {tau} (MC se {se})");
}
