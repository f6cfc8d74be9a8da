//! Doubly robust estimation when the covariate law differs between samples
//! and the experimental treatment depends on X.
//!
//! The nuisances are
//! η₁ = h, η₂(a, x) = E[h | A=a, X=x, G=E], η₃ = q, η₄(a, x) = P(A=a | x, E),
//! η₅(x) = P(O | x)/P(E | x), η₆,ₐ = P(E | A=a)/P(O | A=a), η₇ = P(E)/P(O),
//! and the score components are
//! φ₁ = η₂(a, X) on O rows,
//! φ₂ = η₇η₅(X)·1{A=a}/η₄(a, X)·(h − η₂(a, X)) on E rows,
//! φ₃ = η₆,ₐη₅(X)·1{A=a}/η₄(a, X)·q·(Y − h) on O rows.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_folds, CombinedSample, FoldAssignment, Group, ObservationRow, SMALL_CELL};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorConfig, Method, TauEstimate};
use crate::gmm::{
    arm_group_ratio, fit_h_linear_gmm, fit_logistic, fit_q_loglinear_gmm, LogisticFit, OutcomeBridge, SelectionBridge,
};
use crate::linalg;
use crate::rng::{derive_seed, SplitMix64};
use crate::synthetic::discrete::{discrete_oracle_h, discrete_oracle_q, DiscreteDgp};

/// Probability clip bounds for η₄ and the group model behind η₅.
pub const CLIP: (f64, f64) = (0.01, 0.99);

fn clip(p: f64, counter: &mut usize) -> f64 {
    if p < CLIP.0 || p > CLIP.1 {
        *counter += 1;
    }
    p.clamp(CLIP.0, CLIP.1)
}

fn with_intercept(x: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(x.len() + 1);
    v.push(1.0);
    v.extend_from_slice(x);
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Nuisance values consumed by the score components.
pub trait Nuisances: Sync {
    /// η₁ at `(s3, s2, a, x)` of `r`.
    fn h(&self, r: &ObservationRow, a: u8) -> f64;
    /// η₂
    fn hbar(&self, a: u8, x: &[f64]) -> f64;
    /// η₃ at `(s2, s1, a, x)` of `r`.
    fn q(&self, r: &ObservationRow, a: u8) -> f64;
    /// η₄
    fn pa_e(&self, a: u8, x: &[f64]) -> f64;
    /// η₅
    fn odds_o(&self, x: &[f64]) -> f64;
    fn eta6(&self, a: u8) -> f64;
    fn eta7(&self) -> f64;
}

/// `[φ₁(0), φ₁(1)]` and `[φ₃(0), φ₃(1)]` on an O row.
pub fn phi_o<N: Nuisances + ?Sized>(n: &N, r: &ObservationRow) -> ([f64; 2], [f64; 2]) {
    let phi1 = [n.hbar(0, &r.x), n.hbar(1, &r.x)];
    let mut phi3 = [0.0; 2];
    let a = r.a;
    let y = r.y.expect("O rows carry y");
    phi3[a as usize] = n.eta6(a) * n.odds_o(&r.x) / n.pa_e(a, &r.x) * n.q(r, a) * (y - n.h(r, a));
    (phi1, phi3)
}

/// `[φ₂(0), φ₂(1)]` on an E row.
pub fn phi_e<N: Nuisances + ?Sized>(n: &N, r: &ObservationRow) -> [f64; 2] {
    let mut phi2 = [0.0; 2];
    let a = r.a;
    phi2[a as usize] = n.eta7() * n.odds_o(&r.x) / n.pa_e(a, &r.x) * (n.h(r, a) - n.hbar(a, &r.x));
    phi2
}

/// Group-conditional laws as weighted rows; weights sum to one per group.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedRows {
    pub e: Vec<(f64, ObservationRow)>,
    pub o: Vec<(f64, ObservationRow)>,
}

impl WeightedRows {
    /// Empirical law of a sample.
    pub fn from_sample(sample: &CombinedSample) -> Self {
        let (we, wo) = (1.0 / sample.n_e() as f64, 1.0 / sample.n_o() as f64);
        WeightedRows {
            e: sample.e_rows().map(|r| (we, r.clone())).collect(),
            o: sample.o_rows_iter().map(|r| (wo, r.clone())).collect(),
        }
    }

    /// Exact law of a discrete DGP, with `E[Y | ·]` in place of Y.
    pub fn from_discrete(dgp: &DiscreteDgp) -> Self {
        let conv = |g: Group| dgp.enumerate(g).iter().map(|p| (p.weight, p.row(g))).collect();
        WeightedRows {
            e: conv(Group::E),
            o: conv(Group::O),
        }
    }
}

/// Per-arm means of the three score components; index `[a][j]` holds
/// the mean of φⱼ₊₁ for arm a.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhiComponents {
    pub by_arm: [[f64; 3]; 2],
}

impl PhiComponents {
    pub fn mu(&self) -> [f64; 2] {
        let m = |c: &[f64; 3]| c[0] + c[1] + c[2];
        [m(&self.by_arm[0]), m(&self.by_arm[1])]
    }

    pub fn tau(&self) -> f64 {
        let mu = self.mu();
        mu[1] - mu[0]
    }
}

/// Evaluate the score-component means over a weighted law.
pub fn phi_components<N: Nuisances + ?Sized>(n: &N, law: &WeightedRows) -> PhiComponents {
    let mut c = [[0.0; 3]; 2];
    for (w, r) in &law.o {
        let (p1, p3) = phi_o(n, r);
        for a in 0..2 {
            c[a][0] += w * p1[a];
            c[a][2] += w * p3[a];
        }
    }
    for (w, r) in &law.e {
        let p2 = phi_e(n, r);
        for a in 0..2 {
            c[a][1] += w * p2[a];
        }
    }
    PhiComponents { by_arm: c }
}

/// Fitted nuisances of one cross-fitting fold.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceSet {
    pub eta1: OutcomeBridge,
    /// Per-arm coefficients of η₂ on `(1, x)`.
    pub eta2: [Vec<f64>; 2],
    pub eta3: SelectionBridge,
    /// Logistic model of `P(A=1 | x, E)` on `(1, x)`.
    pub eta4: LogisticFit,
    /// Logistic model of `P(G=O | x)` on `(1, x)`.
    pub eta5: LogisticFit,
    pub eta6: [f64; 2],
    pub eta7: f64,
}

impl Nuisances for NuisanceSet {
    fn h(&self, r: &ObservationRow, a: u8) -> f64 {
        self.eta1.eval(&r.s3, &r.s2, a, &r.x)
    }

    fn hbar(&self, a: u8, x: &[f64]) -> f64 {
        dot(&self.eta2[a as usize], &with_intercept(x))
    }

    fn q(&self, r: &ObservationRow, a: u8) -> f64 {
        self.eta3.eval(&r.s2, &r.s1, a, &r.x)
    }

    fn pa_e(&self, a: u8, x: &[f64]) -> f64 {
        let p = self.eta4.predict(&with_intercept(x)).clamp(CLIP.0, CLIP.1);
        if a == 1 {
            p
        } else {
            1.0 - p
        }
    }

    fn odds_o(&self, x: &[f64]) -> f64 {
        let p = self.eta5.predict(&with_intercept(x)).clamp(CLIP.0, CLIP.1);
        p / (1.0 - p)
    }

    fn eta6(&self, a: u8) -> f64 {
        self.eta6[a as usize]
    }

    fn eta7(&self) -> f64 {
        self.eta7
    }
}

/// O-row folds plus an analogous split of the E rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovshiftFolds {
    pub o: FoldAssignment,
    /// `labels[j]` is the fold of the j-th E row in sample order.
    pub e: FoldAssignment,
}

/// Arm-stratified shuffle and round-robin over the E rows.
pub fn split_e_folds(sample: &CombinedSample, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > sample.n_e() {
        return Err(Error::Argument(format!("K = {k} must lie in 2..={}", sample.n_e())));
    }
    let e: Vec<&ObservationRow> = sample.e_rows().collect();
    let mut rng = SplitMix64::new(seed);
    let mut labels = vec![0usize; e.len()];
    let mut next = 0usize;
    for a in [1u8, 0u8] {
        let mut arm: Vec<usize> = (0..e.len()).filter(|&j| e[j].a == a).collect();
        rng.shuffle(&mut arm);
        for j in arm {
            labels[j] = next % k + 1;
            next += 1;
        }
    }
    Ok(FoldAssignment { k, seed, labels })
}

pub fn split_covshift_folds(sample: &CombinedSample, k: usize, seed: u64) -> Result<CovshiftFolds> {
    Ok(CovshiftFolds {
        o: split_folds(sample, k, seed)?,
        e: split_e_folds(sample, k, derive_seed(seed, 1))?,
    })
}

fn fold_rows<'a>(
    sample: &'a CombinedSample,
    folds: &CovshiftFolds,
    k: usize,
    keep_fold: bool,
) -> (Vec<&'a ObservationRow>, Vec<&'a ObservationRow>) {
    let pick = |l: usize| (l == k) == keep_fold;
    let o = sample
        .o_rows_iter()
        .zip(&folds.o.labels)
        .filter(|(_, &l)| pick(l))
        .map(|(r, _)| r)
        .collect();
    let e = sample
        .e_rows()
        .zip(&folds.e.labels)
        .filter(|(_, &l)| pick(l))
        .map(|(r, _)| r)
        .collect();
    (o, e)
}

/// Least squares of `values` on `(1, x)`; tiny ridge if singular.
fn index_regression(rows: &[&ObservationRow], values: &[f64]) -> Result<Vec<f64>> {
    let p = rows[0].x.len() + 1;
    let xm = DMatrix::from_row_iterator(rows.len(), p, rows.iter().flat_map(|r| with_intercept(&r.x)));
    let y = DVector::from_column_slice(values);
    let n = rows.len() as f64;
    let xtx = xm.transpose() * &xm / n;
    let xty = xm.transpose() * y / n;
    let b = match linalg::solve_spd(&xtx, &xty) {
        Ok(b) => b,
        Err(_) => {
            log::warn!("eta2 design singular; adding ridge 1e-8");
            linalg::solve_spd(&(xtx + DMatrix::identity(p, p) * 1e-8), &xty)?
        }
    };
    Ok(b.iter().cloned().collect())
}

fn logistic_on_x(rows: &[&ObservationRow], label: impl Fn(&ObservationRow) -> bool) -> Result<LogisticFit> {
    let p = rows[0].x.len() + 1;
    let xm = DMatrix::from_row_iterator(rows.len(), p, rows.iter().flat_map(|r| with_intercept(&r.x)));
    let labels: Vec<bool> = rows.iter().map(|r| label(r)).collect();
    fit_logistic(&xm, &labels)
}

/// Fit η₁…η₇ on the training rows of fold `k`.
fn fit_fold(
    train_o: &[&ObservationRow],
    train_e: &[&ObservationRow],
    cfg: &EstimatorConfig,
) -> Result<(NuisanceSet, Vec<String>)> {
    let mut warnings = Vec::new();
    let eta1 = fit_h_linear_gmm(train_o, &cfg.basis, &cfg.gmm)?;
    let mut pooled: Vec<&ObservationRow> = train_o.to_vec();
    pooled.extend_from_slice(train_e);
    let ratios = arm_group_ratio(&pooled)?;
    let eta3 = fit_q_loglinear_gmm(&pooled, &cfg.basis, &cfg.gmm, ratios)?;
    let mut eta2 = [Vec::new(), Vec::new()];
    let mut n_e = [0usize; 2];
    let mut n_o = [0usize; 2];
    for r in train_o {
        n_o[r.a as usize] += 1;
    }
    for a in 0..2u8 {
        let rows: Vec<&ObservationRow> = train_e.iter().copied().filter(|r| r.a == a).collect();
        n_e[a as usize] = rows.len();
        if rows.is_empty() || n_o[a as usize] == 0 {
            return Err(Error::Validation(format!("empty training cell for arm {a}")));
        }
        let vals: Vec<f64> = rows.iter().map(|r| eta1.eval(&r.s3, &r.s2, a, &r.x)).collect();
        eta2[a as usize] = index_regression(&rows, &vals)?;
    }
    for a in 0..2 {
        if n_e[a].min(n_o[a]) < SMALL_CELL {
            warnings.push(format!(
                "small training cell for arm {a}: eta6 uses n_E = {}, n_O = {}",
                n_e[a], n_o[a]
            ));
        }
    }
    let eta4 = logistic_on_x(train_e, |r| r.a == 1)?;
    let eta5 = logistic_on_x(&pooled, |r| r.is_o())?;
    warnings.extend(eta4.warnings.iter().map(|w| format!("eta4: {w}")));
    warnings.extend(eta5.warnings.iter().map(|w| format!("eta5: {w}")));
    let eta6 = [n_e[0] as f64 / n_o[0] as f64, n_e[1] as f64 / n_o[1] as f64];
    let eta7 = train_e.len() as f64 / train_o.len() as f64;
    Ok((
        NuisanceSet {
            eta1,
            eta2,
            eta3,
            eta4,
            eta5,
            eta6,
            eta7,
        },
        warnings,
    ))
}

/// Per-fold nuisances, each trained outside its O fold and E fold.
pub fn fit_nuisances(
    sample: &CombinedSample,
    folds: &CovshiftFolds,
    cfg: &EstimatorConfig,
) -> Result<Vec<(NuisanceSet, Vec<String>)>> {
    cfg.validate()?;
    (1..=folds.o.k)
        .into_par_iter()
        .map(|k| {
            let (o, e) = fold_rows(sample, folds, k, false);
            fit_fold(&o, &e, cfg).map_err(|err| err.in_fold(k))
        })
        .collect()
}

/// Coefficient summary and clipping counts of one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovshiftFoldSummary {
    pub fold: usize,
    pub eta2: [Vec<f64>; 2],
    pub eta4: Vec<f64>,
    pub eta5: Vec<f64>,
    pub eta6: [f64; 2],
    pub eta7: f64,
    /// Evaluation rows whose η₄ prediction was clipped.
    pub clipped_eta4: usize,
    /// Evaluation rows whose group-model prediction was clipped.
    pub clipped_eta5: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovshiftDiagnostics {
    pub per_fold: Vec<CovshiftFoldSummary>,
    /// Fold-averaged component means.
    pub components: PhiComponents,
    /// The O and E shares of the variance.
    pub variance_components: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orthogonality: Option<[f64; 7]>,
}

/// Cross-fitted covariate-shift DR estimator with plug-in variance.
pub fn tau_dr_covshift(sample: &CombinedSample, cfg: &EstimatorConfig) -> Result<TauEstimate> {
    cfg.validate()?;
    let folds = split_covshift_folds(sample, cfg.k, cfg.seed)?;
    let fits = fit_nuisances(sample, &folds, cfg)?;
    covshift_from_fits(sample, &folds, &fits)
}

/// Assemble the estimate from fitted fold nuisances.
pub fn covshift_from_fits(
    sample: &CombinedSample,
    folds: &CovshiftFolds,
    fits: &[(NuisanceSet, Vec<String>)],
) -> Result<TauEstimate> {
    let k = folds.o.k;
    let mut avg = [[0.0; 3]; 2];
    let mut summaries = Vec::with_capacity(k);
    let mut warnings = Vec::new();
    // Per-row influence parts: O rows φ₁ + φ₃ contrasts, E rows φ₂ contrasts.
    let mut o_parts = Vec::with_capacity(sample.n_o());
    let mut e_parts = Vec::with_capacity(sample.n_e());
    for (j, (n, w)) in fits.iter().enumerate() {
        let fold = j + 1;
        warnings.extend(w.iter().map(|m| format!("fold {fold}: {m}")));
        let (o, e) = fold_rows(sample, folds, fold, true);
        if o.is_empty() || e.is_empty() {
            return Err(Error::Validation("empty evaluation fold; use a smaller K".into()).in_fold(fold));
        }
        let law = WeightedRows {
            o: o.iter().map(|r| (1.0 / o.len() as f64, (*r).clone())).collect(),
            e: e.iter().map(|r| (1.0 / e.len() as f64, (*r).clone())).collect(),
        };
        let c = phi_components(n, &law);
        for a in 0..2 {
            for t in 0..3 {
                avg[a][t] += c.by_arm[a][t];
            }
        }
        let (mut c4, mut c5) = (0usize, 0usize);
        for r in &o {
            let (p1, p3) = phi_o(n, r);
            o_parts.push(p1[1] - p1[0] + p3[1] - p3[0]);
            clip(n.eta4.predict(&with_intercept(&r.x)), &mut c4);
            clip(n.eta5.predict(&with_intercept(&r.x)), &mut c5);
        }
        for r in &e {
            let p2 = phi_e(n, r);
            e_parts.push(p2[1] - p2[0]);
            clip(n.eta4.predict(&with_intercept(&r.x)), &mut c4);
            clip(n.eta5.predict(&with_intercept(&r.x)), &mut c5);
        }
        if c4 + c5 > 0 {
            log::info!("fold {fold}: probability clipping on {c4} (eta4) and {c5} (eta5) rows");
        }
        summaries.push(CovshiftFoldSummary {
            fold,
            eta2: n.eta2.clone(),
            eta4: n.eta4.coef.clone(),
            eta5: n.eta5.coef.clone(),
            eta6: n.eta6,
            eta7: n.eta7,
            clipped_eta4: c4,
            clipped_eta5: c5,
        });
    }
    for arm in avg.iter_mut() {
        for v in arm.iter_mut() {
            *v /= k as f64;
        }
    }
    let components = PhiComponents { by_arm: avg };
    let mu = components.mu();
    let mut est = TauEstimate::point(Method::DrCovshift, mu, sample);
    let tau = est.tau_hat;
    let (n_e, n_o) = (sample.n_e() as f64, sample.n_o() as f64);
    let lambda = n_e / n_o;
    let v_o = o_parts.iter().map(|v| (v - tau).powi(2)).sum::<f64>() / n_o;
    let v_e = e_parts.iter().map(|v| v * v).sum::<f64>() / n_e;
    let comp = [(1.0 + lambda) * v_o, (1.0 + lambda) / lambda * v_e];
    est = est.with_variance(comp[0] + comp[1], comp);
    est.warnings = warnings;
    est.covshift = Some(CovshiftDiagnostics {
        per_fold: summaries,
        components,
        variance_components: comp,
        orthogonality: None,
    });
    Ok(est)
}

/// Deterministic smooth perturbation direction
/// `δ(v, a) = Σᵢ sin(cᵢvᵢ + φᵢ) + sin(c_a·a + φ_a)` with seeded constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    freq: Vec<f64>,
    phase: Vec<f64>,
}

impl Direction {
    pub fn new(seed: u64, width: usize) -> Self {
        let mut rng = SplitMix64::new(seed);
        let freq = (0..=width).map(|_| 0.5 + rng.uniform()).collect();
        let phase = (0..=width).map(|_| 6.0 * rng.uniform()).collect();
        Direction { freq, phase }
    }

    pub fn eval(&self, v: &[f64], a: u8) -> f64 {
        let w = self.freq.len() - 1;
        let mut s = (self.freq[w] * a as f64 + self.phase[w]).sin();
        for (i, x) in v.iter().take(w).enumerate() {
            s += (self.freq[i] * x + self.phase[i]).sin();
        }
        s
    }
}

/// Perturbation of nuisance component `j` (1..=7) by `t·δⱼ`.
pub struct Perturbed<'a, N: Nuisances + ?Sized> {
    pub base: &'a N,
    pub component: usize,
    pub t: f64,
    pub dir: &'a Direction,
}

impl<N: Nuisances + ?Sized> Perturbed<'_, N> {
    fn bump(&self, j: usize, v: &[f64], a: u8) -> f64 {
        if self.component == j {
            self.t * self.dir.eval(v, a)
        } else {
            0.0
        }
    }
}

impl<N: Nuisances + ?Sized> Nuisances for Perturbed<'_, N> {
    fn h(&self, r: &ObservationRow, a: u8) -> f64 {
        self.base.h(r, a) + self.bump(1, &[&r.s3[..], &r.s2, &r.x].concat(), a)
    }

    fn hbar(&self, a: u8, x: &[f64]) -> f64 {
        self.base.hbar(a, x) + self.bump(2, x, a)
    }

    fn q(&self, r: &ObservationRow, a: u8) -> f64 {
        self.base.q(r, a) + self.bump(3, &[&r.s2[..], &r.s1, &r.x].concat(), a)
    }

    fn pa_e(&self, a: u8, x: &[f64]) -> f64 {
        self.base.pa_e(a, x) + self.bump(4, x, a)
    }

    fn odds_o(&self, x: &[f64]) -> f64 {
        self.base.odds_o(x) + self.bump(5, x, 0)
    }

    fn eta6(&self, a: u8) -> f64 {
        self.base.eta6(a) + self.bump(6, &[], a)
    }

    fn eta7(&self) -> f64 {
        self.base.eta7() + self.bump(7, &[], 0)
    }
}

/// Default step sizes; each `t` is used as `±t`.
pub const DEFAULT_T_GRID: [f64; 2] = [0.05, 0.025];

/// Central-difference derivative of `f` at 0 over `±t` for each `t` in the
/// grid, Richardson-combined over the two smallest steps.
pub fn central_derivative(f: impl Fn(f64) -> f64, t_grid: &[f64]) -> f64 {
    let mut ts: Vec<f64> = t_grid.iter().map(|t| t.abs()).filter(|t| *t > 0.0).collect();
    ts.sort_by(|a, b| b.partial_cmp(a).expect("finite steps"));
    ts.dedup();
    let d = |t: f64| (f(t) - f(-t)) / (2.0 * t);
    match ts.len() {
        0 => f64::NAN,
        1 => d(ts[0]),
        n => {
            let (t1, t2) = (ts[n - 2], ts[n - 1]);
            let (d1, d2) = (d(t1), d(t2));
            (t1 * t1 * d2 - t2 * t2 * d1) / (t1 * t1 - t2 * t2)
        }
    }
}

/// Pathwise derivative of the Φ map (the τ contrast of the component
/// means) along a seeded direction in each nuisance component.
pub fn orthogonality_check<N: Nuisances + ?Sized>(law: &WeightedRows, base: &N, seed: u64, t_grid: &[f64]) -> [f64; 7] {
    let width = law
        .o
        .first()
        .map_or(0, |(_, r)| r.s3.len() + r.s2.len() + r.x.len().max(r.s1.len()));
    let mut out = [0.0; 7];
    for (j, slot) in out.iter_mut().enumerate() {
        let dir = Direction::new(derive_seed(seed, j as u64), width.max(1));
        *slot = central_derivative(
            |t| {
                let p = Perturbed {
                    base,
                    component: j + 1,
                    t,
                    dir: &dir,
                };
                phi_components(&p, law).tau()
            },
            t_grid,
        );
    }
    out
}

/// The plain plug-in contrast `Σ_a ± E_O[η₂(a, X)]` perturbed along
/// `δ(1, x) = 1`, `δ(0, x) = −1`. Its derivative is 2, showing the check
/// detects a non-orthogonal map.
pub fn contrast_derivative<N: Nuisances + ?Sized>(law: &WeightedRows, base: &N, t_grid: &[f64]) -> f64 {
    let f = |t: f64| {
        let mut s = 0.0;
        for (w, r) in &law.o {
            s += w * ((base.hbar(1, &r.x) + t) - (base.hbar(0, &r.x) - t));
        }
        s
    };
    central_derivative(f, t_grid)
}

/// Exact nuisances of a discrete DGP.
#[derive(Debug, Clone)]
pub struct DiscreteOracle {
    pub dgp: DiscreteDgp,
    pub h: OutcomeBridge,
    pub q: SelectionBridge,
    /// `η₂` indexed `[a][x]`.
    pub hbar: [Vec<f64>; 2],
}

impl DiscreteOracle {
    pub fn new(dgp: &DiscreteDgp) -> Result<Self> {
        dgp.validate()?;
        let h = discrete_oracle_h(dgp)?;
        let q = discrete_oracle_q(dgp)?;
        let mut hbar = [vec![0.0; dgp.m_x], vec![0.0; dgp.m_x]];
        for p in dgp.enumerate(Group::E) {
            let v = h.eval(&[p.s3 as f64], &[p.s2 as f64], p.a, &[p.x as f64]);
            hbar[p.a as usize][p.x] += p.weight * v;
        }
        for a in 0..2u8 {
            for x in 0..dgp.m_x {
                hbar[a as usize][x] /= dgp.p_x_e(x) * dgp.p_a_e(a, x);
            }
        }
        Ok(DiscreteOracle {
            dgp: dgp.clone(),
            h,
            q,
            hbar,
        })
    }

    fn p_o(&self) -> f64 {
        1.0 - self.dgp.p_group_e
    }
}

impl Nuisances for DiscreteOracle {
    fn h(&self, r: &ObservationRow, a: u8) -> f64 {
        self.h.eval(&r.s3, &r.s2, a, &r.x)
    }

    fn hbar(&self, a: u8, x: &[f64]) -> f64 {
        self.hbar[a as usize][x[0] as usize]
    }

    fn q(&self, r: &ObservationRow, a: u8) -> f64 {
        self.q.eval(&r.s2, &r.s1, a, &r.x)
    }

    fn pa_e(&self, a: u8, x: &[f64]) -> f64 {
        self.dgp.p_a_e(a, x[0] as usize)
    }

    fn odds_o(&self, x: &[f64]) -> f64 {
        let x = x[0] as usize;
        self.p_o() * self.dgp.p_x_o(x) / (self.dgp.p_group_e * self.dgp.p_x_e(x))
    }

    fn eta6(&self, a: u8) -> f64 {
        self.dgp.p_group_e * self.dgp.p_a_e_marg(a) / (self.p_o() * self.dgp.p_a_o_marg(a))
    }

    fn eta7(&self) -> f64 {
        self.dgp.p_group_e / self.p_o()
    }
}
