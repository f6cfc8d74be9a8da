//! Cross-fitted outcome-bridge, selection-bridge and doubly robust
//! estimators of the long-term effect, the plug-in DR variance, and the
//! naive and imputation baselines.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covshift::CovshiftDiagnostics;
use crate::data::{split_folds, CombinedSample, FoldAssignment, Group, ObservationRow};
use crate::error::{Error, Result};
use crate::gmm::{
    arm_group_ratio, fit_h_linear_gmm, fit_q_loglinear_gmm, BasisSpec, BridgeDiagnostics, GmmConfig, OutcomeBridge,
    OutcomeForm, SelectionBridge, SelectionForm,
};
use crate::linalg;

/// Normal-quantile multiplier of the 95% interval.
pub const Z95: f64 = 1.959_963_984_540_054;

fn default_k() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub gmm: GmmConfig,
    #[serde(default)]
    pub basis: BasisSpec,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            k: default_k(),
            gmm: GmmConfig::default(),
            basis: BasisSpec::default(),
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("K must be >= 2, got {}", self.k)));
        }
        self.gmm.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Out,
    Sel,
    Dr,
    Naive,
    Imputation,
    DrCovshift,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Out,
        Method::Sel,
        Method::Dr,
        Method::Naive,
        Method::Imputation,
        Method::DrCovshift,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Out => "out",
            Method::Sel => "sel",
            Method::Dr => "dr",
            Method::Naive => "naive",
            Method::Imputation => "imputation",
            Method::DrCovshift => "dr_covshift",
        }
    }

    /// Whether the method fits bridges and so depends on the ridge scale.
    pub fn uses_bridges(&self) -> bool {
        !matches!(self, Method::Naive | Method::Imputation)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown estimator '{s}' (expected one of out, sel, dr, naive, imputation, dr_covshift)"
            ))
        })
    }
}

/// Bridge diagnostics of one cross-fitting fold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldDiagnostics {
    pub fold: usize,
    pub n_train_o: usize,
    pub n_eval_o: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<BridgeDiagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<BridgeDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauEstimate {
    pub method: Method,
    pub tau_hat: f64,
    /// `[μ̂(0), μ̂(1)]`
    pub mu_hat: [f64; 2],
    pub sigma2_hat: Option<f64>,
    pub ci95: Option<[f64; 2]>,
    /// The E-sample and O-sample shares of `sigma2_hat`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance_components: Option<[f64; 2]>,
    pub n_e: usize,
    pub n_o: usize,
    #[serde(default)]
    pub per_fold: Vec<FoldDiagnostics>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covshift: Option<CovshiftDiagnostics>,
}

impl TauEstimate {
    pub(crate) fn point(method: Method, mu_hat: [f64; 2], sample: &CombinedSample) -> Self {
        TauEstimate {
            method,
            tau_hat: mu_hat[1] - mu_hat[0],
            mu_hat,
            sigma2_hat: None,
            ci95: None,
            variance_components: None,
            n_e: sample.n_e(),
            n_o: sample.n_o(),
            per_fold: Vec::new(),
            warnings: Vec::new(),
            covshift: None,
        }
    }

    /// Attach `σ̂²` and the interval `τ̂ ± 1.96·σ̂/√n` with `n = n_E + n_O`.
    pub(crate) fn with_variance(mut self, sigma2: f64, components: [f64; 2]) -> Self {
        let half = Z95 * (sigma2 / (self.n_e + self.n_o) as f64).sqrt();
        self.sigma2_hat = Some(sigma2);
        self.ci95 = Some([self.tau_hat - half, self.tau_hat + half]);
        self.variance_components = Some(components);
        self
    }

    /// Standard error `σ̂/√n`, when a variance is attached.
    pub fn std_error(&self) -> Option<f64> {
        self.sigma2_hat.map(|s| (s / (self.n_e + self.n_o) as f64).sqrt())
    }
}

/// Fitted bridges of one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldFit {
    pub h: OutcomeBridge,
    pub q: SelectionBridge,
}

/// Which bridges a cross-fit needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Needs {
    pub h: bool,
    pub q: bool,
}

impl Needs {
    pub const BOTH: Needs = Needs { h: true, q: true };

    pub fn for_method(m: Method) -> Needs {
        Needs {
            h: matches!(m, Method::Out | Method::Dr | Method::DrCovshift),
            q: matches!(m, Method::Sel | Method::Dr | Method::DrCovshift),
        }
    }
}

/// Per-fold bridges on a fixed fold assignment. Bridges that were not
/// requested are zero placeholders; callers may also overwrite any fit to
/// force a reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFit {
    pub folds: FoldAssignment,
    pub fits: Vec<FoldFit>,
    pub diagnostics: Vec<FoldDiagnostics>,
}

/// O rows in sample order paired with their fold label.
fn labelled_o_rows<'a>(
    sample: &'a CombinedSample,
    folds: &'a FoldAssignment,
) -> impl Iterator<Item = (usize, &'a ObservationRow)> {
    sample
        .o_rows_iter()
        .zip(folds.labels.iter().copied())
        .map(|(r, l)| (l, r))
}

fn check_folds(sample: &CombinedSample, folds: &FoldAssignment) -> Result<()> {
    if folds.labels.len() != sample.n_o() {
        return Err(Error::Argument(format!(
            "fold assignment covers {} O rows, sample has {}",
            folds.labels.len(),
            sample.n_o()
        )));
    }
    let mut counts = vec![[0usize; 2]; folds.k];
    for (l, r) in labelled_o_rows(sample, folds) {
        if l == 0 || l > folds.k {
            return Err(Error::Argument(format!("fold label {l} outside 1..={}", folds.k)));
        }
        counts[l - 1][r.a as usize] += 1;
    }
    for (k, c) in counts.iter().enumerate() {
        for a in 0..2 {
            if c[a] == 0 {
                return Err(Error::Fold {
                    fold: k + 1,
                    source: Box::new(Error::Validation(format!(
                        "fold has no O rows with a = {a}; use a smaller K"
                    ))),
                });
            }
        }
    }
    Ok(())
}

/// Fit the requested bridges for every fold. Fold k's outcome bridge uses
/// the O rows outside fold k; its selection bridge uses those rows plus
/// the full E sample.
pub fn cross_fit(
    sample: &CombinedSample,
    folds: &FoldAssignment,
    cfg: &EstimatorConfig,
    needs: Needs,
) -> Result<CrossFit> {
    cfg.validate()?;
    check_folds(sample, folds)?;
    let d = sample.dims();
    let results: Vec<Result<(FoldFit, FoldDiagnostics)>> = (1..=folds.k)
        .into_par_iter()
        .map(|k| {
            let train_o: Vec<&ObservationRow> = labelled_o_rows(sample, folds)
                .filter(|(l, _)| *l != k)
                .map(|(_, r)| r)
                .collect();
            let n_eval_o = sample.n_o() - train_o.len();
            let h = if needs.h {
                fit_h_linear_gmm(&train_o, &cfg.basis, &cfg.gmm).map_err(|e| e.in_fold(k))?
            } else {
                OutcomeBridge::constant(0.0, d.d3, d.d2, d.d_x)
            };
            let q = if needs.q {
                let mut pooled = train_o.clone();
                pooled.extend(sample.e_rows());
                let ratios = arm_group_ratio(&pooled).map_err(|e| e.in_fold(k))?;
                fit_q_loglinear_gmm(&pooled, &cfg.basis, &cfg.gmm, ratios).map_err(|e| e.in_fold(k))?
            } else {
                SelectionBridge::constant(0.0)
            };
            let diag = FoldDiagnostics {
                fold: k,
                n_train_o: train_o.len(),
                n_eval_o,
                h: needs.h.then(|| h.diagnostics.clone()),
                q: needs.q.then(|| q.diagnostics.clone()),
            };
            Ok((FoldFit { h, q }, diag))
        })
        .collect();
    let mut fits = Vec::with_capacity(folds.k);
    let mut diagnostics = Vec::with_capacity(folds.k);
    for r in results {
        let (f, d) = r?;
        fits.push(f);
        diagnostics.push(d);
    }
    Ok(CrossFit {
        folds: folds.clone(),
        fits,
        diagnostics,
    })
}

fn finite(v: f64, what: &str, fold: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Validation(format!(
            "{what} is not finite on an evaluation row (a tabular bridge may lack a cell seen only in this fold)"
        ))
        .in_fold(fold))
    }
}

/// Per-fold, per-arm components of the cross-fitted estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldTerms {
    /// `(1/n_E^(a)) Σ_E 1{A=a} ĥ_k`
    pub out: Vec<[f64; 2]>,
    /// `(1/n_{O,k}^(a)) Σ_{O,k} 1{A=a} q̂_k Y`
    pub sel: Vec<[f64; 2]>,
    /// `(1/n_{O,k}^(a)) Σ_{O,k} 1{A=a} q̂_k (Y − ĥ_k)`
    pub resid: Vec<[f64; 2]>,
    pub warnings: Vec<String>,
}

/// Evaluate every fold's components on its evaluation rows.
pub fn fold_terms(sample: &CombinedSample, cf: &CrossFit) -> Result<FoldTerms> {
    let k = cf.folds.k;
    let mut out = vec![[0.0; 2]; k];
    let mut sel = vec![[0.0; 2]; k];
    let mut resid = vec![[0.0; 2]; k];
    let mut warnings = Vec::new();
    let n_e = [sample.arm_count(Group::E, 0), sample.arm_count(Group::E, 1)];
    for (j, fit) in cf.fits.iter().enumerate() {
        let fold = j + 1;
        let mut s = [0.0; 2];
        for r in sample.e_rows() {
            s[r.a as usize] += finite(fit.h.eval(&r.s3, &r.s2, r.a, &r.x), "h", fold)?;
        }
        out[j] = [s[0] / n_e[0] as f64, s[1] / n_e[1] as f64];
        let mut sy = [0.0; 2];
        let mut sr = [0.0; 2];
        let mut n = [0usize; 2];
        let mut nonpositive = 0usize;
        for (_, r) in labelled_o_rows(sample, &cf.folds).filter(|(l, _)| *l == fold) {
            let a = r.a as usize;
            let y = r.y.expect("O rows carry y");
            let q = finite(fit.q.eval_row(r), "q", fold)?;
            let h = finite(fit.h.eval_row(r), "h", fold)?;
            if q <= 0.0 && !matches!(fit.q.form, SelectionForm::Constant { .. }) {
                nonpositive += 1;
            }
            sy[a] += q * y;
            sr[a] += q * (y - h);
            n[a] += 1;
        }
        if nonpositive > 0 && matches!(fit.q.form, SelectionForm::Table { .. }) {
            warnings.push(format!(
                "fold {fold}: tabular q is nonpositive on {nonpositive} evaluation rows"
            ));
        }
        sel[j] = [sy[0] / n[0] as f64, sy[1] / n[1] as f64];
        resid[j] = [sr[0] / n[0] as f64, sr[1] / n[1] as f64];
    }
    Ok(FoldTerms {
        out,
        sel,
        resid,
        warnings,
    })
}

fn fold_average(v: impl Iterator<Item = [f64; 2]>, k: usize) -> [f64; 2] {
    let mut s = [0.0; 2];
    for t in v {
        s[0] += t[0];
        s[1] += t[1];
    }
    [s[0] / k as f64, s[1] / k as f64]
}

/// Plug-in DR variance from cross-fitted bridges. E rows use the fold
/// average of `ĥ_k`; O rows use the bridges of their own fold. Returns
/// `(σ̂², [E share, O share])`.
pub fn dr_variance(sample: &CombinedSample, cf: &CrossFit, mu_hat: [f64; 2]) -> Result<(f64, [f64; 2])> {
    let (n_e, n_o) = (sample.n_e() as f64, sample.n_o() as f64);
    let lambda = n_e / n_o;
    let p_e = sample.arm_count(Group::E, 1) as f64 / n_e;
    let p_o = sample.arm_count(Group::O, 1) as f64 / n_o;
    let k = cf.folds.k as f64;
    let mut se = 0.0;
    for r in sample.e_rows() {
        let mut hbar = 0.0;
        for f in &cf.fits {
            hbar += f.h.eval(&r.s3, &r.s2, r.a, &r.x);
        }
        hbar /= k;
        let a = r.a as f64;
        let v = (a - p_e) / (p_e * (1.0 - p_e)) * (hbar - mu_hat[r.a as usize]);
        se += v * v;
    }
    let mut so = 0.0;
    for (l, r) in labelled_o_rows(sample, &cf.folds) {
        let f = &cf.fits[l - 1];
        let a = r.a as f64;
        let v = (a - p_o) / (p_o * (1.0 - p_o)) * f.q.eval_row(r) * (r.y.expect("O rows carry y") - f.h.eval_row(r));
        so += v * v;
    }
    let c_e = (1.0 + lambda) / lambda * se / n_e;
    let c_o = (1.0 + lambda) * so / n_o;
    if !(c_e + c_o).is_finite() {
        return Err(Error::Validation("variance estimate is not finite".into()));
    }
    Ok((c_e + c_o, [c_e, c_o]))
}

/// Assemble a cross-fitted estimate from (possibly overridden) bridges.
pub fn estimate_from_fits(method: Method, sample: &CombinedSample, cf: &CrossFit) -> Result<TauEstimate> {
    let t = fold_terms(sample, cf)?;
    let k = cf.folds.k;
    let mu = match method {
        Method::Out => fold_average(t.out.iter().copied(), k),
        Method::Sel => fold_average(t.sel.iter().copied(), k),
        Method::Dr => fold_average(t.out.iter().zip(&t.resid).map(|(o, r)| [o[0] + r[0], o[1] + r[1]]), k),
        other => return Err(Error::Argument(format!("{other} is not a bridge-based estimator"))),
    };
    let mut est = TauEstimate::point(method, mu, sample);
    est.per_fold = cf.diagnostics.clone();
    est.warnings = t.warnings;
    if method == Method::Dr {
        let (s2, comp) = dr_variance(sample, cf, mu)?;
        est = est.with_variance(s2, comp);
    }
    Ok(est)
}

fn run(method: Method, sample: &CombinedSample, cfg: &EstimatorConfig) -> Result<TauEstimate> {
    cfg.validate()?;
    let folds = split_folds(sample, cfg.k, cfg.seed)?;
    let cf = cross_fit(sample, &folds, cfg, Needs::for_method(method))?;
    estimate_from_fits(method, sample, &cf)
}

/// Outcome-bridge estimator: fold bridges averaged over the E sample.
pub fn tau_out(sample: &CombinedSample, cfg: &EstimatorConfig) -> Result<TauEstimate> {
    run(Method::Out, sample, cfg)
}

/// Selection-bridge estimator: weighted outcome means on held-out O folds.
pub fn tau_sel(sample: &CombinedSample, cfg: &EstimatorConfig) -> Result<TauEstimate> {
    run(Method::Sel, sample, cfg)
}

/// Doubly robust estimator with plug-in variance and 95% interval.
pub fn tau_dr(sample: &CombinedSample, cfg: &EstimatorConfig) -> Result<TauEstimate> {
    run(Method::Dr, sample, cfg)
}

/// All three bridge estimators from a single cross-fit.
pub fn tau_bridge_all(sample: &CombinedSample, cfg: &EstimatorConfig) -> Result<[TauEstimate; 3]> {
    cfg.validate()?;
    let folds = split_folds(sample, cfg.k, cfg.seed)?;
    let cf = cross_fit(sample, &folds, cfg, Needs::BOTH)?;
    Ok([
        estimate_from_fits(Method::Out, sample, &cf)?,
        estimate_from_fits(Method::Sel, sample, &cf)?,
        estimate_from_fits(Method::Dr, sample, &cf)?,
    ])
}

/// Difference of O-sample arm means.
pub fn naive_dim(sample: &CombinedSample) -> Result<TauEstimate> {
    let mut s = [0.0; 2];
    let mut n = [0usize; 2];
    for r in sample.o_rows_iter() {
        s[r.a as usize] += r.y.expect("O rows carry y");
        n[r.a as usize] += 1;
    }
    for a in 0..2 {
        if n[a] == 0 {
            return Err(Error::Validation(format!("no O rows with a = {a}")));
        }
    }
    Ok(TauEstimate::point(
        Method::Naive,
        [s[0] / n[0] as f64, s[1] / n[1] as f64],
        sample,
    ))
}

/// Ridge added when the imputation design is singular.
pub const IMPUTATION_RIDGE: f64 = 1e-8;

/// Per-arm OLS of Y on (1, S₁, S₂, S₃, X) over O, averaged over E rows of
/// the same arm.
pub fn imputation_baseline(sample: &CombinedSample) -> Result<TauEstimate> {
    let feats = |r: &ObservationRow| -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + r.s1.len() + r.s2.len() + r.s3.len() + r.x.len());
        v.push(1.0);
        v.extend_from_slice(&r.s1);
        v.extend_from_slice(&r.s2);
        v.extend_from_slice(&r.s3);
        v.extend_from_slice(&r.x);
        v
    };
    let mut warnings = Vec::new();
    let mut mu = [0.0; 2];
    for a in 0..2u8 {
        let rows: Vec<&ObservationRow> = sample.o_rows_iter().filter(|r| r.a == a).collect();
        let e: Vec<&ObservationRow> = sample.e_rows().filter(|r| r.a == a).collect();
        if rows.is_empty() || e.is_empty() {
            return Err(Error::Validation(format!("imputation needs O and E rows with a = {a}")));
        }
        let p = feats(rows[0]).len();
        let xm = DMatrix::from_row_iterator(rows.len(), p, rows.iter().flat_map(|r| feats(r)));
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.y.expect("O rows carry y")));
        let n = rows.len() as f64;
        let xtx = xm.transpose() * &xm / n;
        let xty = xm.transpose() * &y / n;
        let beta = match linalg::solve_spd(&xtx, &xty) {
            Ok(b) => b,
            Err(_) => {
                warnings.push(format!(
                    "arm {a}: singular imputation design, ridge {IMPUTATION_RIDGE:e} added"
                ));
                let reg = &xtx + DMatrix::identity(p, p) * IMPUTATION_RIDGE;
                reg.cholesky()
                    .map(|c| c.solve(&xty))
                    .ok_or_else(|| Error::Solver("imputation design singular even with ridge".into()))?
            }
        };
        let mut s = 0.0;
        for r in &e {
            s += DVector::from_vec(feats(r)).dot(&beta);
        }
        mu[a as usize] = s / e.len() as f64;
    }
    let mut est = TauEstimate::point(Method::Imputation, mu, sample);
    est.warnings = warnings;
    Ok(est)
}

/// Whether an outcome bridge is tabular.
pub fn is_tabular(h: &OutcomeBridge) -> bool {
    matches!(h.form, OutcomeForm::Table { .. })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::SelectionOffset;
    use crate::synthetic::{gen_linear_sem, linear_sem_true_tau, LinearSemParams};

    fn row(g: Group, a: u8, y: Option<f64>, s: f64) -> ObservationRow {
        ObservationRow {
            group: g,
            a,
            x: vec![s * 0.5],
            s1: vec![s],
            s2: vec![s * s],
            s3: vec![1.0 - s],
            y,
        }
    }

    #[test]
    fn naive_hand_computation() {
        let rows = vec![
            row(Group::O, 1, Some(1.0), 0.1),
            row(Group::O, 1, Some(1.0), 0.2),
            row(Group::O, 0, Some(0.0), 0.3),
            row(Group::O, 0, Some(0.0), 0.4),
            row(Group::E, 0, None, 0.5),
            row(Group::E, 1, None, 0.6),
        ];
        let s = CombinedSample::new(rows).unwrap();
        assert_eq!(naive_dim(&s).unwrap().tau_hat, 1.0);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.as_str()));
        }
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn k_below_two_rejected() {
        let cfg = EstimatorConfig {
            k: 1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn constant_bridge_gives_zero_out() {
        let p = LinearSemParams::confounded_default();
        let (s, _) = gen_linear_sem(&p, 400, 400, 3).unwrap();
        let folds = split_folds(&s, 4, 1).unwrap();
        let mut cf = cross_fit(&s, &folds, &EstimatorConfig::default(), Needs { h: false, q: false }).unwrap();
        for f in cf.fits.iter_mut() {
            f.h = OutcomeBridge::constant(2.5, 1, 1, 1);
        }
        assert_eq!(estimate_from_fits(Method::Out, &s, &cf).unwrap().tau_hat, 0.0);
    }

    #[test]
    fn dr_reductions_are_exact() {
        let p = LinearSemParams::confounded_default();
        let (s, _) = gen_linear_sem(&p, 1000, 1000, 5).unwrap();
        let mut cfg = EstimatorConfig::default();
        cfg.gmm.selection_offset = SelectionOffset::ArmShare;
        let folds = split_folds(&s, 5, 2).unwrap();
        let cf = cross_fit(&s, &folds, &cfg, Needs::BOTH).unwrap();
        let out = estimate_from_fits(Method::Out, &s, &cf).unwrap();
        let sel = estimate_from_fits(Method::Sel, &s, &cf).unwrap();
        let mut q0 = cf.clone();
        q0.fits.iter_mut().for_each(|f| f.q = SelectionBridge::constant(0.0));
        assert_eq!(estimate_from_fits(Method::Dr, &s, &q0).unwrap().mu_hat, out.mu_hat);
        let mut h0 = cf.clone();
        h0.fits
            .iter_mut()
            .for_each(|f| f.h = OutcomeBridge::constant(0.0, 1, 1, 1));
        assert_eq!(estimate_from_fits(Method::Dr, &s, &h0).unwrap().mu_hat, sel.mu_hat);
    }

    #[test]
    fn estimate_invariants() {
        let p = LinearSemParams::confounded_default();
        let (s, _) = gen_linear_sem(&p, 3000, 3000, 8).unwrap();
        let mut cfg = EstimatorConfig::default();
        cfg.gmm.selection_offset = SelectionOffset::ArmShare;
        let [o, q, d] = tau_bridge_all(&s, &cfg).unwrap();
        for e in [&o, &q, &d] {
            assert_eq!(e.tau_hat, e.mu_hat[1] - e.mu_hat[0]);
            assert_eq!(e.sigma2_hat.is_some(), e.ci95.is_some());
            assert_eq!(e.per_fold.len(), 5);
        }
        assert!(d.sigma2_hat.unwrap() > 0.0);
        let ci = d.ci95.unwrap();
        assert!(ci[0] < d.tau_hat && d.tau_hat < ci[1]);
        let tau = linear_sem_true_tau(&p);
        assert!((d.tau_hat - tau).abs() < 0.3, "dr {} vs {tau}", d.tau_hat);
        let json = serde_json::to_string(&d).unwrap();
        let back: TauEstimate = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn zero_variance_when_bridges_are_exact() {
        // Y = h on O and h equals the arm mean on E.
        let mut rows = Vec::new();
        for i in 0..8 {
            let a = (i % 2) as u8;
            rows.push(row(Group::O, a, Some(3.0 * a as f64), i as f64));
            rows.push(row(Group::E, a, None, i as f64));
        }
        let s = CombinedSample::new(rows).unwrap();
        let folds = split_folds(&s, 2, 0).unwrap();
        let mut cf = cross_fit(&s, &folds, &EstimatorConfig::default(), Needs { h: false, q: false }).unwrap();
        for f in cf.fits.iter_mut() {
            f.h = OutcomeBridge::linear([
                crate::gmm::LinearArm::constant(0.0, 1, 1, 1),
                crate::gmm::LinearArm::constant(3.0, 1, 1, 1),
            ]);
            f.q = SelectionBridge::constant(1.0);
        }
        let e = estimate_from_fits(Method::Dr, &s, &cf).unwrap();
        assert_eq!(e.sigma2_hat, Some(0.0));
        assert_eq!(e.tau_hat, 3.0);
    }

    #[test]
    fn empty_fold_cell_errors() {
        let rows = vec![
            row(Group::O, 1, Some(1.0), 0.1),
            row(Group::O, 0, Some(0.0), 0.3),
            row(Group::O, 0, Some(0.0), 0.4),
            row(Group::E, 0, None, 0.5),
            row(Group::E, 1, None, 0.6),
        ];
        let s = CombinedSample::new(rows).unwrap();
        let folds = split_folds(&s, 2, 0).unwrap();
        let err = cross_fit(&s, &folds, &EstimatorConfig::default(), Needs::BOTH).unwrap_err();
        assert!(err.to_string().contains("smaller K"), "{err}");
    }

    #[test]
    fn imputation_exact_on_linear_outcome() {
        let mut rows = Vec::new();
        for i in 0..40 {
            let a = (i % 2) as u8;
            let t = i as f64 / 7.0;
            let mut r = row(Group::O, a, None, t.sin());
            r.s2 = vec![t.cos()];
            r.s3 = vec![(1.3 * t).sin()];
            r.x = vec![t.sqrt()];
            r.y = Some(1.0 + 2.0 * a as f64 + r.s1[0] - r.s2[0] + 0.5 * r.s3[0] + r.x[0]);
            rows.push(r);
            let mut e = row(Group::E, a, None, (t + 0.3).sin());
            e.s2 = vec![(t + 0.3).cos()];
            e.s3 = vec![(1.3 * t + 0.2).sin()];
            e.x = vec![(t + 0.1).sqrt()];
            rows.push(e);
        }
        let s = CombinedSample::new(rows).unwrap();
        let est = imputation_baseline(&s).unwrap();
        let mut truth = [0.0; 2];
        for a in 0..2u8 {
            let e: Vec<_> = s.e_rows().filter(|r| r.a == a).collect();
            truth[a as usize] = e
                .iter()
                .map(|r| 1.0 + 2.0 * a as f64 + r.s1[0] - r.s2[0] + 0.5 * r.s3[0] + r.x[0])
                .sum::<f64>()
                / e.len() as f64;
        }
        assert!((est.mu_hat[0] - truth[0]).abs() < 1e-9);
        assert!((est.mu_hat[1] - truth[1]).abs() < 1e-9);
        assert!(est.warnings.is_empty());
    }

    #[test]
    fn collinear_imputation_design_uses_ridge() {
        let mut rows = Vec::new();
        for i in 0..20 {
            let a = (i % 2) as u8;
            rows.push(row(Group::O, a, Some(i as f64), i as f64 / 10.0));
            rows.push(row(Group::E, a, None, i as f64 / 10.0));
        }
        let s = CombinedSample::new(rows).unwrap();
        let est = imputation_baseline(&s).unwrap();
        assert!(est.tau_hat.is_finite());
        assert!(!est.warnings.is_empty());
    }
}
