//! Monte Carlo benchmark over confounding strength η, ridge scale λ₀ and
//! estimator, with MAE / MedAE summaries and report emission.
//!
//! Each replication draws one randomized semi-synthetic source, then for
//! every η confounds its O rows with [`biased_subsample`] using the same
//! uniforms, and runs every estimator on the result.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::covshift::tau_dr_covshift;
use crate::data::split_folds;
use crate::error::{Error, Result};
use crate::estimators::{
    cross_fit, estimate_from_fits, imputation_baseline, naive_dim, EstimatorConfig, Method, Needs,
};
use crate::gmm::{BasisSpec, GmmConfig, SelectionOffset};
use crate::rng::derive_seed;
use crate::synthetic::{
    biased_subsample, gen_semisynthetic, linear_sem_true_tau, LinearSemParams, SemiSyntheticConfig, SubsampleConfig,
};

pub const SCHEMA_VERSION: u32 = 1;

fn default_eta_grid() -> Vec<f64> {
    vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6]
}

fn default_lambda0_grid() -> Vec<f64> {
    vec![0.0, 0.33, 0.67, 1.0]
}

fn default_estimators() -> Vec<Method> {
    vec![Method::Naive, Method::Imputation, Method::Out, Method::Sel, Method::Dr]
}

fn default_gmm() -> GmmConfig {
    GmmConfig {
        selection_offset: SelectionOffset::ArmShare,
        ..GmmConfig::default()
    }
}

/// Source loosely shaped like a job-training trial: mostly treated, lower
/// education levels more common, noisy proxies, a large experiment.
fn default_dgp() -> SemiSyntheticConfig {
    let mut sem = LinearSemParams::confounded_default();
    sem.s1.sigma = 1.0;
    sem.s3.sigma = 1.0;
    sem.sigma_y = 0.5;
    sem.gamma_y = vec![1.5];
    SemiSyntheticConfig {
        sem,
        levels: 3,
        p_treat: 0.8,
        u_probs: vec![0.4, 0.3, 0.2, 0.1],
    }
}

fn default_floor() -> f64 {
    0.2
}

fn default_k() -> usize {
    5
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

fn default_replications() -> usize {
    1000
}

fn default_n_o() -> usize {
    6000
}

fn default_n_e() -> usize {
    12000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    /// Randomized source population; its SEM fixes the true τ.
    #[serde(default = "default_dgp")]
    pub dgp: SemiSyntheticConfig,
    /// O rows drawn before subsampling.
    #[serde(default = "default_n_o")]
    pub n_o: usize,
    #[serde(default = "default_n_e")]
    pub n_e: usize,
    #[serde(default = "default_floor")]
    pub subsample_floor: f64,
    #[serde(default = "default_eta_grid")]
    pub eta_grid: Vec<f64>,
    #[serde(default = "default_lambda0_grid")]
    pub lambda0_grid: Vec<f64>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Method>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Worker threads; 0 uses the rayon default.
    #[serde(default)]
    pub workers: usize,
    /// Solver settings; `ridge_scale` is overridden by each λ₀.
    #[serde(default = "default_gmm")]
    pub gmm: GmmConfig,
    #[serde(default)]
    pub basis: BasisSpec,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be >= 1".into()));
        }
        if self.eta_grid.is_empty() || self.lambda0_grid.is_empty() || self.estimators.is_empty() {
            return Err(Error::Config(
                "eta grid, lambda0 grid and estimator list must be non-empty".into(),
            ));
        }
        if self.eta_grid.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return Err(Error::Config("eta values must be finite and >= 0".into()));
        }
        if self.lambda0_grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("lambda0 values must be finite and >= 0".into()));
        }
        if self.n_o == 0 || self.n_e == 0 {
            return Err(Error::Config("sample sizes must be positive".into()));
        }
        self.dgp.validate()?;
        SubsampleConfig {
            floor: self.subsample_floor,
            ..SubsampleConfig::new(0.0, 0)
        }
        .validate()
        .map_err(|e| Error::Config(e.to_string()))?;
        self.gmm.validate()?;
        let mut seen = Vec::new();
        for m in &self.estimators {
            if seen.contains(m) {
                return Err(Error::Config(format!("estimator {m} listed twice")));
            }
            seen.push(*m);
        }
        self.estimator_config(0.0, 0).validate()
    }

    /// Parse a config file; unknown estimators and fields are config errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: BenchmarkConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn estimator_config(&self, lambda0: f64, seed: u64) -> EstimatorConfig {
        EstimatorConfig {
            k: self.k,
            gmm: self.gmm.with_ridge(lambda0),
            basis: self.basis.clone(),
            seed,
        }
    }

    /// Report cells in output order: for each η, the λ₀-free estimators,
    /// then each λ₀-dependent estimator across the λ₀ grid.
    fn cells(&self) -> Vec<(usize, Option<usize>, Method)> {
        let order: Vec<Method> = Method::ALL
            .iter()
            .copied()
            .filter(|m| self.estimators.contains(m))
            .collect();
        let mut out = Vec::new();
        for e in 0..self.eta_grid.len() {
            for m in order.iter().filter(|m| !uses_lambda(**m)) {
                out.push((e, None, *m));
            }
            for m in order.iter().filter(|m| uses_lambda(**m)) {
                for l in 0..self.lambda0_grid.len() {
                    out.push((e, Some(l), *m));
                }
            }
        }
        out
    }
}

fn uses_lambda(m: Method) -> bool {
    m.uses_bridges() || m == Method::DrCovshift
}

/// Summary of one (η, λ₀, estimator) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub eta: f64,
    /// `None` for estimators without a ridge.
    pub lambda0: Option<f64>,
    pub estimator: Method,
    pub mae: Option<f64>,
    pub medae: Option<f64>,
    /// `100·(err_naive − err)/err_naive` over replications where both ran.
    pub mae_improvement_pct: Option<f64>,
    pub medae_improvement_pct: Option<f64>,
    pub replications: usize,
    pub failures: usize,
    /// `|τ̂ − τ|` per replication in replication order; `None` on failure.
    pub abs_errors: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkMetadata {
    pub schema_version: u32,
    pub config_hash: String,
    pub base_seed: u64,
    /// Replication r uses `derive_seed(base_seed, r)`.
    pub seed_rule: String,
    pub true_tau: f64,
    pub replications: usize,
    pub wall_time_s: f64,
    pub crate_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub metadata: BenchmarkMetadata,
    pub cells: Vec<CellSummary>,
}

impl BenchmarkReport {
    pub fn cell(&self, eta: f64, lambda0: Option<f64>, estimator: Method) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.eta == eta && c.lambda0 == lambda0 && c.estimator == estimator)
    }

    /// Copy with the wall time zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.metadata.wall_time_s = 0.0;
        r
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn improvement(naive: f64, est: f64) -> f64 {
    100.0 * (naive - est) / naive
}

/// Absolute errors of one replication in [`BenchmarkConfig::cells`] order.
fn run_replication(cfg: &BenchmarkConfig, r: u64, tau: f64) -> Result<Vec<Option<f64>>> {
    let seed = derive_seed(cfg.base_seed, r);
    let (source, latent) = gen_semisynthetic(&cfg.dgp, cfg.n_o, cfg.n_e, derive_seed(seed, 0))?;
    let cells = cfg.cells();
    let mut out = vec![None; cells.len()];
    for (ei, &eta) in cfg.eta_grid.iter().enumerate() {
        let sub = SubsampleConfig {
            eta,
            confounder_index: 0,
            levels: cfg.dgp.levels,
            floor: cfg.subsample_floor,
            seed: derive_seed(seed, 1),
        };
        let sample = biased_subsample(&source, &latent, &sub)?.sample;
        let fold_seed = derive_seed(seed, 2);
        let has = |m: Method| cfg.estimators.contains(&m);
        let mut record = |lam: Option<usize>, m: Method, res: Result<f64>| {
            let idx = cells.iter().position(|c| *c == (ei, lam, m)).expect("cell exists");
            match res {
                Ok(t) if t.is_finite() => out[idx] = Some((t - tau).abs()),
                Ok(_) => log::warn!("replication {r}, eta {eta}: {m} returned a non-finite estimate"),
                Err(e) => log::warn!("replication {r}, eta {eta}: {m} failed: {e}"),
            }
        };
        if has(Method::Naive) {
            record(None, Method::Naive, naive_dim(&sample).map(|e| e.tau_hat));
        }
        if has(Method::Imputation) {
            record(
                None,
                Method::Imputation,
                imputation_baseline(&sample).map(|e| e.tau_hat),
            );
        }
        let bridge: Vec<Method> = [Method::Out, Method::Sel, Method::Dr]
            .into_iter()
            .filter(|m| has(*m))
            .collect();
        for (li, &lambda0) in cfg.lambda0_grid.iter().enumerate() {
            let ecfg = cfg.estimator_config(lambda0, fold_seed);
            if !bridge.is_empty() {
                let needs = Needs {
                    h: bridge.iter().any(|m| Needs::for_method(*m).h),
                    q: bridge.iter().any(|m| Needs::for_method(*m).q),
                };
                let folds = split_folds(&sample, ecfg.k, ecfg.seed)?;
                let fits = cross_fit(&sample, &folds, &ecfg, needs);
                // A failed q fit must not discard the outcome-bridge estimate.
                let out_fits = match (&fits, needs.q && bridge.contains(&Method::Out)) {
                    (Err(_), true) => Some(cross_fit(&sample, &folds, &ecfg, Needs { h: true, q: false })),
                    _ => None,
                };
                for &m in &bridge {
                    let cf = match (&out_fits, m) {
                        (Some(f), Method::Out) => f,
                        _ => &fits,
                    };
                    let res = match cf {
                        Ok(cf) => estimate_from_fits(m, &sample, cf).map(|e| e.tau_hat),
                        Err(e) => Err(Error::Solver(e.to_string())),
                    };
                    record(Some(li), m, res);
                }
            }
            if has(Method::DrCovshift) {
                record(
                    Some(li),
                    Method::DrCovshift,
                    tau_dr_covshift(&sample, &ecfg).map(|e| e.tau_hat),
                );
            }
        }
    }
    Ok(out)
}

/// Run the full grid. Results depend only on the config, not on the worker
/// count: replications are seeded independently and reduced in order.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let start = Instant::now();
    let tau = linear_sem_true_tau(&cfg.dgp.sem);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let per_rep: Vec<Vec<Option<f64>>> = pool.install(|| {
        (0..cfg.replications as u64)
            .into_par_iter()
            .map(|r| run_replication(cfg, r, tau))
            .collect::<Result<Vec<_>>>()
    })?;
    let cells = cfg.cells();
    let mut summaries = Vec::with_capacity(cells.len());
    for (ci, &(ei, li, m)) in cells.iter().enumerate() {
        let errs: Vec<Option<f64>> = per_rep.iter().map(|v| v[ci]).collect();
        let ok: Vec<f64> = errs.iter().flatten().copied().collect();
        let naive_idx = cells.iter().position(|c| *c == (ei, None, Method::Naive));
        let (mut mae_imp, mut med_imp) = (None, None);
        if let Some(ni) = naive_idx {
            let pairs: Vec<(f64, f64)> = per_rep.iter().filter_map(|v| Some((v[ni]?, v[ci]?))).collect();
            if !pairs.is_empty() {
                let nv: Vec<f64> = pairs.iter().map(|p| p.0).collect();
                let ev: Vec<f64> = pairs.iter().map(|p| p.1).collect();
                mae_imp = Some(improvement(mean(&nv), mean(&ev)));
                med_imp = Some(improvement(median(&nv), median(&ev)));
            }
        }
        summaries.push(CellSummary {
            eta: cfg.eta_grid[ei],
            lambda0: li.map(|l| cfg.lambda0_grid[l]),
            estimator: m,
            mae: (!ok.is_empty()).then(|| mean(&ok)),
            medae: (!ok.is_empty()).then(|| median(&ok)),
            mae_improvement_pct: mae_imp,
            medae_improvement_pct: med_imp,
            replications: cfg.replications,
            failures: errs.len() - ok.len(),
            abs_errors: errs,
        });
    }
    Ok(BenchmarkReport {
        config: cfg.clone(),
        metadata: BenchmarkMetadata {
            schema_version: SCHEMA_VERSION,
            config_hash: cfg.hash(),
            base_seed: cfg.base_seed,
            seed_rule: "replication r uses derive_seed(base_seed, r); streams 0 source, 1 subsample, 2 folds".into(),
            true_tau: tau,
            replications: cfg.replications,
            wall_time_s: start.elapsed().as_secs_f64(),
            crate_version: env!("CARGO_PKG_VERSION").into(),
        },
        cells: summaries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Md,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Md),
            other => Err(Error::Config(format!("unknown format '{other}' (json, csv, md)"))),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

/// Tidy CSV: one row per (η, λ₀, estimator, metric).
pub fn report_csv(report: &BenchmarkReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "eta",
        "lambda0",
        "estimator",
        "metric",
        "value",
        "improvement_pct",
        "replications",
        "failures",
    ])?;
    for c in &report.cells {
        for (metric, v, imp) in [
            ("mae", c.mae, c.mae_improvement_pct),
            ("medae", c.medae, c.medae_improvement_pct),
        ] {
            w.write_record([
                format!("{}", c.eta),
                opt(c.lambda0),
                c.estimator.to_string(),
                metric.to_string(),
                opt(v),
                opt(imp),
                c.replications.to_string(),
                c.failures.to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Markdown table with η rows split into MAE and Med sub-rows. The naive
/// column holds absolute errors; other columns hold percent improvement.
pub fn report_markdown(report: &BenchmarkReport) -> String {
    let cfg = &report.config;
    let cols: Vec<(Option<usize>, Method)> = cfg
        .cells()
        .into_iter()
        .filter(|c| c.0 == 0)
        .map(|c| (c.1, c.2))
        .collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "True τ = {:.4}; R = {}; percent improvement over naive (positive is better).\n",
        report.metadata.true_tau, cfg.replications
    );
    s.push_str("| η | |");
    for (l, m) in &cols {
        match l {
            Some(l) => {
                let _ = write!(s, " {m} λ₀={} |", cfg.lambda0_grid[*l]);
            }
            None => {
                let _ = write!(s, " {m} |");
            }
        }
    }
    s.push('\n');
    s.push_str("|---|---|");
    for _ in &cols {
        s.push_str("---|");
    }
    s.push('\n');
    for &eta in &cfg.eta_grid {
        for (label, pick) in [("MAE", 0usize), ("Med", 1)] {
            if pick == 0 {
                let _ = write!(s, "| {eta} | {label} |");
            } else {
                let _ = write!(s, "| | {label} |");
            }
            for (l, m) in &cols {
                let c = report
                    .cell(eta, l.map(|l| cfg.lambda0_grid[l]), *m)
                    .expect("cell present");
                let (v, imp) = if pick == 0 {
                    (c.mae, c.mae_improvement_pct)
                } else {
                    (c.medae, c.medae_improvement_pct)
                };
                let txt = if *m == Method::Naive {
                    v.map_or("n/a".into(), |v| format!("{v:.3}"))
                } else {
                    imp.map_or_else(|| v.map_or("n/a".into(), |v| format!("{v:.3}")), |p| format!("{p:.1}%"))
                };
                let _ = write!(s, " {txt} |");
            }
            s.push('\n');
        }
    }
    s
}

pub fn render_report(report: &BenchmarkReport, format: ReportFormat) -> Result<String> {
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(report)?,
        ReportFormat::Csv => report_csv(report)?,
        ReportFormat::Md => report_markdown(report),
    })
}

pub fn emit_report(report: &BenchmarkReport, format: ReportFormat, path: &Path) -> Result<()> {
    std::fs::write(path, render_report(report, format)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BenchmarkConfig {
        BenchmarkConfig {
            n_o: 600,
            n_e: 400,
            eta_grid: vec![0.0, 1.0],
            lambda0_grid: vec![0.0, 1.0],
            replications: 3,
            k: 2,
            base_seed: 11,
            ..BenchmarkConfig::default()
        }
    }

    #[test]
    fn defaults_match_grid() {
        let c = BenchmarkConfig::default();
        assert_eq!(c.eta_grid.len(), 9);
        assert_eq!(c.lambda0_grid, vec![0.0, 0.33, 0.67, 1.0]);
        assert_eq!(c.replications, 1000);
        c.validate().unwrap();
    }

    #[test]
    fn config_errors() {
        assert!(matches!(
            BenchmarkConfig::from_json(r#"{"estimators": ["out", "bogus"]}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            BenchmarkConfig::from_json(r#"{"replications": 0}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            BenchmarkConfig::from_json(r#"{"eta_grid": []}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            BenchmarkConfig::from_json(r#"{"schema_version": 2}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            BenchmarkConfig::from_json(r#"{"colour": 1}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_naive_replication() {
        let cfg = BenchmarkConfig {
            eta_grid: vec![0.6],
            replications: 1,
            estimators: vec![Method::Naive],
            ..tiny()
        };
        let rep = run_benchmark(&cfg).unwrap();
        assert_eq!(rep.cells.len(), 1);
        let seed = derive_seed(cfg.base_seed, 0);
        let (src, lat) = gen_semisynthetic(&cfg.dgp, cfg.n_o, cfg.n_e, derive_seed(seed, 0)).unwrap();
        let sub = SubsampleConfig {
            floor: cfg.subsample_floor,
            ..SubsampleConfig::new(0.6, derive_seed(seed, 1))
        };
        let s = biased_subsample(&src, &lat, &sub).unwrap().sample;
        let want = (naive_dim(&s).unwrap().tau_hat - rep.metadata.true_tau).abs();
        assert_eq!(rep.cells[0].abs_errors, vec![Some(want)]);
        assert_eq!(rep.cells[0].mae, Some(want));
        assert_eq!(rep.cells[0].mae_improvement_pct, Some(0.0));
    }

    #[test]
    fn deterministic_across_workers_and_round_trips() {
        let mut a = tiny();
        a.workers = 1;
        let mut b = tiny();
        b.workers = 3;
        let ra = run_benchmark(&a).unwrap();
        let rb = run_benchmark(&b).unwrap();
        assert_eq!(ra.cells, rb.cells);
        assert_eq!(ra.without_timing(), run_benchmark(&a).unwrap().without_timing());
        let json = render_report(&ra, ReportFormat::Json).unwrap();
        let back: BenchmarkReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ra);
        // Improvement is matched to naive.
        for c in &ra.cells {
            if let (Some(m), Some(p)) = (c.mae, c.mae_improvement_pct) {
                let n = ra.cell(c.eta, None, Method::Naive).unwrap().mae.unwrap();
                if c.failures == 0 {
                    assert!((p - 100.0 * (n - m) / n).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn layouts() {
        let mut cfg = tiny();
        cfg.replications = 1;
        let rep = run_benchmark(&cfg).unwrap();
        let md = report_markdown(&rep);
        let body: Vec<&str> = md.lines().filter(|l| l.starts_with("| ")).skip(1).collect();
        assert_eq!(body.len(), 2 * cfg.eta_grid.len());
        assert_eq!(
            body.iter().filter(|l| l.contains("| MAE |")).count(),
            cfg.eta_grid.len()
        );
        let csv = report_csv(&rep).unwrap();
        // 2 λ₀-free estimators + 3 bridge estimators × 2 λ₀, times 2 η and 2 metrics.
        assert_eq!(csv.lines().count() - 1, (2 + 3 * 2) * 2 * 2);
        assert_eq!(rep.cells.len(), (2 + 3 * 2) * 2);
    }

    #[test]
    fn hash_tracks_config() {
        let a = tiny();
        let mut b = tiny();
        assert_eq!(a.hash(), b.hash());
        b.base_seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
