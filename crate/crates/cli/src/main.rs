//! `ltbridge` command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ltbridge::bench::{render_report, run_benchmark, BenchmarkConfig, ReportFormat};
use ltbridge::covshift::{
    contrast_derivative, orthogonality_check, tau_dr_covshift, DiscreteOracle, WeightedRows, DEFAULT_T_GRID,
};
use ltbridge::data::{load_csv, save_csv, validate, Precision};
use ltbridge::estimators::{
    imputation_baseline, naive_dim, tau_dr, tau_out, tau_sel, EstimatorConfig, Method, TauEstimate,
};
use ltbridge::rng::derive_seed;
use ltbridge::synthetic::discrete::discrete_true_tau;
use ltbridge::synthetic::{
    biased_subsample, gen_discrete_dgp, gen_linear_sem, gen_semisynthetic, linear_sem_true_tau, sample_discrete,
    verify_identification, IdentificationReport, LinearSemParams, SemiSyntheticConfig, SubsampleConfig,
};

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "ltbridge",
    version,
    about = "Long-term treatment effects via bridge functions"
)]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a combined sample as CSV plus truth metadata.
    Simulate(SimulateArgs),
    /// Estimate the long-term effect from a combined-sample CSV.
    Estimate(EstimateArgs),
    /// Run the Monte Carlo benchmark grid.
    Benchmark(BenchmarkArgs),
    /// Check exact identification and orthogonality on generated discrete DGPs.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV; `<stem>.truth.json` and `<stem>.latent.csv` are written beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Confound the O rows of a semi-synthetic source by biased subsampling.
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Combined-sample CSV.
    input: PathBuf,
    /// Estimator config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "json")]
    format: ReportFormat,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "dr")]
    estimator: Method,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long = "k-folds")]
    k_folds: Option<usize>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "md")]
    format: ReportFormat,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated η grid.
    #[arg(long, value_delimiter = ',')]
    eta: Option<Vec<f64>>,
    /// Comma-separated λ₀ grid.
    #[arg(long, value_delimiter = ',')]
    lambda0: Option<Vec<f64>>,
    /// Comma-separated estimator list.
    #[arg(long, value_delimiter = ',')]
    estimator: Option<Vec<Method>>,
    #[arg(long = "k-folds")]
    k_folds: Option<usize>,
    /// Replication count override.
    #[arg(long)]
    replications: Option<usize>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

fn default_scale() -> f64 {
    1.5
}

fn default_size() -> usize {
    4000
}

/// Data source of `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Source {
    LinearSem {
        #[serde(default = "LinearSemParams::confounded_default")]
        params: LinearSemParams,
    },
    Discrete {
        m_u: usize,
        m_s: usize,
        m_x: usize,
        m_y: usize,
        #[serde(default = "default_scale")]
        scale: f64,
        #[serde(default)]
        covariate_shift: bool,
        /// Seed of the DGP tables, separate from the sampling seed.
        #[serde(default)]
        dgp_seed: u64,
    },
    Semisynthetic {
        /// Defaults to the benchmark source.
        #[serde(default = "default_semisynthetic")]
        config: SemiSyntheticConfig,
    },
}

fn default_semisynthetic() -> SemiSyntheticConfig {
    BenchmarkConfig::default().dgp
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    #[serde(default = "default_schema")]
    schema_version: u32,
    #[serde(default = "default_source")]
    source: Source,
    #[serde(default = "default_size")]
    n_o: usize,
    #[serde(default = "default_size")]
    n_e: usize,
    #[serde(default)]
    seed: u64,
}

fn default_source() -> Source {
    Source::LinearSem {
        params: LinearSemParams::confounded_default(),
    }
}

#[derive(Debug, Serialize)]
struct Truth<'a> {
    true_tau: f64,
    n_o: usize,
    n_e: usize,
    seed: u64,
    eta: Option<f64>,
    source: &'a Source,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn check_schema(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        bail!("schema_version {v} is not supported (expected {SCHEMA_VERSION})");
    }
    Ok(())
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg: SimulateConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => serde_json::from_str("{}")?,
    };
    check_schema(cfg.schema_version)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let (mut sample, mut latent, tau) = match &cfg.source {
        Source::LinearSem { params } => {
            let (s, l) = gen_linear_sem(params, cfg.n_o, cfg.n_e, cfg.seed)?;
            (s, l, linear_sem_true_tau(params))
        }
        Source::Discrete {
            m_u,
            m_s,
            m_x,
            m_y,
            scale,
            covariate_shift,
            dgp_seed,
        } => {
            let mut d = gen_discrete_dgp(*m_u, *m_s, *m_x, *m_y, *scale, *dgp_seed)?;
            if *covariate_shift {
                d = d.with_covariate_shift(derive_seed(*dgp_seed, 1));
            }
            let (s, l) = sample_discrete(&d, cfg.n_o, cfg.n_e, cfg.seed)?;
            (s, l, discrete_true_tau(&d))
        }
        Source::Semisynthetic { config } => {
            let (s, l) = gen_semisynthetic(config, cfg.n_o, cfg.n_e, cfg.seed)?;
            (s, l, linear_sem_true_tau(&config.sem))
        }
    };
    if let Some(eta) = args.eta {
        let Source::Semisynthetic { config } = &cfg.source else {
            bail!("--eta needs a semisynthetic source");
        };
        let sub = SubsampleConfig {
            levels: config.levels,
            ..SubsampleConfig::new(eta, derive_seed(cfg.seed, 1))
        };
        let o = biased_subsample(&sample, &latent, &sub)?;
        sample = o.sample;
        latent = o.latent;
    }
    save_csv(&sample, &args.out, Precision::Exact)?;
    latent.save_csv(&sibling(&args.out, ".latent.csv"))?;
    let truth = Truth {
        true_tau: tau,
        n_o: sample.n_o(),
        n_e: sample.n_e(),
        seed: cfg.seed,
        eta: args.eta,
        source: &cfg.source,
    };
    fs::write(sibling(&args.out, ".truth.json"), serde_json::to_string_pretty(&truth)?)?;
    eprintln!(
        "wrote {} rows (n_o = {}, n_e = {}), true tau = {tau}",
        sample.len(),
        sample.n_o(),
        sample.n_e()
    );
    Ok(())
}

fn run_estimator(m: Method, sample: &ltbridge::CombinedSample, cfg: &EstimatorConfig) -> ltbridge::Result<TauEstimate> {
    match m {
        Method::Out => tau_out(sample, cfg),
        Method::Sel => tau_sel(sample, cfg),
        Method::Dr => tau_dr(sample, cfg),
        Method::Naive => naive_dim(sample),
        Method::Imputation => imputation_baseline(sample),
        Method::DrCovshift => tau_dr_covshift(sample, cfg),
    }
}

fn estimate_table(e: &TauEstimate, format: ReportFormat) -> Result<String> {
    let ci = e.ci95.map(|c| (c[0].to_string(), c[1].to_string())).unwrap_or_default();
    let se = e.std_error().map(|v| v.to_string()).unwrap_or_default();
    let cells = [
        e.method.to_string(),
        e.tau_hat.to_string(),
        se,
        ci.0,
        ci.1,
        e.n_e.to_string(),
        e.n_o.to_string(),
    ];
    let head = ["estimator", "tau_hat", "std_error", "ci_low", "ci_high", "n_e", "n_o"];
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(e)? + "\n",
        ReportFormat::Csv => format!("{}\n{}\n", head.join(","), cells.join(",")),
        ReportFormat::Md => format!(
            "| {} |\n|{}\n| {} |\n",
            head.join(" | "),
            "---|".repeat(head.len()),
            cells.join(" | ")
        ),
    })
}

fn estimate(args: EstimateArgs) -> Result<()> {
    let mut cfg: EstimatorConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => EstimatorConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(l) = args.lambda0 {
        cfg.gmm.ridge_scale = l;
    }
    if let Some(k) = args.k_folds {
        cfg.k = k;
    }
    let sample = load_csv(&args.input)?;
    let report = validate(&sample)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let est = run_estimator(args.estimator, &sample, &cfg)?;
    write_output(args.out.as_deref(), &estimate_table(&est, args.format)?)
}

fn benchmark(args: BenchmarkArgs, workers: usize) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => BenchmarkConfig::load(p)?,
        None => BenchmarkConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.base_seed = s;
    }
    if let Some(v) = args.eta {
        cfg.eta_grid = v;
    }
    if let Some(v) = args.lambda0 {
        cfg.lambda0_grid = v;
    }
    if let Some(v) = args.estimator {
        cfg.estimators = v;
    }
    if let Some(k) = args.k_folds {
        cfg.k = k;
    }
    if let Some(r) = args.replications {
        cfg.replications = r;
    }
    if workers > 0 {
        cfg.workers = workers;
    }
    let report = run_benchmark(&cfg)?;
    eprintln!(
        "benchmark finished in {:.1} s (config {})",
        report.metadata.wall_time_s,
        &report.metadata.config_hash[..12]
    );
    write_output(args.out.as_deref(), &render_report(&report, args.format)?)
}

fn default_n_dgps() -> usize {
    20
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleConfig {
    #[serde(default = "default_schema")]
    schema_version: u32,
    #[serde(default = "default_n_dgps")]
    n_dgps: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_tol")]
    tolerance: f64,
}

fn default_tol() -> f64 {
    1e-8
}

#[derive(Debug, Serialize)]
struct OracleOutcome {
    identification: Vec<IdentificationReport>,
    max_one_sided_gap: f64,
    /// Share of DGPs with both-garbled DR gap above 1e-3.
    both_garbled_detected: f64,
    orthogonality: [f64; 7],
    contrast_derivative: f64,
    pass: bool,
}

fn oracle_check(args: OracleArgs) -> Result<()> {
    let mut cfg: OracleConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => serde_json::from_str("{}")?,
    };
    check_schema(cfg.schema_version)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let mut reps = Vec::with_capacity(cfg.n_dgps);
    for i in 0..cfg.n_dgps {
        let (m_u, m_s) = ([2, 3][i % 2], [3, 4][(i / 2) % 2]);
        let d = gen_discrete_dgp(m_u, m_s, 2, 3, 1.5, derive_seed(cfg.seed, i as u64))?;
        reps.push(verify_identification(&d)?);
    }
    let max_gap = reps
        .iter()
        .flat_map(|r| {
            [
                r.outcome_bridge.gap,
                r.selection_bridge.gap,
                r.dr_both_correct.gap,
                r.dr_h_garbled.gap,
                r.dr_q_garbled.gap,
            ]
        })
        .map(f64::abs)
        .fold(0.0, f64::max);
    let detected = reps.iter().filter(|r| r.dr_both_garbled.gap.abs() > 1e-3).count() as f64 / reps.len().max(1) as f64;
    let d = gen_discrete_dgp(2, 3, 3, 3, 1.5, derive_seed(cfg.seed, 1000))?
        .with_covariate_shift(derive_seed(cfg.seed, 1001));
    let oracle = DiscreteOracle::new(&d)?;
    let law = WeightedRows::from_discrete(&d);
    let orth = orthogonality_check(&law, &oracle, cfg.seed, &DEFAULT_T_GRID);
    let contrast = contrast_derivative(&law, &oracle, &DEFAULT_T_GRID);
    let pass = max_gap <= cfg.tolerance && detected >= 0.9 && orth.iter().all(|v| v.abs() <= 1e-6) && contrast > 1e-2;
    let out = OracleOutcome {
        identification: reps,
        max_one_sided_gap: max_gap,
        both_garbled_detected: detected,
        orthogonality: orth,
        contrast_derivative: contrast,
        pass,
    };
    write_output(args.out.as_deref(), &(serde_json::to_string_pretty(&out)? + "\n"))?;
    if !pass {
        bail!("oracle check failed");
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Estimate(a) => estimate(a),
        Command::Benchmark(a) => benchmark(a, cli.workers),
        Command::OracleCheck(a) => oracle_check(a),
    }
}
