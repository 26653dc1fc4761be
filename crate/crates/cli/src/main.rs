//! Command-line front end: fit one model to a CSV, run a Monte Carlo
//! experiment (by preset or config file), or merge replicate-level outputs
//! into a pooled metrics table.
//!
//! Exit codes: 0 success, 2 data or configuration error, 3 convergence or
//! inference failure. Output on stdout is deterministic for a fixed seed;
//! wall-clock information goes only to the run sidecar file.

use std::borrow::Cow;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::Serialize;

use grouped_glm::estimators::{
    AnyFit, EstimatorConfig, FitCache, bootstrap_fixed_effects, fit_estimator_cached,
};
use grouped_glm::inference::{BootstrapOptions, Correction, crse, model_based_se};
use grouped_glm::mlm::mle_hessian_se;
use grouped_glm::rng::{Role, stream_rng};
use grouped_glm::sim::{
    ExperimentConfig, InferenceKind, MetricsRow, NormalParam, aggregate_replicates,
    normal_quantile, preset, read_replicates_csv, run_experiment, set_threads,
    write_metrics_csv, write_replicates_csv,
};
use grouped_glm::{
    Error, EstimatorKind, Family, GroupedDataset, QuadratureSpec, Result, ZSpec,
};

#[derive(Parser)]
#[command(
    name = "grouped-glm",
    version,
    about = "Grouped-data GLM estimation and Monte Carlo experiments"
)]
struct Cli {
    /// Worker threads for replicate-level parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit one estimator to a CSV dataset and print a JSON report.
    Fit(FitArgs),
    /// Run a Monte Carlo experiment and write metrics + replicate CSVs.
    Simulate(SimArgs),
    /// Merge replicate-level CSVs from repeated runs into pooled metrics.
    Report(ReportArgs),
}

#[derive(Args)]
struct FitArgs {
    /// CSV with columns y, group, and covariates (an intercept is added).
    #[arg(long)]
    data: PathBuf,
    /// fe | regfe | ri-mlm | bc-ri | bc-regfe | glm
    #[arg(long)]
    estimator: String,
    /// gaussian | bernoulli | poisson
    #[arg(long)]
    family: String,
    /// none | default | crse | bootstrap
    #[arg(long, default_value = "default")]
    inference: String,
    /// Bootstrap replicates.
    #[arg(long, default_value_t = 200)]
    b: usize,
    /// Bootstrap seed (GROUPED_GLM_SEED overrides).
    #[arg(long)]
    seed: Option<u64>,
    /// Two-sided confidence level.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// none | cluster-ratio | stata
    #[arg(long, default_value = "cluster-ratio")]
    crse_correction: String,
    /// Quadrature nodes for the marginal-likelihood fits.
    #[arg(long)]
    n_nodes: Option<usize>,
    /// Covariate names given group-varying slopes (random-effect design).
    #[arg(long, value_delimiter = ',')]
    z_cols: Vec<String>,
    /// Plug-in random-effect variance for the ridge fits (otherwise taken
    /// from the companion marginal-likelihood fit).
    #[arg(long)]
    omega_sq: Option<f64>,
}

#[derive(Args)]
#[command(group = ArgGroup::new("source").required(true).args(["preset", "config"]))]
struct SimArgs {
    /// Prebuilt experiment name (see --list-presets).
    #[arg(long)]
    preset: Option<String>,
    /// Cut replicate and bootstrap counts to smoke-test scale.
    #[arg(long)]
    fast: bool,
    /// Experiment config JSON (same schema as --print-config emits).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Output file stem (default: preset name or config file stem).
    #[arg(long)]
    stem: Option<String>,
    /// Override the replicate count.
    #[arg(long)]
    m: Option<usize>,
    /// Override the bootstrap replicate count.
    #[arg(long)]
    b: Option<usize>,
    /// Override the seed (GROUPED_GLM_SEED overrides this in turn).
    #[arg(long)]
    seed: Option<u64>,
    /// variance | sd: reading of the scale in the generator definitions.
    #[arg(long)]
    normal_param: Option<String>,
    /// Audit first-order conditions of every converged fit.
    #[arg(long)]
    check_score: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Replicate-level CSVs to merge.
    inputs: Vec<PathBuf>,
    /// Output metrics CSV (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = set_threads(n) {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.cmd {
        Cmd::Fit(args) => run_fit(args),
        Cmd::Simulate(args) => run_simulate(args),
        Cmd::Report(args) => run_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for data/configuration problems, 3 when an estimate or interval could
/// not be produced from valid inputs.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonConvergence { .. }
        | Error::SingularSystem(_)
        | Error::BoundaryVariance { .. }
        | Error::BootstrapFailed(_) => 3,
        _ => 2,
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path)
        .map_err(|e| Error::InvalidData(format!("cannot open {}: {e}", path.display())))
}

/// Seed precedence: GROUPED_GLM_SEED beats the flag beats the default.
fn resolve_seed(flag: Option<u64>, default: u64) -> Result<u64> {
    match std::env::var("GROUPED_GLM_SEED") {
        Ok(v) => v.trim().parse::<u64>().map_err(|_| {
            Error::InvalidConfig(format!("GROUPED_GLM_SEED must be an unsigned integer, got '{v}'"))
        }),
        Err(_) => Ok(flag.unwrap_or(default)),
    }
}

fn parse_estimator(s: &str) -> Result<EstimatorKind> {
    match s {
        "fe" => Ok(EstimatorKind::GroupFe),
        "regfe" => Ok(EstimatorKind::RegFe),
        "bc-regfe" => Ok(EstimatorKind::BcRegFe),
        "glm" | "pooled" => Ok(EstimatorKind::PooledGlm),
        other => EstimatorKind::from_str(other).map_err(|_| {
            Error::InvalidConfig(format!(
                "unknown estimator '{other}' (expected fe, regfe, ri-mlm, bc-ri, bc-regfe, or glm)"
            ))
        }),
    }
}

fn parse_family(s: &str) -> Result<Family> {
    match s {
        "gaussian" => Ok(Family::Gaussian),
        "bernoulli" => Ok(Family::Bernoulli),
        "poisson" => Ok(Family::Poisson),
        other => Err(Error::InvalidConfig(format!(
            "unknown family '{other}' (expected gaussian, bernoulli, or poisson)"
        ))),
    }
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CoefReport {
    name: String,
    estimate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    se: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ci_lower: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ci_upper: Option<f64>,
}

#[derive(Serialize)]
struct EffectColumn {
    name: String,
    /// Summaries over finite effects; separated groups are listed in the
    /// diagnostics instead.
    min: f64,
    median: f64,
    max: f64,
}

#[derive(Serialize)]
struct GroupEffectReport {
    n_groups: usize,
    columns: Vec<EffectColumn>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pinned_group: Option<String>,
    boundary: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    omega_sq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma_sq: Option<f64>,
}

#[derive(Serialize)]
struct DiagnosticsReport {
    converged: bool,
    iterations: usize,
    n_obs: usize,
    n_groups: usize,
    /// Groups contributing a single observation.
    singleton_groups: Vec<String>,
    /// Groups whose unpenalized effect diverged (perfect separation).
    separated_groups: Vec<String>,
    /// Design columns removed before fitting; the builder rejects
    /// rank-deficient designs instead of silently dropping, so this is
    /// empty on success.
    dropped_columns: Vec<String>,
}

#[derive(Serialize)]
struct InferenceReport {
    method: String,
    level: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    correction: Option<String>,
    /// Small-sample factor applied to the sandwich.
    #[serde(skip_serializing_if = "Option::is_none")]
    c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    b: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    boot_failures: Option<usize>,
}

#[derive(Serialize)]
struct FitReport {
    estimator: &'static str,
    family: &'static str,
    coefficients: Vec<CoefReport>,
    group_effects: GroupEffectReport,
    diagnostics: DiagnosticsReport,
    inference: InferenceReport,
}

fn run_fit(args: FitArgs) -> Result<()> {
    let estimator = parse_estimator(&args.estimator)?;
    let family = parse_family(&args.family)?;
    let inference = InferenceKind::from_str(&args.inference)?;
    let correction = Correction::from_str(&args.crse_correction)?;
    if estimator == EstimatorKind::RiMlm && inference == InferenceKind::Crse {
        return Err(Error::InvalidConfig(
            "cluster-robust standard errors are not supported for ri-mlm: \
             the sandwich applies to estimators with per-group parameters; \
             use default or bootstrap inference"
                .into(),
        ));
    }
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(Error::InvalidConfig(format!("level {} outside (0, 1)", args.level)));
    }
    let seed = resolve_seed(args.seed, 0)?;

    let mut ds = GroupedDataset::from_csv(open(&args.data)?, family, ZSpec::InterceptOnly)?;
    if !args.z_cols.is_empty() {
        let mut cols = Vec::new();
        for name in &args.z_cols {
            let j = ds
                .col_names()
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::InvalidConfig(format!("no covariate named '{name}'")))?;
            cols.push(j);
        }
        ds = ds.with_z_spec(ZSpec::WithColumns(cols))?;
    }

    let mut cfg = EstimatorConfig::new(estimator, family);
    if let Some(n) = args.n_nodes {
        cfg.quad = QuadratureSpec { n_nodes: n, ..QuadratureSpec::default() };
    }
    cfg.omega_sq = args.omega_sq;

    let mut cache = FitCache::default();
    let fit = fit_estimator_cached(&ds, &cfg, &mut cache)?;
    let design: Cow<'_, GroupedDataset> = match fit.augment_info() {
        Some(info) => match &cache.augmented {
            Some((aug, _)) => Cow::Borrowed(aug),
            None => Cow::Owned(ds.apply_augmentation(info)?),
        },
        None => Cow::Borrowed(&ds),
    };

    let estimates = fit.fixed_all();
    let names = design.col_names();
    let z = normal_quantile(1.0 - (1.0 - args.level) / 2.0);
    let mut coefs: Vec<CoefReport> = (0..estimates.len())
        .map(|j| CoefReport {
            name: names[j].clone(),
            estimate: estimates[j],
            se: None,
            ci_lower: None,
            ci_upper: None,
        })
        .collect();

    let mut meta = InferenceReport {
        method: inference.name().to_string(),
        level: args.level,
        correction: None,
        c: None,
        b: None,
        seed: None,
        boot_failures: None,
    };
    match inference {
        InferenceKind::None => {}
        InferenceKind::Default => {
            let se = match &fit {
                AnyFit::Mlm(m) => mle_hessian_se(m)?,
                AnyFit::Irls(f) => model_based_se(&design, f)?,
            };
            for (j, c) in coefs.iter_mut().enumerate() {
                c.se = Some(se[j]);
                c.ci_lower = Some(c.estimate - z * se[j]);
                c.ci_upper = Some(c.estimate + z * se[j]);
            }
        }
        InferenceKind::Crse => {
            let f = fit.as_irls().ok_or_else(|| {
                Error::InvalidConfig("cluster-robust inference needs a per-group fit".into())
            })?;
            let out = crse(&design, f, correction)?;
            for (j, c) in coefs.iter_mut().enumerate() {
                c.se = Some(out.se[j]);
                c.ci_lower = Some(c.estimate - z * out.se[j]);
                c.ci_upper = Some(c.estimate + z * out.se[j]);
            }
            meta.correction = Some(correction.name().to_string());
            meta.c = Some(out.factor);
        }
        InferenceKind::Bootstrap => {
            let mut rng = stream_rng(seed, 0, Role::Bootstrap);
            let opts = BootstrapOptions { n_replicates: args.b, alpha: 1.0 - args.level };
            let ci = bootstrap_fixed_effects(&ds, &cfg, &cache, &opts, &mut rng)?;
            for (j, c) in coefs.iter_mut().enumerate() {
                c.ci_lower = Some(ci.lower[j]);
                c.ci_upper = Some(ci.upper[j]);
            }
            meta.b = Some(args.b);
            meta.seed = Some(seed);
            meta.boot_failures = Some(ci.n_failed);
        }
    }

    let report = FitReport {
        estimator: estimator.name(),
        family: family.name(),
        coefficients: coefs,
        group_effects: effect_report(&design, &fit),
        diagnostics: diagnostics_report(&design, &fit),
        inference: meta,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn effect_columns(ds: &GroupedDataset) -> Vec<String> {
    match ds.z_spec() {
        ZSpec::InterceptOnly => vec!["intercept".to_string()],
        ZSpec::WithColumns(cols) => {
            let mut names = vec!["intercept".to_string()];
            names.extend(cols.iter().map(|&j| ds.col_names()[j].clone()));
            names
        }
    }
}

fn effect_report(ds: &GroupedDataset, fit: &AnyFit) -> GroupEffectReport {
    let effects = fit.group_effects();
    let names = effect_columns(ds);
    let columns = (0..effects.ncols())
        .map(|j| {
            let mut v: Vec<f64> =
                (0..effects.nrows()).map(|g| effects[(g, j)]).filter(|x| x.is_finite()).collect();
            v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            let median = if v.is_empty() {
                f64::NAN
            } else if v.len() % 2 == 1 {
                v[v.len() / 2]
            } else {
                0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
            };
            EffectColumn {
                name: names.get(j).cloned().unwrap_or_else(|| format!("z{j}")),
                min: v.first().copied().unwrap_or(f64::NAN),
                median,
                max: v.last().copied().unwrap_or(f64::NAN),
            }
        })
        .collect();

    let (pinned, boundary, omega_sq, sigma_sq) = match fit {
        AnyFit::Irls(f) => (
            f.pinned.map(|g| ds.group_labels()[g].clone()),
            false,
            f.omega.as_ref().filter(|o| o.nrows() == 1).map(|o| o[(0, 0)]),
            (f.family == Family::Gaussian).then_some(f.theta_hat),
        ),
        AnyFit::Mlm(m) => (
            None,
            m.boundary,
            (m.omega.nrows() == 1).then(|| m.omega_sq()),
            (m.family == Family::Gaussian).then_some(m.theta_hat),
        ),
    };
    GroupEffectReport {
        n_groups: ds.n_groups(),
        columns,
        pinned_group: pinned,
        boundary,
        omega_sq,
        sigma_sq,
    }
}

fn diagnostics_report(ds: &GroupedDataset, fit: &AnyFit) -> DiagnosticsReport {
    let singleton_groups = (0..ds.n_groups())
        .filter(|&g| ds.group_size(g) == 1)
        .map(|g| ds.group_labels()[g].clone())
        .collect();
    let (iterations, separated) = match fit {
        AnyFit::Irls(f) => (f.iterations, f.separated.clone()),
        AnyFit::Mlm(m) => (m.iterations, Vec::new()),
    };
    DiagnosticsReport {
        converged: fit.converged(),
        iterations,
        n_obs: ds.n(),
        n_groups: ds.n_groups(),
        singleton_groups,
        separated_groups: separated.iter().map(|&g| ds.group_labels()[g].clone()).collect(),
        dropped_columns: Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RunSidecar<'a> {
    config: &'a ExperimentConfig,
    version: &'static str,
    unix_time: u64,
    wall_seconds: f64,
}

fn run_simulate(args: SimArgs) -> Result<()> {
    let (mut cfg, default_stem) = match (&args.preset, &args.config) {
        (Some(name), None) => (preset(name, args.fast)?, name.clone()),
        (None, Some(path)) => {
            let cfg: ExperimentConfig = serde_json::from_reader(open(path)?)?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "experiment".to_string());
            (cfg, stem)
        }
        _ => unreachable!("clap enforces exactly one source"),
    };
    if let Some(m) = args.m {
        cfg.m = m;
    }
    if let Some(b) = args.b {
        cfg.b = b;
    }
    cfg.seed = resolve_seed(args.seed, cfg.seed)?;
    if let Some(np) = &args.normal_param {
        cfg.normal_param = NormalParam::from_str(np)?;
    }
    if args.check_score {
        cfg.check_score = true;
    }

    if args.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }

    let started = Instant::now();
    let out = run_experiment(&cfg)?;
    let wall = started.elapsed().as_secs_f64();

    std::fs::create_dir_all(&args.out_dir)?;
    let stem = args.stem.unwrap_or(default_stem);
    let metrics_path = args.out_dir.join(format!("{stem}-metrics.csv"));
    let replicates_path = args.out_dir.join(format!("{stem}-replicates.csv"));
    let sidecar_path = args.out_dir.join(format!("{stem}-run.json"));
    write_metrics_csv(File::create(&metrics_path)?, &out.metrics)?;
    write_replicates_csv(File::create(&replicates_path)?, &out.replicates)?;
    let sidecar = RunSidecar {
        config: &cfg,
        version: env!("CARGO_PKG_VERSION"),
        unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        wall_seconds: wall,
    };
    let mut f = File::create(&sidecar_path)?;
    writeln!(f, "{}", serde_json::to_string_pretty(&sidecar)?)?;

    for r in &out.metrics {
        println!("{}", metrics_line(r));
    }
    println!("wrote {} and {}", metrics_path.display(), replicates_path.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:+.3}"))
}

fn metrics_line(r: &MetricsRow) -> String {
    format!(
        "{} G={} n={} {}/{}: bias={} rmse={} coverage={} n_ok={}{}",
        r.dgp.name(),
        r.g,
        r.n_g,
        r.estimator.name(),
        r.inference.name(),
        fmt_opt(r.bias),
        fmt_opt(r.rmse),
        r.coverage.map_or_else(|| "-".to_string(), |c| format!("{c:.3}")),
        r.n_ok,
        if r.flagged { " FLAGGED" } else { "" },
    )
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn run_report(args: ReportArgs) -> Result<()> {
    if args.inputs.is_empty() {
        return Err(Error::InvalidConfig("no input files to merge".into()));
    }
    let mut rows = Vec::new();
    for path in &args.inputs {
        let mut part = read_replicates_csv(open(path)?)?;
        rows.append(&mut part);
    }
    let metrics = aggregate_replicates(&rows)?;
    match &args.out {
        Some(path) => write_metrics_csv(File::create(path)?, &metrics)?,
        None => write_metrics_csv(std::io::stdout().lock(), &metrics)?,
    }
    Ok(())
}
