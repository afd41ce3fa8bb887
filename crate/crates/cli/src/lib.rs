//! `rca` command-line driver.
//!
//! Exit codes: 0 on success, 1 on internal failure, 2 on usage or schema
//! errors (bad flags, missing or malformed inputs).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Axis;
use serde::Serialize;
use thiserror::Error;

use rca_core::analysis::{self, AnalysisError, SweepSpec};
use rca_core::attn::{aggregate, apply_rca, AttentionStack, AttnError, RcaConfig, Scheme};
use rca_core::dumpio::{self, AttentionDump, DatasetCounts, DatasetError, DumpError, DumpManifest};
use rca_core::fitap::{self, detections_from_responses, EvalError, EvalReport, ThresholdLadder};
use rca_core::report;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Attention(#[from] AttnError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Dataset(_) | CliError::Eval(_) => 2,
            CliError::Dump(DumpError::Io { .. }) => 1,
            CliError::Dump(_) => 2,
            CliError::Analysis(
                AnalysisError::Config(_)
                | AnalysisError::GridTooSmall(_)
                | AnalysisError::TooFewDumps(_)
                | AnalysisError::MissingHidden { .. },
            ) => 2,
            CliError::Analysis(AnalysisError::Dump(DumpError::Io { .. })) => 1,
            CliError::Analysis(AnalysisError::Dump(_)) => 2,
            CliError::Analysis(_) => 1,
            CliError::Attention(_) => 2,
            CliError::Write { .. } | CliError::Internal(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "rca", version, about = "Reverse contrast attention and FitAP evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Apply RCA to a dump, recompute hidden states and export both maps as CSV.
    Transform(TransformArgs),
    /// Score free-form detection responses against COCO-style ground truth.
    Evaluate(EvaluateArgs),
    /// Synthetic experiments around the flooring bound.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Inverse,
    Gaussian,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Inverse => Scheme::InverseDistance,
            SchemeArg::Gaussian => Scheme::Gaussian,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RcaArgs {
    #[arg(long, value_enum, default_value = "inverse")]
    pub scheme: SchemeArg,
    #[arg(long, default_value_t = RcaConfig::DEFAULT_GAMMA)]
    pub gamma: f64,
    /// Explicit central value; derived from the attention stack when absent.
    #[arg(long)]
    pub m: Option<f64>,
}

impl RcaArgs {
    fn config(&self, theta: f64) -> RcaConfig {
        let cfg = RcaConfig::new(self.scheme.into(), theta).with_gamma(self.gamma);
        match self.m {
            Some(m) => cfg.with_central_value(m),
            None => cfg,
        }
    }
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[arg(long)]
    pub dump: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub rca: RcaArgs,
    /// Flooring threshold stored with the output; defaults to the input's hint, else 0.
    #[arg(long, allow_hyphen_values = true)]
    pub theta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// COCO-style ground truth JSON.
    #[arg(long)]
    pub gt: PathBuf,
    /// JSON-lines model responses.
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `start:step:stop` or a comma list.
    #[arg(long, default_value = "0.5:0.05:0.95")]
    pub thresholds: String,
    /// Skip the per-(category, threshold) curve files.
    #[arg(long)]
    pub no_curves: bool,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Sharpness sweep over the synthetic family.
    Sweep(SweepArgs),
    /// Randomized audit of the flooring lower bound.
    Audit(AuditArgs),
    /// Correlate m with |S| over a manifest of dumps.
    Correlate(CorrelateArgs),
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SweepSpec::DEFAULT_TAU_RANGE.0)]
    pub tau_min: f64,
    #[arg(long, default_value_t = SweepSpec::DEFAULT_TAU_RANGE.1)]
    pub tau_max: f64,
    #[arg(long, default_value_t = 20)]
    pub tau_points: usize,
    #[arg(long, default_value_t = 50)]
    pub seeds: usize,
    #[arg(long, default_value_t = 64)]
    pub tokens: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub dims: usize,
    #[arg(long, default_value_t = -1.5, allow_hyphen_values = true)]
    pub theta: f64,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub scheme: SchemeArg,
    #[arg(long, default_value_t = SweepSpec::DEFAULT_GAMMA)]
    pub gamma: f64,
    /// Query token to count |S| on; defaults to the last.
    #[arg(long)]
    pub token: Option<usize>,
    /// Also write one RCAD dump per instance plus a manifest.
    #[arg(long)]
    pub emit_dumps: bool,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// Manifest JSON; dump paths are resolved relative to its directory.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the first dump's theta hint.
    #[arg(long, allow_hyphen_values = true)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub token: Option<usize>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    write_file(path, json + "\n")
}

/// Keeps `[A-Za-z0-9_-]`, maps everything else to `_`.
pub fn file_stem(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Transform(args) => cmd_transform(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Analyze(AnalyzeCommand::Sweep(args)) => cmd_sweep(&args),
        Command::Analyze(AnalyzeCommand::Audit(args)) => cmd_audit(&args),
        Command::Analyze(AnalyzeCommand::Correlate(args)) => cmd_correlate(&args),
    }
}

#[derive(Debug, Serialize)]
struct TransformSummary {
    input: String,
    scheme: Scheme,
    gamma: f64,
    m: f64,
    theta: f64,
    tokens: usize,
    heads: usize,
    hidden_recomputed: bool,
}

/// Output dump holds the RCA map as a single head; values are carried over
/// and hidden states recomputed from them when present.
pub fn cmd_transform(args: &TransformArgs) -> Result<()> {
    let dump = dumpio::read_dump(&args.dump)?;
    let theta = args.theta.or(dump.theta_hint).unwrap_or(0.0);
    let cfg = args.rca.config(theta);
    let stack = dump.stack()?;
    let m = cfg.resolve_central_value(&stack);
    let rca = apply_rca(&stack, &cfg)?;
    let values = dump.value_matrix().transpose()?;
    let hidden = values.as_ref().map(|v| aggregate(&rca, v)).transpose()?;
    if hidden.is_none() {
        log::warn!("{} carries no value matrix; output has no hidden states", args.dump.display());
    }

    let rca_stack = AttentionStack::new(rca.weights().clone().insert_axis(Axis(0)))?;
    let mut out = AttentionDump::from_arrays(dump.image_id, dump.category.clone(), &rca_stack, values.as_ref(), hidden.as_ref())
        .with_theta_hint(theta);
    out.metadata = dump.metadata.clone();
    out = out
        .with_metadata("rca.scheme", cfg.scheme.to_string())
        .with_metadata("rca.gamma", cfg.gamma.to_string())
        .with_metadata("rca.m", m.to_string());

    create_dir(&args.out)?;
    dumpio::write_dump(&out, args.out.join("rca.rcad"))?;
    write_file(&args.out.join("attention_headmax.csv"), report::matrix_csv(&stack.head_max()))?;
    write_file(&args.out.join("attention_rca.csv"), report::matrix_csv(rca.weights()))?;
    write_json(
        &args.out.join("transform.json"),
        &TransformSummary {
            input: args
                .dump
                .file_name()
                .map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
            scheme: cfg.scheme,
            gamma: cfg.gamma,
            m,
            theta,
            tokens: stack.tokens(),
            heads: stack.heads(),
            hidden_recomputed: hidden.is_some(),
        },
    )?;
    println!("m = {m:.6}; wrote {}", args.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvaluateOutput<'a> {
    thresholds: String,
    counts: &'a DatasetCounts,
    detections: usize,
    report: &'a EvalReport,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let ladder: ThresholdLadder = args.thresholds.parse()?;
    let data = dumpio::load_dataset(&args.gt, &args.responses)?;
    let dets = detections_from_responses(&data.responses, &data.ground_truth);
    let report = fitap::fitap(&dets, &data.ground_truth, &ladder)?;

    create_dir(&args.out)?;
    write_json(
        &args.out.join("report.json"),
        &EvaluateOutput {
            thresholds: ladder.to_string(),
            counts: &data.counts,
            detections: dets.len(),
            report: &report,
        },
    )?;
    write_file(&args.out.join("thresholds.csv"), report::threshold_csv(&report))?;
    if !args.no_curves {
        let dir = args.out.join("curves");
        create_dir(&dir)?;
        for rec in &report.curves {
            let stem = format!("{}_{:.2}", file_stem(&rec.category), rec.theta);
            write_file(&dir.join(format!("{stem}.csv")), report::curve_csv(rec))?;
            write_file(&dir.join(format!("{stem}.svg")), report::pr_curve_svg(rec))?;
        }
    }
    println!("FitAP = {:.4} over {} categories", report.fitap, report.per_category.len());
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    if args.tau_points < 2 {
        return Err(CliError::Usage(format!(
            "--tau-points must be at least 2, got {}",
            args.tau_points
        )));
    }
    if !(args.tau_min > 0.0 && args.tau_max > args.tau_min) {
        return Err(CliError::Usage("need 0 < --tau-min < --tau-max".into()));
    }
    let mut spec = SweepSpec::full_scale(args.seed);
    spec.base.tokens = args.tokens;
    spec.base.heads = args.heads;
    spec.base.dims = args.dims;
    spec.tau_grid = analysis::log_grid(args.tau_min, args.tau_max, args.tau_points);
    spec.seeds_per_tau = args.seeds;
    spec.theta = args.theta;
    spec.rca = RcaConfig::new(args.scheme.into(), args.theta).with_gamma(args.gamma);
    spec.token = args.token;

    let result = analysis::sharpness_sweep(&spec)?;
    create_dir(&args.out)?;
    write_file(&args.out.join("sweep.csv"), report::sweep_csv(&result))?;
    #[derive(Serialize)]
    struct Summary<'a> {
        spec: &'a SweepSpec,
        by_tau: &'a [analysis::TauSummary],
        trend: &'a Option<rca_core::stats::Correlation>,
        pearson: &'a Option<rca_core::stats::Correlation>,
    }
    write_json(
        &args.out.join("sweep_summary.json"),
        &Summary {
            spec: &spec,
            by_tau: &result.by_tau,
            trend: &result.trend,
            pearson: &result.pearson,
        },
    )?;
    let pts: Vec<(f64, f64)> = result.points.iter().map(|p| (p.m, p.s_count as f64)).collect();
    write_file(&args.out.join("scatter.svg"), report::scatter_svg("sharpness sweep", &pts))?;

    if args.emit_dumps {
        let dir = args.out.join("dumps");
        create_dir(&dir)?;
        let mut manifest = DumpManifest::default();
        for dump in analysis::sweep_dumps(&spec)? {
            manifest.add(&dir, &format!("{:06}.rcad", dump.image_id), &dump)?;
        }
        manifest.save(&dir.join("manifest.json"))?;
    }
    match &result.trend {
        Some(c) => println!("spearman(m, |S|) over tau means: r = {:.4}, p = {:.3e}", c.r, c.p),
        None => println!("spearman undefined (constant series)"),
    }
    Ok(())
}

pub fn cmd_audit(args: &AuditArgs) -> Result<()> {
    let report = analysis::audit_flooring_bound(args.instances, args.seed)?;
    create_dir(&args.out)?;
    write_json(&args.out.join("audit.json"), &report)?;
    println!(
        "{} instances, {} violations, min slack {:.3e}",
        report.instances, report.violations, report.min_slack
    );
    if report.violations > 0 {
        return Err(CliError::Internal(format!(
            "flooring bound violated on {} instances",
            report.violations
        )));
    }
    Ok(())
}

pub fn cmd_correlate(args: &CorrelateArgs) -> Result<()> {
    let manifest = DumpManifest::load(&args.manifest)?;
    let dir = args.manifest.parent().unwrap_or(Path::new("."));
    let dumps = manifest.read_all(dir)?;
    let theta = args
        .theta
        .or_else(|| dumps.first().and_then(|d| d.theta_hint))
        .ok_or_else(|| CliError::Usage("--theta is required when dumps carry no theta hint".into()))?;
    let study = analysis::correlation_study(&dumps, theta, args.token)?;
    create_dir(&args.out)?;
    write_json(&args.out.join("correlation.json"), &study.correlation)?;
    write_file(&args.out.join("scatter.csv"), report::scatter_csv(&study.rows))?;
    let pts: Vec<(f64, f64)> = study.rows.iter().map(|r| (r.m, r.s_count as f64)).collect();
    write_file(&args.out.join("scatter.svg"), report::scatter_svg("m vs |S|", &pts))?;
    println!(
        "pearson(m, |S|) = {:.4}, p = {:.3e}, n = {}",
        study.correlation.r, study.correlation.p, study.correlation.n
    );
    Ok(())
}
