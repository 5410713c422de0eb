//! Command-line front end: `sample`, `fit`, `audit`, `experiment`, `report`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 audit failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::audit::{audit_moments, verify_equivalence, EquivalenceReport, Verdict, MIN_EQUIVALENCE_SAMPLES};
use crate::dataio;
use crate::geometry::{PenaltyMode, UncertaintySet};
use crate::harness::{self, ExperimentConfig, LambdaPolicy};
use crate::regression::{self, CvSpec, Method, RegressionProblem};
use crate::rng::{derive_seed, seeded, short_digest};
use crate::sampling::{hit_and_run, rejection_sample, SamplerConfig};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_AUDIT: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "aurlab",
    version,
    about = "Averaged and worst-case robust regression toolkit"
)]
pub struct Cli {
    /// Seed for samplers, CV folds and experiments; overrides AURLAB_SEED and
    /// a config's master_seed [default: 0, or the config's master_seed]
    #[arg(long, global = true, env = "AURLAB_SEED", hide_env_values = true)]
    pub seed: Option<u64>,
    /// Maximum number of worker threads [default: all cores]
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Suppress the reproducibility stanza and warnings
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw uniform samples from an uncertainty set
    Sample(SampleArgs),
    /// Fit OLS, AUR or WUR to a CSV dataset
    Fit(FitArgs),
    /// Audit closed-form constants against Monte Carlo estimates
    Audit(AuditArgs),
    /// Run an experiment matrix from a JSON config
    Experiment(ExperimentArgs),
    /// Summarize a results file into plot-ready CSV
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    /// Hit-and-run random walk
    Har,
    /// Exact rejection sampling from the bounding cube (d <= 12)
    Rej,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Ols,
    Aur,
    Wur,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ols => Method::Ols,
            MethodArg::Aur => Method::Aur,
            MethodArg::Wur => Method::Wur,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Paper,
    Derived,
}

impl From<ModeArg> for PenaltyMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Paper => PenaltyMode::Paper,
            ModeArg::Derived => PenaltyMode::Derived,
        }
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Set descriptor as inline JSON or a path to a JSON file
    #[arg(long)]
    pub set: String,
    /// Number of samples
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// Sampler
    #[arg(long, value_enum, default_value_t = SamplerArg::Har)]
    pub method: SamplerArg,
    /// Hit-and-run steps discarded before the first sample
    #[arg(long, default_value_t = 1000)]
    pub burn_in: usize,
    /// Hit-and-run steps between kept samples
    #[arg(long, default_value_t = 10)]
    pub thinning: usize,
    /// Output CSV, one flattened sample per row [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Input CSV with a header row
    #[arg(long)]
    pub data: PathBuf,
    /// Target column [default: last column]
    #[arg(long)]
    pub target: Option<String>,
    /// Estimator
    #[arg(long, value_enum, default_value_t = MethodArg::Aur)]
    pub method: MethodArg,
    /// Fixed penalty
    #[arg(long, conflicts_with_all = ["cv", "set"])]
    pub lambda: Option<f64>,
    /// Choose the penalty by k-fold cross-validation over 0, 0.05, ..., 1
    #[arg(long, conflicts_with = "set")]
    pub cv: bool,
    /// Number of cross-validation folds
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Derive the penalty from this set; its n and k are taken from the data
    #[arg(long)]
    pub set: Option<String>,
    /// Penalty constants used with --set
    #[arg(long, value_enum, default_value_t = ModeArg::Derived)]
    pub mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// Set descriptor as inline JSON or a path to a JSON file
    #[arg(long)]
    pub set: String,
    /// Monte Carlo sample count
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    /// CSV problem for the equivalence check; the set's n and k follow the
    /// data [default: a seeded Gaussian problem]
    #[arg(long)]
    pub problem: Option<PathBuf>,
    /// Target column of --problem [default: last column]
    #[arg(long)]
    pub target: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// JSON experiment config
    #[arg(long)]
    pub config: PathBuf,
    /// Results file (JSON lines)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Results file written by `experiment`
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Summary CSV [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write per-cell penalty stability rows to this CSV
    #[arg(long)]
    pub stability: Option<PathBuf>,
}

/// Exit code for a library error.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) | Error::InvalidSet(_) | Error::FormulaInvalid { .. } => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// A malformed descriptor is a usage error; an unreadable descriptor file is
/// a data error.
fn parse_set(text: &str) -> Result<UncertaintySet> {
    let body = if text.trim_start().starts_with('{') {
        text.to_string()
    } else {
        let path = Path::new(text);
        std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?
    };
    UncertaintySet::from_json(&body).map_err(|e| match e {
        Error::Json(e) => Error::InvalidSet(e.to_string()),
        other => other,
    })
}

fn load_problem(path: &Path, target: Option<&str>) -> Result<RegressionProblem> {
    let target = match target {
        Some(t) => t.to_string(),
        None => {
            let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            let mut rdr = csv::Reader::from_reader(file);
            rdr.headers()?
                .iter()
                .next_back()
                .map(str::to_string)
                .ok_or_else(|| Error::Data(format!("{} has no columns", path.display())))?
        }
    };
    dataio::preprocess(&dataio::ingest_csv(path, &target)?)?.problem()
}

/// Gaussian design with `y = X·1 + noise`, used when `audit` gets no data.
fn toy_problem(n: usize, k: usize, seed: u64) -> Result<RegressionProblem> {
    let mut rng = seeded(derive_seed(seed, "toy-problem"));
    let x = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let noise = DVector::from_fn(n, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
    let y = &x * DVector::from_element(k, 1.0) + noise;
    RegressionProblem::new(x, y)
}

fn stanza(seed: u64, digest: &str, argv: &[OsString]) {
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    eprintln!(
        "# aurlab {} seed={} digest={} args: {}",
        env!("CARGO_PKG_VERSION"),
        seed,
        digest,
        args.join(" ")
    );
}

fn args_digest(argv: &[OsString]) -> String {
    let joined: Vec<u8> = argv
        .iter()
        .skip(1)
        .flat_map(|a| a.to_string_lossy().into_owned().into_bytes().into_iter().chain([0u8]))
        .collect();
    short_digest(&joined)
}

fn equivalence_table(reports: &[EquivalenceReport]) -> String {
    let mut out = format!(
        "{:<8} {:<6} {:>12} {:>14} {:>14} {:>12} {:>10} {:>13}\n",
        "mode", "probe", "lambda", "mc_loss", "closed_form", "rel_gap", "gate", "verdict"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<8} {:<6} {:>12.6e} {:>14.6e} {:>14.6e} {:>12.4e} {:>10.4e} {:>13}\n",
            r.mode.to_string(),
            format!("{:?}", r.probe).to_lowercase(),
            r.lambda,
            r.mc_mean_loss,
            r.closed_form_loss,
            r.relative_gap,
            r.gate(),
            r.verdict.to_string()
        ));
    }
    out
}

fn run_sample(args: &SampleArgs, seed: u64) -> Result<i32> {
    let set = parse_set(&args.set)?;
    let batch = match args.method {
        SamplerArg::Har => {
            let config = SamplerConfig::new(seed)
                .with_burn_in(args.burn_in)
                .with_thinning(args.thinning);
            hit_and_run(&set, &config, args.count)?
        }
        SamplerArg::Rej => rejection_sample(&set, seed, args.count)?,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record((0..set.n()).flat_map(|i| (0..set.k()).map(move |j| format!("d{i}_{j}"))))?;
    for sample in batch.iter() {
        w.write_record(sample.iter().map(|v| v.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv buffer: {e}")))?;
    write_output(args.out.as_deref(), &bytes)?;
    Ok(EXIT_OK)
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, bytes).map_err(|e| Error::io(p, e)),
        None => emit(bytes),
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(bytes: &[u8]) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(bytes).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io(Path::new("<stdout>"), e)),
        _ => Ok(()),
    }
}

fn run_fit(args: &FitArgs, seed: u64) -> Result<i32> {
    let problem = load_problem(&args.data, args.target.as_deref())?;
    let method = Method::from(args.method);
    let lambda = if method == Method::Ols {
        0.0
    } else if let Some(l) = args.lambda {
        l
    } else if args.cv {
        let spec = CvSpec {
            folds: args.folds,
            seed,
            ..CvSpec::default()
        };
        regression::select_lambda_cv(&problem, method, &spec)?.lambda
    } else if let Some(set) = &args.set {
        parse_set(set)?
            .with_dims(problem.n(), problem.k())?
            .ridge_lambda(args.mode.into())?
    } else {
        return Err(Error::Config(format!("{method} needs one of --lambda, --cv or --set")));
    };
    let result = regression::fit(&problem, method, lambda)?;
    emit(format!("{}\n", serde_json::to_string_pretty(&result)?).as_bytes())?;
    Ok(EXIT_OK)
}

fn run_audit(args: &AuditArgs, seed: u64) -> Result<i32> {
    let set = parse_set(&args.set)?;
    let ledger = audit_moments(&set, args.samples, seed)?;
    let mut text = ledger.to_table();
    let mut ok = ledger.derived_ok();

    let mut reports = Vec::new();
    if args.samples >= MIN_EQUIVALENCE_SAMPLES && set.closed_form_valid() {
        let (problem, set) = match &args.problem {
            Some(path) => {
                let p = load_problem(path, args.target.as_deref())?;
                let s = set.with_dims(p.n(), p.k())?;
                (p, s)
            }
            None => (toy_problem(set.n(), set.k(), seed)?, set.clone()),
        };
        for mode in [PenaltyMode::Derived, PenaltyMode::Paper] {
            reports.extend(verify_equivalence(&problem, &set, mode, args.samples, seed)?);
        }
        text.push('\n');
        text.push_str(&equivalence_table(&reports));
        ok &= !reports
            .iter()
            .any(|r| r.mode == PenaltyMode::Derived && r.verdict == Verdict::Disagree);
    } else {
        log::warn!("equivalence check skipped: needs closed forms and at least {MIN_EQUIVALENCE_SAMPLES} samples");
    }
    text.push('\n');
    text.push_str(&serde_json::to_string_pretty(
        &serde_json::json!({ "ledger": ledger, "equivalence": reports }),
    )?);
    text.push('\n');
    emit(text.as_bytes())?;
    Ok(if ok { EXIT_OK } else { EXIT_AUDIT })
}

fn run_experiment(config: &ExperimentConfig, out: &Path, workers: Option<usize>) -> Result<i32> {
    let outcome = harness::run_experiment(config, workers)?;
    harness::write_results(out, &harness::results_header(config), &outcome.records)?;
    if !outcome.failures.is_empty() {
        log::warn!("{} cells failed", outcome.failures.len());
    }
    if outcome.records.is_empty() {
        return Err(Error::Data("every experiment cell failed".into()));
    }
    Ok(EXIT_OK)
}

fn run_report(args: &ReportArgs) -> Result<i32> {
    let records = harness::read_results(&args.input)?;
    let summary = harness::summarize(&records)?;
    write_output(args.out.as_deref(), &harness::plot_data_csv(&summary)?)?;
    let stability = harness::lambda_stability(&records);
    if let Some(path) = &args.stability {
        harness::write_lambda_stability(&stability, path)?;
    }
    let mut policies: Vec<LambdaPolicy> = records
        .iter()
        .filter(|r| r.method == Method::Aur)
        .map(|r| r.lambda_policy)
        .collect();
    policies.sort();
    policies.dedup();
    for policy in policies {
        eprintln!("distinct AUR penalties across seeds ({policy}):");
        for (set, hist) in harness::lambda_frequency(&stability, Method::Aur, policy) {
            let cells: Vec<String> = hist.iter().map(|(c, f)| format!("{c}: {:.0}%", 100.0 * f)).collect();
            eprintln!("  {set:<12} {}", cells.join("  "));
        }
    }
    Ok(EXIT_OK)
}

fn dispatch(cli: &Cli, argv: &[OsString]) -> Result<i32> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Experiment(args) => {
            let mut config = ExperimentConfig::load(&args.config)?;
            if let Some(s) = cli.seed {
                config.master_seed = s;
            }
            if !cli.quiet {
                stanza(config.master_seed, &config.digest(), argv);
            }
            run_experiment(&config, &args.out, cli.workers)
        }
        command => {
            if let Some(w) = cli.workers {
                // Fails only if a pool already exists, in which case it is kept.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(w.max(1)).build_global();
            }
            if !cli.quiet {
                stanza(seed, &args_digest(argv), argv);
            }
            match command {
                Command::Sample(a) => run_sample(a, seed),
                Command::Fit(a) => run_fit(a, seed),
                Command::Audit(a) => run_audit(a, seed),
                Command::Report(a) => run_report(a),
                Command::Experiment(_) => unreachable!(),
            }
        }
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Error
        } else {
            log::LevelFilter::Warn
        })
        .parse_env("AURLAB_LOG")
        .format_target(false)
        .format_timestamp(None)
        .try_init();
    match dispatch(&cli, &argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
