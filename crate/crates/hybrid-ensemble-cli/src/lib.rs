//! Command-line front end for the hybrid-ensemble verification suites.
//!
//! Exit codes: 0 when every verification row passes, 1 when a row fails or a
//! run breaks down numerically, 2 for usage, configuration and I/O errors.

pub mod config;
pub mod error;
pub mod report;
pub mod suites;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::report::{sibling, write_atomic, VerificationReport};
use crate::suites::{BracketOptions, EhrenfestOptions, MeasureOptions, Outcome, ThermalOptions};

/// Caps the rayon worker count.
pub const THREADS_ENV: &str = "HYBRID_ENSEMBLE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "hybrid-ensemble", version, about = "Hybrid quantum-classical ensemble experiments and identity checks")]
pub struct Cli {
    /// Record wall time in reports. Output is then no longer byte-reproducible.
    #[arg(long, global = true)]
    pub timing: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bracket identities: Lie axioms, homomorphisms, separability. Emits a JSON report.
    Brackets(BracketsArgs),
    /// Coupled oscillators against the ODE for the means. Emits a CSV time series.
    Ehrenfest(EhrenfestArgs),
    /// Pointer measurement of a quantum observable.
    Measure(MeasureArgs),
    /// Thermal trajectory mixtures against canonical averages.
    Thermal(ThermalArgs),
    /// Every suite at its defaults.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Args)]
pub struct Io {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output file ("-" for stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Verification report path (default: <out stem>.report.json beside --out).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BracketsArgs {
    #[command(flatten)]
    pub io: Io,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EhrenfestArgs {
    #[command(flatten)]
    pub io: Io,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub t_final: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MeasureArgs {
    #[command(flatten)]
    pub io: Io,
    /// Operator label: sigma_x, sigma_y, sigma_z, identity, diag(a,b,..).
    #[arg(long)]
    pub operator: Option<String>,
    /// Comma-separated amplitudes, e.g. "0.6, 0.8i". Normalized on input.
    #[arg(long, allow_hyphen_values = true)]
    pub state: Option<String>,
    /// Pointer displacement per unit eigenvalue.
    #[arg(long = "K", allow_hyphen_values = true)]
    pub big_k: Option<f64>,
    #[arg(long)]
    pub pointer_width: Option<f64>,
    /// Pointer reading to collapse on, or "none".
    #[arg(long, allow_hyphen_values = true)]
    pub collapse_at: Option<String>,
    #[arg(long)]
    pub dt: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ThermalArgs {
    #[command(flatten)]
    pub io: Io,
    /// Phase-space Hamiltonian label, e.g. "ho(m=1,omega=1)" or "quartic(m=1,g=1)".
    #[arg(long)]
    pub hamiltonian: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Minimum averaging time per trajectory (default: 50 small-oscillation periods).
    #[arg(long)]
    pub t_avg: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// auto, importance or metropolis.
    #[arg(long)]
    pub sampler: Option<String>,
    /// Observable label; repeat for several (default: H, x2, k2).
    #[arg(long = "observable")]
    pub observables: Vec<String>,
    /// Initial trajectory step; halved while the energy drift is too large.
    #[arg(long)]
    pub dt: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    /// Report path (.json, or .csv for a table).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the subcommand, returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::Usage(e.to_string()))
}

fn execute(cli: Cli) -> Result<bool, CliError> {
    let pool = thread_pool()?;
    let start = Instant::now();
    let timing = cli.timing;
    pool.install(|| match cli.command {
        Command::Brackets(a) => {
            let cfg = RunConfig::load_or_default(a.io.config.as_deref())?;
            let o = BracketOptions::resolve(&cfg, a.seed);
            let outcome = suites::brackets(&o)?;
            finish_report_only(outcome.report, out_path(&a.io, &cfg), timing, start)
        }
        Command::Ehrenfest(a) => {
            let cfg = RunConfig::load_or_default(a.io.config.as_deref())?;
            let o = EhrenfestOptions::resolve(&cfg, a.dt, a.t_final)?;
            finish(suites::ehrenfest(&o)?, &a.io, &cfg, timing, start)
        }
        Command::Measure(a) => {
            let cfg = RunConfig::load_or_default(a.io.config.as_deref())?;
            let json = out_path(&a.io, &cfg).is_some_and(|p| p.extension().is_some_and(|e| e == "json"));
            let o = MeasureOptions::resolve(&cfg, a.operator, a.state, a.big_k, a.pointer_width, a.collapse_at, a.dt, json)?;
            finish(suites::measure(&o)?, &a.io, &cfg, timing, start)
        }
        Command::Thermal(a) => {
            let cfg = RunConfig::load_or_default(a.io.config.as_deref())?;
            let o = ThermalOptions::resolve(&cfg, a.hamiltonian, a.beta, a.samples, a.t_avg, a.seed, a.sampler, a.observables, a.dt)?;
            finish(suites::thermal(&o)?, &a.io, &cfg, timing, start)
        }
        Command::Selfcheck(a) => finish_report_only(suites::selfcheck()?, a.out, timing, start),
    })
}

fn out_path(io: &Io, cfg: &RunConfig) -> Option<PathBuf> {
    io.out.clone().or_else(|| cfg.output.path.clone())
}

fn stamp(mut report: VerificationReport, timing: bool, start: Instant) -> VerificationReport {
    let secs = start.elapsed().as_secs_f64();
    if timing {
        report.wall_time = Some(secs);
    }
    eprint!("{}", report.summary());
    eprintln!("wall time {secs:.2}s");
    report
}

fn render_report(report: &VerificationReport, path: &Path) -> Result<String, CliError> {
    if path.extension().is_some_and(|e| e == "csv") {
        report.to_table().to_csv()
    } else {
        report.to_json()
    }
}

/// The report is the only output: to `out`, or stdout as JSON.
fn finish_report_only(report: VerificationReport, out: Option<PathBuf>, timing: bool, start: Instant) -> Result<bool, CliError> {
    let report = stamp(report, timing, start);
    let path = out.unwrap_or_else(|| PathBuf::from("-"));
    write_atomic(&path, &render_report(&report, &path)?)?;
    Ok(report.passed)
}

fn finish(outcome: Outcome, io: &Io, cfg: &RunConfig, timing: bool, start: Instant) -> Result<bool, CliError> {
    let report = stamp(outcome.report, timing, start);
    let out = out_path(io, cfg);
    let report_path = io.report.clone().or_else(|| cfg.output.report.clone()).or_else(|| match &out {
        Some(p) if p != Path::new("-") => Some(sibling(p, "report.json")),
        _ => None,
    });
    if let Some(data) = &outcome.primary {
        write_atomic(out.as_deref().unwrap_or(Path::new("-")), data)?;
    }
    for (suffix, data) in &outcome.extras {
        match &out {
            Some(p) if p != Path::new("-") => write_atomic(&sibling(p, suffix), data)?,
            _ => eprintln!("note: {suffix} not written (no --out)"),
        }
    }
    if let Some(p) = report_path {
        write_atomic(&p, &render_report(&report, &p)?)?;
    }
    Ok(report.passed)
}
