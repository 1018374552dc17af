mod commands;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Federated linear mixed models from site-level summaries.
#[derive(Debug, Parser)]
#[command(name = "fedlmm", version)]
struct Cli {
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, env = "FEDLMM_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Reduce a data CSV to one summary JSON per site.
    Summarize(SummarizeArgs),
    /// Release a Gaussian-mechanism copy of a summary.
    Privatize(PrivatizeArgs),
    /// Fit the model from summary files and report Wald intervals.
    Fit(FitArgs),
    /// Try to rebuild a binary design from a summary's Gram block.
    Attack(AttackArgs),
    /// Replicated IPD / DP / DP2 estimation study.
    SimulateEstimation(SimulateEstimationArgs),
    /// Reconstruction-attack study over (n, p, epsilon0) grids.
    SimulateReconstruction(SimulateReconstructionArgs),
    /// summarize, privatize, fit and attack on the bundled dataset.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
struct SummarizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "y")]
    outcome: String,
    #[arg(long, value_delimiter = ',', required = true)]
    covariates: Vec<String>,
    /// Leave out the intercept column.
    #[arg(long)]
    no_intercept: bool,
    /// Column holding the site id; without it the whole file is one site.
    #[arg(long)]
    site_column: Option<String>,
    /// Site id for a single-site file (defaults to the file stem).
    #[arg(long, conflicts_with = "site_column")]
    site_id: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScopeArg {
    Full,
    Subset,
}

#[derive(Debug, Args)]
struct PrivatizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Defaults to `<out-dir>/<site>_dp.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Baseline level of the dimension-adjusted rule (epsilon = 2p epsilon0).
    #[arg(long, conflicts_with_all = ["epsilon", "delta_f"])]
    epsilon0: Option<f64>,
    /// Fixed epsilon; requires --delta-f.
    #[arg(long, requires = "delta_f")]
    epsilon: Option<f64>,
    /// Frobenius sensitivity for a fixed epsilon.
    #[arg(long, requires = "epsilon")]
    delta_f: Option<f64>,
    #[arg(long)]
    delta: f64,
    #[arg(long, value_enum, default_value = "full")]
    scope: ScopeArg,
    /// Sensitive columns for --scope subset, by name or summary coordinate.
    #[arg(long, value_delimiter = ',')]
    sensitive: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Ml,
    Reml,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Summary JSON files, one per site.
    #[arg(required = true)]
    summaries: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "ml")]
    method: MethodArg,
    /// cr0, cr1, cr1p or cr1s.
    #[arg(long, default_value = "cr0")]
    correction: String,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Use t with K-1 degrees of freedom instead of the normal quantile.
    #[arg(long)]
    t_quantile: bool,
    /// Hold tau2 fixed (needed for a single site).
    #[arg(long)]
    fixed_tau2: Option<f64>,
    /// Defaults to `<out-dir>/fit.json`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Defaults to `<out-dir>/fit.csv`.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct AttackArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Summary coordinates to attack; defaults to every non-intercept column.
    #[arg(long, value_delimiter = ',')]
    columns: Vec<usize>,
    /// Clamp rounded entries to the feasible ranges before solving.
    #[arg(long)]
    clamp: bool,
    #[arg(long, default_value_t = 60.0)]
    timeout_secs: f64,
    #[arg(long, default_value_t = 10_000_000)]
    max_nodes: u64,
    /// Defaults to `<out-dir>/attack.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SimulateEstimationArgs {
    /// ri-correct, ri-mis, ris-correct or ris-mis.
    #[arg(long)]
    scenario: String,
    #[arg(long = "K", value_delimiter = ',', default_value = "20,50,100,200")]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,12,16")]
    epsilon0: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "cr0,cr1p")]
    corrections: Vec<String>,
    /// Skip the DP2 arm.
    #[arg(long)]
    no_dp2: bool,
    /// Level of the Wald intervals used for coverage.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Per-replicate rows; defaults to `<out-dir>/metrics.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Defaults to `<out-dir>/calibration.csv`.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Defaults to `<out-dir>/summary.csv`.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateReconstructionArgs {
    /// Values or inclusive ranges such as `2-20`.
    #[arg(long, value_delimiter = ',', default_value = "2-20")]
    n: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "3,5,10")]
    p: Vec<usize>,
    /// `inf` releases the exact Gram matrix.
    #[arg(long, value_delimiter = ',', default_value = "inf,1,2,4,6,8,10,12,16,20")]
    epsilon0: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    /// Bernoulli probability of each design entry.
    #[arg(long, default_value_t = 0.5)]
    prob: f64,
    #[arg(long, default_value_t = 10.0)]
    timeout_secs: f64,
    #[arg(long)]
    max_nodes: Option<u64>,
    #[arg(long)]
    clamp: bool,
    /// Defaults to `<out-dir>/reconstruction.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// Data CSV with `site,y,x1..x6`; defaults to the bundled dataset.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 20.0)]
    epsilon0: f64,
    /// Defaults to 1/N.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
