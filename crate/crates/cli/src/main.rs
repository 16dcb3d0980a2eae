//! `vvord`: simulate, analyze, evaluate and design Volt/VAR rules.
//!
//! Exit codes: 0 on success, 1 on invalid input, 2 when a numerical
//! procedure that must converge does not.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::LazyLock;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;

static VERSION_TEXT: LazyLock<String> =
    LazyLock::new(|| format!("{} (file format {})", vvord::VERSION, vvord::FORMAT_VERSION));

#[derive(Debug, Parser)]
#[command(name = "vvord", about = "Volt/VAR rule simulation and optimal rule design")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "VVORD_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a rule family on one scenario and write its trace.
    Simulate(SimulateArgs),
    /// Train incremental rule parameters on a scenario set.
    Design(DesignArgs),
    /// Report step sizes, stability and emulator depth bounds of a feeder.
    Analyze(AnalyzeArgs),
    /// Evaluate rules on a scenario set at equilibrium.
    Evaluate(EvaluateArgs),
    /// Draw a synthetic scenario set.
    GenScenarios(GenScenariosArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleArg {
    Noninc,
    Inc,
    Acc,
}

impl From<RuleArg> for vvord::dynamics::RuleKind {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Noninc => vvord::dynamics::RuleKind::NonIncremental,
            RuleArg::Inc => vvord::dynamics::RuleKind::Incremental,
            RuleArg::Acc => vvord::dynamics::RuleKind::Accelerated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub feeder: PathBuf,
    /// Rules JSON (curve or transformed parameters).
    #[arg(long)]
    pub rules: PathBuf,
    /// Scenario CSV.
    #[arg(long)]
    pub scenarios: PathBuf,
    /// Row of the scenario file to simulate, from 0.
    #[arg(long, default_value_t = 0)]
    pub scenario: usize,
    #[arg(long, value_enum, default_value = "inc")]
    pub rule: RuleArg,
    /// Step size; defaults to the feeder's default for the rule family.
    /// Required for transformed rules files.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Convergence tolerance on successive setpoints.
    #[arg(long, default_value_t = vvord::dynamics::DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = vvord::dynamics::DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    /// Run exactly this many updates instead of stopping on tolerance.
    #[arg(long)]
    pub steps: Option<usize>,
    /// JSON summary.
    #[arg(long)]
    pub out: PathBuf,
    /// CSV trace with columns t,node,q,v.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DesignArgs {
    #[arg(long)]
    pub feeder: PathBuf,
    #[arg(long)]
    pub scenarios: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, value_enum, default_value = "adam")]
    pub optimizer: OptimizerArg,
    /// Step size; defaults to the feeder's default for the unrolled family.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Unroll the accelerated rules (`--accelerated false` for plain).
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub accelerated: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fixed unroll depth; dynamic depth is used when absent.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Tolerance of the dynamic unroll depth.
    #[arg(long, default_value_t = 1e-6)]
    pub depth_eps: f64,
    /// Layer cap of the dynamic unroll depth.
    #[arg(long, default_value_t = 5000)]
    pub max_layers: usize,
    /// Initial transformed rules JSON; the curve preset when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Trained rules JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// CSV of the full objective per epoch.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub feeder: PathBuf,
    /// Emulator fidelity target for the depth bounds.
    #[arg(long, default_value_t = 1e-5)]
    pub eps1: f64,
    /// Bound on the setpoint norm; the norm of the DER ratings when absent.
    #[arg(long)]
    pub q_norm: Option<f64>,
    /// Accuracy used for the iteration estimates.
    #[arg(long, default_value_t = 1e-8)]
    pub eps: f64,
    /// Step size for the contraction-based depth bound; the default step
    /// when absent.
    #[arg(long)]
    pub mu: Option<f64>,
    /// JSON report; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub feeder: PathBuf,
    #[arg(long)]
    pub rules: PathBuf,
    #[arg(long)]
    pub scenarios: PathBuf,
    /// Step size the transformed rules were defined with.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Aggregate JSON report.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-scenario CSV.
    #[arg(long)]
    pub per_scenario: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenScenariosArgs {
    #[arg(long)]
    pub feeder: PathBuf,
    #[arg(long, default_value_t = 80)]
    pub count: usize,
    #[arg(long, default_value_t = 0.0)]
    pub load_min: f64,
    #[arg(long, default_value_t = 0.1)]
    pub load_max: f64,
    #[arg(long, default_value_t = 0.0)]
    pub solar_min: f64,
    #[arg(long, default_value_t = 0.2)]
    pub solar_max: f64,
    #[arg(long, default_value_t = 0.3)]
    pub reactive_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<vvord::Error>() {
        Some(e) if e.is_numerical() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().version(VERSION_TEXT.as_str()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Design(a) => commands::design(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::GenScenarios(a) => commands::gen_scenarios(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
