//! `stablenode`: generate benchmark data, fit structured fields, and analyse
//! or control them from the command line.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::{CliError, CliResult, Settings};

#[derive(Debug, Parser)]
#[command(name = "stablenode", version, about = "Stable multistable neural ODEs with feedback control")]
struct Cli {
    /// Worker threads; 1 gives bit-for-bit reproducible output.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Flat JSON file of default option values. Flags win over file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use the full-size protocols (100 trials, full toggle control grid).
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Use the analytic splitting of the true system instead of a checkpoint.
    #[arg(long, global = true)]
    oracle: bool,
    /// Existing directory that receives every output file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// two-tanks, sym-hysteresis, budworm or toggle-switch.
    #[arg(long, global = true)]
    system: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the system's training protocol and write dataset.csv + manifest.json.
    GenData,
    /// Fit the benchmark architecture; writes checkpoint.json + report.json.
    Train(TrainArgs),
    /// k-fold architecture selection, then a full-data fit; writes cv_report.json + checkpoint.json.
    Cv(CvArgs),
    /// Integrate a model from one initial state; writes trajectory.csv.
    Simulate(SimulateArgs),
    /// Equilibria and their stability at one control value; writes equilibria.json.
    Equilibria(EquilibriaArgs),
    /// Equilibrium branches along a control sweep; writes diagram.csv + tipping.json.
    Bifurcate(BifurcateArgs),
    /// Closed-loop trials on the true system; writes trials.csv + summary.json.
    Control(ControlArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset CSV (default: dataset.csv in the output directory).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Independent initialisations; the lowest final loss is kept.
    #[arg(long)]
    pub restarts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Field checkpoint (default: checkpoint.json in the output directory).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub x0: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub u: Option<Vec<f64>>,
    #[arg(long)]
    pub t_end: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Noise level; zero integrates the deterministic field with RK4.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Keep every n-th step.
    #[arg(long)]
    pub record_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EquilibriaArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub u: Option<Vec<f64>>,
    /// Newton starts per state axis (multi-dimensional systems).
    #[arg(long)]
    pub starts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BifurcateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, allow_negative_numbers = true)]
    pub lo: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub hi: Option<f64>,
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub n_scan: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ControlArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Applications of g inside the control objective.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Targets per trial.
    #[arg(long)]
    pub targets: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Time allotted to each target.
    #[arg(long)]
    pub period: Option<f64>,
}

/// Options shared by every command after merging flags over the config file.
pub struct Common {
    pub settings: Settings,
    pub out: PathBuf,
    pub seed: u64,
    pub paper_scale: bool,
    pub oracle: bool,
    pub system: Option<String>,
}

fn run(cli: Cli) -> CliResult<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    let threads = settings.pick(cli.threads, "threads")?;
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot size the thread pool: {e}")))?;
    }
    let out: PathBuf = settings.pick_or(cli.out, "out", PathBuf::from("."))?;
    if !out.is_dir() {
        return Err(CliError::Config(format!("output directory {} does not exist", out.display())));
    }
    let common = Common {
        seed: settings.pick_or(cli.seed, "seed", 0)?,
        paper_scale: settings.switch(cli.paper_scale, "paper_scale")?,
        oracle: settings.switch(cli.oracle, "oracle")?,
        system: settings.pick(cli.system, "system")?,
        settings,
        out,
    };
    match cli.command {
        Command::GenData => commands::gen_data(&common),
        Command::Train(a) => commands::train(&common, &a),
        Command::Cv(a) => commands::cv(&common, &a),
        Command::Simulate(a) => commands::simulate(&common, &a),
        Command::Equilibria(a) => commands::equilibria(&common, &a),
        Command::Bifurcate(a) => commands::bifurcate(&common, &a),
        Command::Control(a) => commands::control(&common, &a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
