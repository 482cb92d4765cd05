//! `adaptive-stab`: build Riccati gain libraries offline, run the online
//! adaptive loop, compare against the robust a-priori feedback, and print
//! time-varying controllability/observability certificates.
//!
//! Exit codes: 0 on success, 1 on configuration errors, 2 on numerical
//! failures (a diagnostic JSON is left in the output directory).

mod config;
mod experiments;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;
use experiments::CliError;

#[derive(Parser)]
#[command(name = "adaptive-stab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration file (flat `key = value` format).
    #[arg(long)]
    config: PathBuf,
    /// Gain library file (written by `offline`, read by `online`).
    #[arg(long)]
    library: Option<PathBuf>,
    /// Output directory for run artifacts (defaults to the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on worker threads for parallel solves and integrations.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one Riccati problem per training parameter and store the gains.
    Offline(CommonArgs),
    /// Run the online adaptive stabilization loop against a stored library.
    Online(CommonArgs),
    /// Compare optimal, adaptive, and robust ensemble feedback costs.
    RobustCompare(CommonArgs),
    /// Print the derivative-augmented controllability/observability
    /// certificates of the phase ensemble.
    RankCheck(CommonArgs),
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Offline(a)
            | Command::Online(a)
            | Command::RobustCompare(a)
            | Command::RankCheck(a) => a,
        }
    }
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.display().to_string();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), (CliError, Option<PathBuf>)> {
    let args = cli.command.common();
    if let Some(jobs) = args.jobs {
        // Ignore failure when a pool already exists (tests, repeat calls).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global();
    }
    let cfg = load_config(args).map_err(|e| (e, None))?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    let library_path = args
        .library
        .clone()
        .unwrap_or_else(|| out_dir.join("library.bin"));
    let fail = |e: CliError| (e, Some(out_dir.clone()));

    match &cli.command {
        Command::Offline(_) => experiments::cmd_offline(&cfg, &library_path).map_err(fail),
        Command::Online(_) => experiments::cmd_online(&cfg, &library_path, &out_dir).map_err(fail),
        Command::RobustCompare(_) => experiments::cmd_robust_compare(&cfg, &out_dir).map_err(fail),
        Command::RankCheck(_) => experiments::cmd_rank_check(&cfg, &out_dir).map_err(fail),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((CliError::Config(msg), _)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err((CliError::Numerical(err), out_dir)) => {
            eprintln!("numerical failure: {err}");
            if let Some(dir) = out_dir {
                let diag = serde_json::json!({
                    "error": err.to_string(),
                });
                if std::fs::create_dir_all(&dir).is_ok() {
                    let _ = std::fs::write(
                        dir.join("error.json"),
                        serde_json::to_string_pretty(&diag).unwrap_or_default(),
                    );
                }
            }
            ExitCode::from(2)
        }
    }
}
