use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, ValueEnum};
use meanfield_core::experiments::{run_experiment, Experiment, ExperimentConfig};
use meanfield_core::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    MeanFieldRate,
    WassersteinDecay,
    QvConvergence,
    CltInitial,
    CltTrajectory,
    SpdeOnly,
    OracleSuite,
}

impl From<Command> for Experiment {
    fn from(c: Command) -> Self {
        match c {
            Command::MeanFieldRate => Experiment::MeanFieldRate,
            Command::WassersteinDecay => Experiment::WassersteinDecay,
            Command::QvConvergence => Experiment::QvConvergence,
            Command::CltInitial => Experiment::CltInitial,
            Command::CltTrajectory => Experiment::CltTrajectory,
            Command::SpdeOnly => Experiment::SpdeOnly,
            Command::OracleSuite => Experiment::OracleSuite,
        }
    }
}

/// Run a mean-field fluctuation experiment from a TOML configuration.
///
/// Exit codes: 0 success, 1 configuration error, 2 numerical failure,
/// 3 acceptance failure.
#[derive(Debug, Parser)]
#[command(name = "meanfield-fluct", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Master seed; overrides `seed` in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_ACCEPTANCE: u8 = 3;

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_NUMERICAL,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match ExperimentConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let experiment = Experiment::from(cli.command);
    let out_dir = cli.out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out").join(experiment.name()));
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(EXIT_CONFIG);
        }
        pool = pool.num_threads(w);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(EXIT_NUMERICAL);
        }
    };
    let start = Instant::now();
    log::info!("{} with {} workers, seed {}", experiment.name(), pool.current_num_threads(), cfg.seed);
    let outcome = match pool.install(|| run_experiment(experiment, &cfg)) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_for(&e));
        }
    };
    let elapsed = start.elapsed().as_secs_f64();
    if let Err(e) = outcome.write(&out_dir, elapsed) {
        eprintln!("error: writing results to {}: {e}", out_dir.display());
        return ExitCode::from(EXIT_NUMERICAL);
    }
    for c in &outcome.checks {
        println!("[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
    }
    println!("{} finished in {elapsed:.1}s; results in {}", experiment.name(), out_dir.display());
    if outcome.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_ACCEPTANCE)
    }
}
