use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mmep::channel::{build_model, simulate_trace, write_trace, TraceHeader};
use mmep::harness::{run_sweep, write_csv, Sweep, FAILURE_BUDGET};
use mmep::{Algorithm, Error, SystemConfig};

#[derive(Parser)]
#[command(name = "mmep", version, about = "Semi-blind massive MIMO receiver simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run Monte Carlo trials (optionally over a parameter sweep) and write a CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        /// name=v1,v2,... with name one of M, a, T_d, f_d, rho, T_p
        #[arg(long)]
        sweep: Option<String>,
        /// Comma-separated list, e.g. kf_m,ep,pcsi
        #[arg(long, value_delimiter = ',')]
        algorithms: Option<Vec<String>>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Write one simulated target-cell channel trace as text.
    Trace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Config(Error),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) => Failure::Config(e),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load(path: &Path) -> Result<SystemConfig, Failure> {
    SystemConfig::load(path).map_err(Failure::Config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, out, seed, trials, sweep, algorithms, workers } => {
            let mut cfg = load(&config)?;
            if let Some(seed) = seed {
                cfg.master_seed = seed;
            }
            if let Some(trials) = trials {
                cfg.trials = trials;
            }
            if let Some(list) = algorithms {
                cfg.algorithms = list
                    .iter()
                    .map(|s| s.parse::<Algorithm>())
                    .collect::<mmep::Result<Vec<_>>>()
                    .map_err(Failure::Config)?;
            }
            cfg.validate().map_err(Failure::Config)?;
            let sweep = sweep.as_deref().map(Sweep::parse).transpose().map_err(Failure::Config)?;
            let rows = run_sweep(&cfg, sweep.as_ref(), workers)?;
            write_csv(&rows, &out)?;
            if let Some(worst) = rows.iter().find(|r| r.failure_fraction() > FAILURE_BUDGET) {
                return Err(Failure::Runtime(format!(
                    "{} failed on {} of {} trials at {} = {}",
                    worst.algorithm, worst.failures, worst.trials, worst.sweep_name, worst.sweep_value
                )));
            }
            Ok(())
        }
        Command::Trace { config, out, seed } => {
            let cfg = load(&config)?;
            let model = build_model(&cfg)?;
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let trace = simulate_trace(&model, cfg.frame_len(), &mut rng);
            let header = TraceHeader {
                antennas: cfg.antennas,
                users: cfg.users,
                frame_len: cfg.frame_len(),
                doppler: cfg.doppler,
                rho: cfg.rho,
            };
            let mut file = std::io::BufWriter::new(std::fs::File::create(&out).map_err(Error::from)?);
            write_trace(&mut file, &header, &trace)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
