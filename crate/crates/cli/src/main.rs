use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diffaug_cli::commands::{
    cmd_eval, cmd_generate, cmd_sweep_lambda, cmd_train, thread_cap, DEFAULT_LAMBDAS, SWEEP_FILE,
};
use diffaug_cli::config::RunConfig;
use diffaug_cli::CliError;

#[derive(Parser)]
#[command(name = "diffaug", version, about = "Contrastive encoder training with diffusion-generated positives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder and denoiser; writes a self-describing run directory.
    Train {
        /// JSON run configuration (defaults for every missing field).
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV training data, overriding `data.path`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory, overriding `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run seed, overriding `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate samples conditioned on each row of a CSV.
    Generate {
        /// Trained run directory.
        run: PathBuf,
        /// Input CSV.
        #[arg(long)]
        data: PathBuf,
        /// Samples per input row.
        #[arg(long, default_value_t = 1)]
        n_per_input: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV (default `<run>/generated.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear probe, k-means accuracy and cosine profile of a trained run.
    Eval {
        /// Trained run directory.
        run: PathBuf,
        /// Labeled CSV (default: the run's own data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report directory (default `<run>/eval`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate over a grid of replacement probabilities and seeds.
    SweepLambda {
        /// JSON run configuration shared by every cell.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Labeled CSV, overriding `data.path`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Sweep directory, overriding `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated replacement probabilities in [0, 1].
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LAMBDAS)]
        lambdas: Vec<f64>,
        /// Seeds (default: the config seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn resolve(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = data {
        cfg.data.path = Some(d);
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, data, out, seed } => {
            let cfg = resolve(config, data, out, seed)?;
            let dir = cmd_train(&cfg)?;
            println!("run_dir={}", dir.display());
        }
        Command::Generate { run, data, n_per_input, seed, out } => {
            let path = cmd_generate(&run, &data, n_per_input, seed, out.as_deref())?;
            println!("output={}", path.display());
        }
        Command::Eval { run, data, out } => {
            let report = cmd_eval(&run, data.as_deref(), out.as_deref())?;
            for (k, v) in report.lines() {
                println!("{k}={v}");
            }
        }
        Command::SweepLambda { config, data, out, lambdas, seeds } => {
            let threads = thread_cap(std::env::var("DIFFAUG_THREADS").ok().as_deref())?;
            let cfg = resolve(config, data, out, None)?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let cells = cmd_sweep_lambda(&cfg, &lambdas, &seeds, threads)?;
            let failed = cells.iter().filter(|c| c.outcome.is_err()).count();
            print!("{}", diffaug_cli::commands::sweep_csv(&cells));
            log::info!("sweep written to {}", cfg.out_dir.join(SWEEP_FILE).display());
            if failed > 0 {
                return Err(CliError::Runtime(format!("{failed} of {} sweep cells failed", cells.len())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
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
