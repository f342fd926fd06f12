use clap::{Parser, Subcommand};
use maisac::cli::{run_single, run_sweep};
use std::path::PathBuf;
use std::process::ExitCode;

/// Joint beamforming, power and antenna-position optimization for networked ISAC.
#[derive(Parser)]
#[command(version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize one seed and write the per-iteration CSV.
    Run {
        /// TOML run config; an empty file means all defaults.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Fill the `ms` column with wall time (the file is then not reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Monte-Carlo sweep over one scenario axis and several schemes.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Worker threads; defaults to the available cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = match args.command {
        Command::Run { config, seed, out, timing } => run_single(&config, seed, &out, timing).map(|log| {
            let last = log.records.last().expect("initial record");
            println!(
                "{} iterations, sum rate {:.6} nats, {}",
                last.iter,
                last.sum_rate,
                if log.converged { "converged" } else { "iteration limit reached" }
            );
        }),
        Command::Sweep { spec, out_dir, jobs } => {
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            run_sweep(&spec, &out_dir, jobs).map(|cells| println!("{} cells written to {}", cells.len(), out_dir.display()))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
