mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Invalid invocation or inconsistent inputs; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(
    name = "isorec",
    version,
    about = "Reference-free axial super-resolution of anisotropic volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom, its anisotropic degradation and lateral training patches.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the 2D diffusion prior on lateral patches.
    TrainPrior {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the implicit representation to the measurements and export an isotropic volume.
    Reconstruct {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a reconstruction with ground truth slice by slice.
    Evaluate {
        recon: PathBuf,
        gt: PathBuf,
        out: PathBuf,
    },
    /// Draw samples from a trained prior.
    SamplePrior {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Clamp the implied clean image to the data range at every step.
        #[arg(long)]
        clip: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_threads() -> anyhow::Result<()> {
    #[cfg(feature = "parallel")]
    if let Ok(v) = std::env::var("ISOREC_THREADS") {
        let n: usize = v.parse().map_err(|_| {
            UsageError(format!(
                "ISOREC_THREADS must be a non-negative integer, got {v:?}"
            ))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Simulate { config, seed, out } => {
            commands::simulate(config.as_deref(), seed, &out)
        }
        Command::TrainPrior { config, seed, out } => {
            commands::train_prior(config.as_deref(), seed, &out)
        }
        Command::Reconstruct { config, seed, out } => {
            commands::reconstruct(config.as_deref(), seed, &out)
        }
        Command::Evaluate { recon, gt, out } => commands::evaluate(&recon, &gt, &out),
        Command::SamplePrior {
            checkpoint,
            n,
            seed,
            size,
            clip,
            out,
        } => commands::sample_prior(&checkpoint, n, seed, size, clip, &out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<isorec::Error>() {
        Some(
            isorec::Error::Diverged { .. } | isorec::Error::Sampling(_) | isorec::Error::Io { .. },
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
