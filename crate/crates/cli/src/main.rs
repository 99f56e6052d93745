use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ufo_core::AdapterKind;

mod commands;
mod config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] ufo_core::Error),
}

impl CliError {
    /// 2 usage/config, 3 numeric, 4 compatibility.
    fn exit_code(&self) -> u8 {
        use ufo_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                E::Numeric(_) => 3,
                E::Format { .. } | E::Transfer(_) => 4,
                E::FreezeViolation { .. } | E::Oracle(_) => 1,
                E::Dimension { .. } | E::Contract(_) | E::Condition(_) | E::Metric(_) | E::Io(_) | E::Csv(_) => 2,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ufo", version, about = "Train, sample and evaluate frame-consistency adapters on a toy video diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain a base model on moving synthetic clips.
    TrainBase {
        config: PathBuf,
        /// Checkpoint path (default: <paths.checkpoints>/base.ufom).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train an adapter set against a frozen base model.
    TrainUfo {
        config: PathBuf,
        #[arg(long, value_parser = parse_kind)]
        kind: AdapterKind,
        #[arg(long)]
        base: PathBuf,
        /// Adapter path (default: <paths.checkpoints>/ufo_<kind>.ufoa).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample one clip, optionally with adapters attached.
    Generate {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        ufo: Vec<PathBuf>,
        /// One per --ufo, in the same order; each set's recommended value when omitted.
        #[arg(long)]
        alpha: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        condition: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = ufo_core::diffusion::DEFAULT_SAMPLE_STEPS)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a directory of clips and write a metrics CSV.
    Evaluate {
        #[arg(long)]
        videos: PathBuf,
        /// Index-aligned clips of the untreated model, for the Excluded Count.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Matched-seed intensity sweep against the alpha = 0 baseline.
    Sweep {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        ufo: PathBuf,
        /// Defaults for the flags below from its `eval` and `data` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated (default: 0,0.1,0.2).
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<f64>,
        /// Comma-separated (default: 0,1).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Condition ids (default: all of the model's).
        #[arg(long, value_delimiter = ',')]
        conditions: Vec<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Cap on generations per alpha.
        #[arg(long)]
        videos: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the header of a .ufoa, .ufom or .vclip file.
    Inspect { path: PathBuf },
    /// Check that adapters attach to a model and list the combined set.
    Compose {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        ufo: Vec<PathBuf>,
        #[arg(long)]
        alpha: Vec<f64>,
    },
    /// Verify an adapter set against another base model and write a copy for it.
    Transfer {
        #[arg(long)]
        ufo: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_kind(s: &str) -> Result<AdapterKind, String> {
    s.parse().map_err(|e: ufo_core::Error| e.to_string())
}

/// Training allocates and frees the same large buffers every step; keep
/// them on the heap instead of returning them to the kernel each time.
fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 25);
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    use commands as c;
    match cli.command {
        Command::TrainBase { config, out } => c::train_base(&config, out),
        Command::TrainUfo { config, kind, base, out } => c::train_ufo(&config, kind, &base, out),
        Command::Generate {
            base,
            ufo,
            alpha,
            condition,
            seed,
            steps,
            out,
        } => c::generate(&base, &ufo, &alpha, condition, seed, steps, &out),
        Command::Evaluate { videos, baseline, out } => c::evaluate(&videos, baseline.as_deref(), &out),
        Command::Sweep {
            base,
            ufo,
            config,
            alphas,
            seeds,
            conditions,
            steps,
            videos,
            out,
        } => c::sweep(&c::SweepArgs {
            base,
            ufo,
            config,
            alphas,
            seeds,
            conditions,
            steps,
            videos,
            out,
        }),
        Command::Inspect { path } => c::inspect(&path),
        Command::Compose { base, ufo, alpha } => c::compose(&base, &ufo, &alpha),
        Command::Transfer { ufo, target, out } => c::transfer(&ufo, &target, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    tune_allocator();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
