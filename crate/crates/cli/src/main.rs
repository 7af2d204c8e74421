mod commands;
mod io;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::*;

/// Generate synthetic decay curves, train the denoiser, and evaluate it.
#[derive(Parser)]
#[command(name = "dremnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file; defaults to $DREMNET_CONFIG when set.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr=1e-3`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset, or noise imported forward responses.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Number of synthetic records.
        #[arg(long)]
        count: Option<usize>,
        /// CSV of clean curves (`time_s,value` blocks separated by blank lines).
        #[arg(long)]
        import: Option<PathBuf>,
    },
    /// Train on a dataset and write a checkpoint plus a loss log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss CSV; defaults to `<out>.loss.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Rewrite the checkpoint every N epochs (0: only at the end).
        #[arg(long, default_value_t = 1)]
        checkpoint_every: usize,
    },
    /// Denoise every record of a dataset into per-record CSV files.
    Denoise {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Decode with the context factor of the clean record instead of zero.
        #[arg(long)]
        with_reference: bool,
    },
    /// Score denoised CSV files against the clean records of a dataset.
    Eval {
        /// Directory written by `denoise`.
        #[arg(long)]
        denoised: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Output directory for records.csv, histogram.csv, and summary.csv.
        #[arg(long)]
        out: PathBuf,
        /// CSV column to score (`denoised` or `noisy`).
        #[arg(long, default_value = "denoised")]
        column: String,
    },
    /// Decode swapped factor pairings through both decoders.
    SwapTest {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the quadratic and linear kernels at several sequence lengths.
    BenchKernel {
        #[arg(long = "t", value_delimiter = ',', default_values_t = [256, 512, 1024, 2048, 4096])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        /// Timing rounds over all lengths; the fastest round per length is kept.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { cfg, out, count, import } => gen_data(GenData {
            config: cfg.config,
            sets: cfg.sets,
            out,
            count,
            import,
        }),
        Command::Train {
            cfg,
            data,
            out,
            log,
            resume,
            checkpoint_every,
        } => train(Train {
            config: cfg.config,
            sets: cfg.sets,
            data,
            out,
            log,
            resume,
            checkpoint_every,
        }),
        Command::Denoise {
            cfg,
            checkpoint,
            data,
            out,
            with_reference,
        } => denoise(Denoise {
            config: cfg.config,
            sets: cfg.sets,
            checkpoint,
            data,
            out,
            with_reference,
        }),
        Command::Eval {
            denoised,
            truth,
            out,
            column,
        } => eval(Eval {
            denoised,
            truth,
            out,
            column,
        }),
        Command::SwapTest { checkpoint, data, out } => swap_test(SwapTest { checkpoint, data, out }),
        Command::BenchKernel {
            lengths,
            channels,
            repeats,
            seed,
            out,
        } => bench_kernel(BenchKernel {
            lengths,
            channels,
            repeats,
            seed,
            out,
        }),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
