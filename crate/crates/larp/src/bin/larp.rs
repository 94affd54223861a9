use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use larp::cli::{cmd_bench, cmd_eval, cmd_extract, cmd_train, cmd_verify};
use larp::cli::{BenchOpts, EvalOpts, ExtractOpts, TrainOpts};

#[derive(Parser)]
#[command(name = "larp", version, about = "Layered random projection image classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on IDX images/labels and write a model file
    Train {
        /// Architecture config (TOML)
        #[arg(long)]
        config: PathBuf,
        /// IDX image file
        #[arg(long)]
        train_images: PathBuf,
        /// IDX label file
        #[arg(long)]
        train_labels: PathBuf,
        /// Stratified subsample size for desk-scale runs
        #[arg(long)]
        subsample: Option<usize>,
        /// Optimizer iteration cap (default 200)
        #[arg(long)]
        max_iters: Option<usize>,
        /// Override the config's seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output model path
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model; prints error_rate=<percent>
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Write per-image feature vectors as tab-separated lines
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the dense-operator, median-sort, and finite-difference oracles
    Verify {
        /// Trials per oracle (gradient models = trials / 5)
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Measure projection throughput; prints ns_per_projection=<integer>
    Bench {
        /// Map height and width
        #[arg(long, num_args = 2, value_names = ["H", "W"])]
        map_size: Vec<usize>,
        /// Kernel support (perfect square, odd side)
        #[arg(long)]
        support: usize,
        /// Timed repetitions
        #[arg(long)]
        repeat: usize,
    },
}

fn run(cli: Cli) -> larp::Result<bool> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Train {
            config,
            train_images,
            train_labels,
            subsample,
            max_iters,
            seed,
            out: out_path,
        } => {
            let opts = TrainOpts {
                config,
                train_images,
                train_labels,
                subsample,
                max_iters,
                seed,
                out: out_path,
            };
            let stderr = io::stderr();
            let mut log = stderr.lock();
            cmd_train(&opts, &mut out, &mut log)?;
            Ok(true)
        }
        Command::Eval {
            model,
            images,
            labels,
        } => {
            cmd_eval(
                &EvalOpts {
                    model,
                    images,
                    labels,
                },
                &mut out,
            )?;
            Ok(true)
        }
        Command::Extract { model, images, out: out_path } => {
            cmd_extract(&ExtractOpts {
                model,
                images,
                out: out_path,
            })?;
            Ok(true)
        }
        Command::Verify { trials, seed } => cmd_verify(trials, seed, &mut out),
        Command::Bench {
            map_size,
            support,
            repeat,
        } => {
            cmd_bench(
                &BenchOpts {
                    map_height: map_size[0],
                    map_width: map_size[1],
                    support,
                    repeat,
                },
                &mut out,
            )?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            let _ = writeln!(io::stderr(), "error: {err}");
            ExitCode::FAILURE
        }
    }
}
