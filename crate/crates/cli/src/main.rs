use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Procedural frame-sequence generation with a miniature diffusion transformer.
#[derive(Parser, Debug)]
#[command(name = "makeseq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON config; omitted sections take toy defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=100` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset into `paths.data_dir`.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (default: `paths.data_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 1: base pretraining, then per-task adapters on the frozen base.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a stage-1 checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Checkpoint path (default: `<run_dir>/stage1.psdt`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fold adapters into the base with task weights.
    MergeLora {
        #[arg(long)]
        ckpt: PathBuf,
        /// `name=w,...` or one weight per task in order; unnamed tasks get 0.
        /// Defaults to the conditional-stage tasks of the checkpoint config.
        #[arg(long)]
        tasks: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Text-to-sequence sampling.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Euler steps (default: `flow.steps`).
        #[arg(long)]
        steps: Option<usize>,
        /// Blend adapters with fixed weights instead of routing by task.
        #[arg(long)]
        omega: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: tail-conditioned adapter on a merged checkpoint.
    TrainRecraft {
        #[arg(long)]
        base: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Checkpoint path (default: `<run_dir>/recraft.psdt`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the frames leading up to a given last frame.
    Recraft {
        #[arg(long)]
        ckpt: PathBuf,
        /// Last frame as an f x f binary PGM, or a whole grid whose last
        /// serpentine cell is used.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an evaluation report.
    Eval {
        #[arg(long, required_unless_present = "ground_truth")]
        ckpt: Option<PathBuf>,
        /// Score the held-out sequences themselves.
        #[arg(long, conflicts_with = "ckpt")]
        ground_truth: bool,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every operation and both objectives.
    GradCheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Seeds for the operation checks.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData { config, out } => commands::gen_data(&config, out),
        Command::Train {
            config,
            data,
            resume,
            out,
        } => commands::train(&config, data, resume, out),
        Command::MergeLora { ckpt, tasks, out } => {
            commands::merge_lora(&ckpt, tasks.as_deref(), &out)
        }
        Command::Sample {
            ckpt,
            task,
            seed,
            steps,
            omega,
            out,
        } => commands::sample(&ckpt, &task, seed, steps, omega.as_deref(), &out),
        Command::TrainRecraft {
            base,
            config,
            data,
            resume,
            out,
        } => commands::train_recraft(&base, &config, data, resume, out),
        Command::Recraft {
            ckpt,
            image,
            task,
            seed,
            steps,
            out,
        } => commands::recraft(&ckpt, &image, &task, seed, steps, &out),
        Command::Eval {
            ckpt,
            ground_truth: _,
            config,
            data,
            out,
        } => commands::eval(ckpt.as_deref(), &config, data, &out),
        Command::GradCheck { config, seeds } => commands::grad_check(&config, seeds),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
