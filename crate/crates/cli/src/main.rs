mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Pixel-global self-supervised pretraining, fine-tuning and evaluation.
#[derive(Parser, Debug)]
#[command(name = "pgssl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic segmentation dataset.
    Synth(Common),
    /// Self-supervised pretraining of student and teacher.
    Pretrain(Common),
    /// Supervised fine-tuning with early stopping.
    Finetune(Common),
    /// Pretrain on the training images, then fine-tune.
    Semi(Common),
    /// Fine-tune on growing fractions of the training cases.
    Holdout(Common),
    /// Evaluate a segmentation checkpoint.
    Eval(Common),
    /// Finite-difference gradient checks of every layer and loss.
    Gradcheck(Common),
    /// Pretrain and fine-tune once per loss configuration.
    Ablate(Common),
    /// Write the teacher's MC-dropout uncertainty map for one image.
    ExportUncertainty(Common),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory; nothing is written elsewhere.
    #[arg(long, value_name = "DIR", default_value = "pgssl-out")]
    pub out: PathBuf,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Epochs of every training phase the command runs.
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Batch size of every training phase the command runs.
    #[arg(long, value_name = "N")]
    pub batch: Option<usize>,
    /// go, gp, gpc or full.
    #[arg(long, value_name = "MODE")]
    pub ablation: Option<String>,
    /// Comma-separated training fractions for `holdout`.
    #[arg(long, value_name = "LIST")]
    pub fractions: Option<String>,
    /// Starting weights: a checkpoint path or `random`.
    #[arg(long, value_name = "PATH|random")]
    pub init: Option<String>,
    /// Run gradient checks in 64-bit.
    #[arg(long)]
    pub verify_f64: bool,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Dataset manifest, or a directory holding `manifest.csv`. Without
    /// it a synthetic dataset is generated from the `synth.*` keys.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Checkpoint read by `eval` and `export-uncertainty`.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// F32IMG image read by `export-uncertainty`.
    #[arg(long, value_name = "PATH")]
    pub image: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (name, common) = match cli.command {
        Command::Synth(c) => ("synth", c),
        Command::Pretrain(c) => ("pretrain", c),
        Command::Finetune(c) => ("finetune", c),
        Command::Semi(c) => ("semi", c),
        Command::Holdout(c) => ("holdout", c),
        Command::Eval(c) => ("eval", c),
        Command::Gradcheck(c) => ("gradcheck", c),
        Command::Ablate(c) => ("ablate", c),
        Command::ExportUncertainty(c) => ("export-uncertainty", c),
    };
    match commands::run(name, &common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `pgssl {name} --help` for usage.");
            ExitCode::from(1)
        }
        Err(commands::Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
