mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mtrs::vision::VisualKind;

/// Multi-temporal remote sensing vision-language pipeline at desk scale.
#[derive(Debug, Parser)]
#[command(name = "mtrs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` (or `section.key=value`) applied on top of the file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    Vqa,
    Cc,
    Video,
}

impl Task {
    fn kind(self) -> VisualKind {
        match self {
            Task::Vqa => VisualKind::Single,
            Task::Cc => VisualKind::Pair,
            Task::Video => VisualKind::Video,
        }
    }
}

fn parse_kind(s: &str) -> Result<VisualKind, String> {
    s.parse()
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a procedural dataset: manifest.jsonl plus pixel files.
    SynthData {
        #[arg(long, value_parser = parse_kind)]
        kind: VisualKind,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        /// Falls back to URSK_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        /// Share of records marked as test.
        #[arg(long, default_value_t = 0.0)]
        test_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: train the change module through a throwaway caption head.
    PretrainChange {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 2: joint instruction tuning (runs stage 1 first unless --init).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: Vec<PathBuf>,
        /// Checkpoint whose encoder, change and projector weights seed the model.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a predictions file.
    Eval {
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline over a manifest and write predictions.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        no_clue: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the packed sequence of one record.
    InspectPack {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learning-rate schedule as step,lr CSV.
    LrCurve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare training configurations on synthetic data.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
