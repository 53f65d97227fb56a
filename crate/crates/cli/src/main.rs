mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Patient-to-criterion matching with per-patient memory trees.
#[derive(Debug, Parser)]
#[command(name = "memtree", version)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Threads for per-pair work. Outputs do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Flat `key = value` TOML file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic ontology and cohort with planted targets.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Embed one description per line into a tab-separated table.
    Embed {
        #[arg(long)]
        descriptions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dimension of the hash embedder.
        #[arg(long)]
        dim: Option<usize>,
        /// Look descriptions up in a precomputed table instead of hashing.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Train on a corpus directory; writes model.ckpt and history.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Precomputed embedding table covering descriptions and tokens.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Score a checkpoint; writes report.json, report.txt and predictions.jsonl.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
        split: SplitChoice,
    },
    /// Class probabilities for one (patient, criterion) pair.
    Match {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        patient: String,
        #[arg(long)]
        criterion: String,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Attended nodes behind one prediction.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        patient: String,
        #[arg(long)]
        criterion: String,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitChoice {
    /// Held-out patients of the split recorded in the checkpoint.
    Test,
    Val,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Dot,
    Text,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = match e.downcast_ref::<commands::UsageError>() {
                Some(_) => (2, "usage"),
                None => (
                    1,
                    e.downcast_ref::<memtree::Error>().map_or("runtime", memtree::Error::kind),
                ),
            };
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("error: kind={kind} message={message}");
            if code == 2 {
                eprintln!("run `memtree --help` for usage");
            }
            ExitCode::from(code)
        }
    }
}
