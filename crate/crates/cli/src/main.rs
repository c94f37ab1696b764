//! `lorag`: ingest a corpus, run the refinement loop, evaluate a dataset,
//! or train the toy policy.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use lorag_core::Backend;

#[derive(Debug, Parser)]
#[command(name = "lorag", version, about = "Iterative retrieval-augmented generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build and persist a BM25 index from a JSONL corpus.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        index: PathBuf,
    },
    /// Run the refinement loop for one query and write its transcript.
    Run {
        #[arg(long)]
        query: String,
        #[command(flatten)]
        common: RunFlags,
    },
    /// Run the loop over a JSONL dataset of {query, reference} and score it.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        common: RunFlags,
    },
    /// Train the toy policy on a task fixture.
    TrainToy(commands::TrainArgs),
}

#[derive(Debug, Args)]
struct RunFlags {
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long = "w-y")]
    w_y: Option<f64>,
    #[arg(long)]
    backend: Option<Backend>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunFlags {
    fn resolve(self) -> Result<config::RunConfig> {
        let flags = config::Overrides {
            index_dir: self.index,
            max_iters: self.max_iters,
            epsilon: self.epsilon,
            k: self.k,
            w_y: self.w_y,
            backend: self.backend,
            endpoint: self.endpoint,
            seed: self.seed,
            output_dir: self.out,
        };
        let env = std::env::var(config::ENDPOINT_ENV).ok();
        config::RunConfig::resolve(self.config.as_deref(), env, flags)
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Ingest { corpus, index } => commands::ingest(&corpus, &index),
        Command::Run { query, common } => commands::run(&query, &common.resolve()?),
        Command::Eval { dataset, common } => commands::eval(&dataset, &common.resolve()?),
        Command::TrainToy(args) => commands::train_toy(&args),
    }
}
