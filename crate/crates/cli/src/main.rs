//! `matu`: ingest, embed, score, baseline, eval, route, synth, interpret.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
//! Failures also print one JSON line on stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use matu_core::embedding::cache_key;
use matu_core::{Error, ErrorClass};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numerical => 3,
            },
        }
    }

    /// `{"error": {"class", "kind", "message", ...}}`; a missing embedding
    /// also names its cache key.
    fn json_line(&self, model_id: &str) -> String {
        let (class, kind, message) = match self {
            CliError::Usage(m) => ("usage", "Usage".to_string(), m.clone()),
            CliError::Core(e) => {
                let class = match e.class() {
                    ErrorClass::Usage => "usage",
                    ErrorClass::Data => "data",
                    ErrorClass::Numerical => "numerical",
                };
                let dbg = format!("{e:?}");
                let kind = dbg.split(['(', ' ', '{']).next().unwrap_or("").to_string();
                (class, kind, e.to_string())
            }
        };
        let mut body = serde_json::json!({"class": class, "kind": kind, "message": message});
        if let CliError::Core(Error::MissingEmbedding(text)) = self {
            let key: String = cache_key(model_id, text).iter().map(|b| format!("{b:02x}")).collect();
            body["key"] = key.into();
            body["text"] = text.clone().into();
        }
        serde_json::json!({ "error": body }).to_string()
    }
}

#[derive(Parser, Debug)]
#[command(name = "matu", version, about = "Uncertainty scores for multi-agent LLM runs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Input flags shared by commands that read a log and the embedding cache.
#[derive(Args, Debug, Clone, Default)]
pub struct InputArgs {
    /// Key-value config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trajectory log (JSON lines).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Embedding cache file.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Embedding model id (part of every cache key).
    #[arg(long)]
    pub model: Option<String>,
    /// Leading embedding coordinates kept before normalization.
    #[arg(long)]
    pub d_target: Option<usize>,
    /// Retained step kinds, e.g. `message,tool_result,final_answer`.
    #[arg(long)]
    pub steps: Option<String>,
}

/// Fit flags shared by `score` and `interpret`.
#[derive(Args, Debug, Clone, Default)]
pub struct FitArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Relative loss-change tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
}

/// Slice shape of generated tasks; defaults are the shipped demo values.
#[derive(Args, Debug, Clone)]
pub struct ShapeArgs {
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub agents: Option<usize>,
    #[arg(long)]
    pub min_steps: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Embedding dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a trajectory log and summarize each task.
    Ingest {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fill the embedding cache for every retained step and final answer.
    Embed {
        #[command(flatten)]
        input: InputArgs,
        /// Embedding service URL; without it the command runs offline.
        #[arg(long)]
        url: Option<String>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Precomputed cache files merged in before any fetch.
        #[arg(long)]
        precomputed: Vec<PathBuf>,
    },
    /// Score every task (offline, from the cache).
    Score {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        fit: FitArgs,
        /// Largest rank fitted; clipped per task to min(d, longest slice).
        #[arg(long)]
        rmax: Option<usize>,
        /// `rel` or `abs`.
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        no_warm_start: bool,
        /// Worker threads (0 picks the number of cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Reports as JSON lines; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a `task_id,U,normalized_U` table.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Timing sidecar (JSON).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Spectral agreement baseline over the runs' answers.
    Baseline {
        #[command(flatten)]
        input: InputArgs,
        /// Directory of `<task_id>.csv` agreement matrices; otherwise a
        /// clipped-cosine proxy over answer embeddings is used.
        #[arg(long)]
        agreement_dir: Option<PathBuf>,
        /// `final` (final answers) or `whole` (all retained steps per run).
        #[arg(long, default_value = "final")]
        variant: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// AUROC and AUARC per method.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `name=path` to a JSON-lines score file (`U` or `score` field) or
        /// a CSV with `task_id` and `U` columns; repeatable.
        #[arg(long = "scores", required = true)]
        scores: Vec<String>,
        /// `task_id,correct` CSV.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Log whose run labels define task labels when no CSV is given.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pick the lowest-uncertainty backbone per task.
    Route {
        /// CSV with `task_id,backbone,U,correct`.
        #[arg(long, conflicts_with = "simulate")]
        candidates: Option<PathBuf>,
        /// Use the seeded backbone simulation instead of a file.
        #[arg(long)]
        simulate: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 200)]
        tasks: usize,
        #[arg(long, default_value_t = 4)]
        backbones: usize,
        /// Correlation between uncertainty and latent error.
        #[arg(long, default_value_t = 0.8)]
        rho: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic demo dataset and a matching config file.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = matu_core::synthetic::DEMO_TASKS)]
        tasks: usize,
        /// Fraction of runs redrawn in incorrect tasks.
        #[arg(long, default_value_t = 0.8)]
        divergence: f64,
        #[arg(long, default_value_t = 0.5)]
        incorrect_fraction: f64,
        #[arg(long, default_value = "demo")]
        stem: String,
        #[command(flatten)]
        shape: ShapeArgs,
    },
    /// Factor loadings of one component for one task.
    Interpret {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        task: String,
        #[arg(long)]
        rank: usize,
        /// Zero-based component index.
        #[arg(long, default_value_t = 0)]
        component: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => {
                    let err = CliError::Usage(e.kind().to_string());
                    eprintln!("{}", err.json_line(""));
                    ExitCode::from(1)
                }
            };
        }
    };
    let mut model_id = String::new();
    match commands::dispatch(cli.command, &mut model_id) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.json_line(&model_id));
            ExitCode::from(e.exit_code())
        }
    }
}
