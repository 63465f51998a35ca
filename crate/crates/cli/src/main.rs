//! `docrel`: synthesize or ingest corpora, encode, train, evaluate and inspect
//! the relation extraction head. Every command writes its outputs and a
//! `manifest.json` into one output directory.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::{default_input, ModelInputs, TrainInputs};
use config::{data_dir, ConfigFlags};

#[derive(Debug, Parser)]
#[command(name = "docrel", version, about = "Document-level relation extraction head")]
struct Cli {
    #[command(flatten)]
    flags: ConfigFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a DocRED-format JSON file into a corpus file.
    Ingest {
        input: PathBuf,
        /// `{"P17": 1, ...}` relation id map; otherwise relations found in the labels.
        #[arg(long)]
        rel2id: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus with planted trigger tokens.
    Synth {
        /// Number of documents, including the held-out split.
        #[arg(long)]
        docs: Option<usize>,
        #[arg(long)]
        held_out: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the mock encoder over a corpus and store the encodings.
    Encode {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the head and write a checkpoint and loss curve.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Held-out corpus whose F1 is tracked per epoch.
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Directory written by `encode`; otherwise the corpus is encoded on the fly.
        #[arg(long)]
        encodings: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a corpus and write metrics.json.
    Eval {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        encodings: Option<PathBuf>,
        /// Training corpus whose facts are excluded for Ign F1.
        #[arg(long)]
        train_corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write positive predictions as JSON lines.
    Predict {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        encodings: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a document's entity-pair graph, with per-pair scores when a checkpoint is given.
    InspectGraph {
        doc_id: String,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = cli.flags.resolve()?;
    if let Some(j) = cfg.jobs {
        docrel::exec::configure_jobs(j);
    }
    let data = data_dir();
    let out_or = |o: Option<PathBuf>, name: &str| o.unwrap_or_else(|| data.join(name));
    let synth_corpus = || default_input(&data, "synth", "corpus.json");
    let checkpoint = || default_input(&data, "train", "model.ckpt");
    match cli.command {
        Command::Ingest { input, rel2id, out } => {
            commands::ingest(&cfg, &input, rel2id.as_deref(), &out_or(out, "ingest"))?;
        }
        Command::Synth { docs, held_out, out } => {
            if let Some(n) = docs {
                cfg.synth.num_docs = n;
            }
            if let Some(k) = held_out {
                cfg.held_out = k;
            }
            commands::synth(&cfg, &out_or(out, "synth"))?;
        }
        Command::Encode { corpus, out } => {
            commands::encode(&cfg, &corpus.unwrap_or_else(synth_corpus), &out_or(out, "encode"))?;
        }
        Command::Train {
            corpus,
            dev,
            encodings,
            out,
        } => {
            let corpus = corpus.unwrap_or_else(synth_corpus);
            let inp = TrainInputs {
                corpus: &corpus,
                dev: dev.as_deref(),
                encodings: encodings.as_deref(),
            };
            commands::train_cmd(&cfg, &inp, &out_or(out, "train"))?;
        }
        Command::Eval {
            corpus,
            checkpoint: ckpt,
            encodings,
            train_corpus,
            out,
        } => {
            let corpus = corpus.unwrap_or_else(|| default_input(&data, "synth", "dev.json"));
            let ckpt = ckpt.unwrap_or_else(checkpoint);
            let inp = ModelInputs {
                corpus: &corpus,
                checkpoint: &ckpt,
                encodings: encodings.as_deref(),
                dim_flag: cli.flags.dim,
            };
            commands::eval(&cfg, &inp, train_corpus.as_deref(), &out_or(out, "eval"))?;
        }
        Command::Gradcheck { out } => {
            return commands::gradcheck_cmd(&cfg, &out_or(out, "gradcheck"));
        }
        Command::Predict {
            corpus,
            checkpoint: ckpt,
            encodings,
            out,
        } => {
            let corpus = corpus.unwrap_or_else(|| default_input(&data, "synth", "dev.json"));
            let ckpt = ckpt.unwrap_or_else(checkpoint);
            let inp = ModelInputs {
                corpus: &corpus,
                checkpoint: &ckpt,
                encodings: encodings.as_deref(),
                dim_flag: cli.flags.dim,
            };
            commands::predict_cmd(&cfg, &inp, &out_or(out, "predict"))?;
        }
        Command::InspectGraph {
            doc_id,
            corpus,
            checkpoint: ckpt,
            out,
        } => {
            let corpus = corpus.unwrap_or_else(synth_corpus);
            commands::inspect_graph(&cfg, &corpus, &doc_id, ckpt.as_deref(), &out_or(out, "inspect-graph"))?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
