//! Effective run configuration: built-in defaults, then an optional JSON
//! config file, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use docrel::corpus::SynthConfig;
use docrel::metrics::InferMode;
use docrel::pairgraph::{BilinearMode, GnnSummand};
use docrel::training::{GradcheckConfig, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

pub const DATA_DIR_VAR: &str = "DOCREL_DATA_DIR";
const DEFAULT_DATA_DIR: &str = "docrel-data";

pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

/// Everything a run can be configured with. One seed drives corpus
/// generation, parameter init, shuffling and gradcheck sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    /// Documents of the generated corpus held out as a dev split.
    pub held_out: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gradcheck: GradcheckConfig,
    pub infer_eval: InferMode,
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig {
                num_docs: 80,
                ..SynthConfig::default()
            },
            held_out: 16,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            gradcheck: GradcheckConfig::default(),
            infer_eval: InferMode::All,
            jobs: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BilinearArg {
    Vector,
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SummandArg {
    Neighbor,
    #[value(name = "self")]
    SelfNode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InferArg {
    All,
    R3,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigFlags {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Embedding width of both the encoder and the head.
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    #[arg(long, global = true)]
    pub groups: Option<usize>,
    #[arg(long, global = true)]
    pub gnn_layers: Option<usize>,
    /// Peak learning rate of the head.
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Warmup as a fraction of all optimizer steps.
    #[arg(long, global = true)]
    pub warmup: Option<f64>,
    /// Cap on the number of optimizer steps.
    #[arg(long, global = true)]
    pub steps: Option<u64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Worker threads for data-parallel work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub bilinear: Option<BilinearArg>,
    #[arg(long, global = true, value_enum)]
    pub gnn_summand: Option<SummandArg>,
    #[arg(long, global = true, value_enum)]
    pub infer_eval: Option<InferArg>,
}

impl ConfigFlags {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => read_config(path)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.synth.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.gradcheck.seed = cfg.seed;
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.synth.validate()?;
        if cfg.jobs == Some(0) {
            anyhow::bail!("--jobs must be at least 1");
        }
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = self.dim {
            cfg.model = cfg.model.clone().with_dim(d);
            cfg.gradcheck.model = cfg.gradcheck.model.clone().with_dim(d);
        }
        if let Some(k) = self.groups {
            cfg.model.groups = k;
            cfg.gradcheck.model.groups = k;
        }
        if let Some(l) = self.gnn_layers {
            cfg.model.gnn_layers = l;
            cfg.gradcheck.model.gnn_layers = l;
        }
        if let Some(b) = self.bilinear {
            let mode = match b {
                BilinearArg::Vector => BilinearMode::Vector,
                BilinearArg::Scalar => BilinearMode::Scalar,
            };
            cfg.model.bilinear = mode;
            cfg.gradcheck.model.bilinear = mode;
        }
        if let Some(s) = self.gnn_summand {
            let s = match s {
                SummandArg::Neighbor => GnnSummand::Neighbor,
                SummandArg::SelfNode => GnnSummand::SelfNode,
            };
            cfg.model.gnn_summand = s;
            cfg.gradcheck.model.gnn_summand = s;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr_head = lr;
        }
        if let Some(w) = self.warmup {
            cfg.train.warmup_fraction = w;
        }
        if let Some(s) = self.steps {
            cfg.train.max_steps = Some(s);
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(j) = self.jobs {
            cfg.jobs = Some(j);
        }
        if let Some(m) = self.infer_eval {
            cfg.infer_eval = match m {
                InferArg::All => InferMode::All,
                InferArg::R3 => InferMode::R3,
            };
        }
    }
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}
