//! End-to-end training of the relation head over encoded documents.

mod checkpoint;
mod forward;
mod gradcheck;
mod optim;
mod params;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::predict;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::metrics::{gold_triplets, micro_f1, Prediction, TripletSet};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    batch_loss, batch_loss_and_grad, doc_logits, doc_loss, doc_loss_and_grad, doc_trace, encode_corpus, DocTrace,
    Example,
};
pub use gradcheck::{
    check_params, compare_gradients, gradcheck, gradcheck_problem, probe_indices, relative_error, GradReport,
    GradcheckConfig, REL_ERR_FLOOR,
};
pub use optim::{AdamState, AdamW, LrSchedule};
pub use params::{orthogonal, ModelConfig, ModelParams, ModelVars, ParamLayout, Pooling, Slot, SlotInit};

/// Learning rate suggested for a pretrained encoder. The encoder here is a
/// fixed stub, so this is carried in the config but never applied.
pub const ENCODER_LR: f64 = 2e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_head: f64,
    pub lr_encoder: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    /// Caps the total number of optimizer steps when set.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamW,
    pub execution: Execution,
    /// Compute training and dev F1 every this many epochs (0 disables).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_head: 1e-4,
            lr_encoder: ENCODER_LR,
            warmup_fraction: 0.06,
            epochs: 30,
            max_steps: None,
            batch_size: 4,
            seed: 0,
            optimizer: AdamW::default(),
            execution: Execution::Parallel,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_head >= 0.0 && self.lr_head.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and nonnegative", self.lr_head)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup fraction {} outside [0, 1)", self.warmup_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, num_docs: usize) -> u64 {
        let per_epoch = num_docs.div_ceil(self.batch_size) as u64;
        let all = per_epoch * self.epochs as u64;
        self.max_steps.map_or(all, |m| m.min(all))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_f1: Option<f64>,
    pub dev_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub step: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final parameters, or the last finite ones if training diverged.
    pub params: ModelParams,
    pub optimizer: AdamState,
    pub curve: Vec<CurvePoint>,
    pub epochs: Vec<EpochStats>,
    pub diverged: Option<Divergence>,
}

/// Train from `init` on `train`, optionally tracking `dev` F1.
pub fn train(init: ModelParams, train: &[Example], dev: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training corpus".into()));
    }
    let total = cfg.total_steps(train.len());
    let schedule = LrSchedule::new(cfg.lr_head, cfg.warmup_fraction, total);
    let decay = init.layout.decay_mask();
    let mut params = init;
    let mut state = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::new();
    let mut epochs = Vec::new();
    let train_gold = gold_triplets(train.iter().map(|e| &e.doc));
    let dev_gold = gold_triplets(dev.iter().map(|e| &e.doc));
    let mut step = 0u64;
    let mut epoch = 0;
    while step < total {
        epoch += 1;
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grad) = match batch_loss_and_grad(&params, &batch, cfg.execution) {
                Ok(r) => r,
                Err(Error::NonFinite { stage, op }) => {
                    return Ok(diverged(params, state, curve, epochs, epoch, step, format!("non-finite {op} in {stage}")));
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Ok(diverged(params, state, curve, epochs, epoch, step, format!("loss {loss}")));
            }
            let lr = schedule.at(step);
            let mut next = params.values.clone();
            let mut next_state = state.clone();
            cfg.optimizer.step(&mut next, &grad, &mut next_state, lr, &decay);
            curve.push(CurvePoint { step, epoch, lr, loss });
            if next.iter().any(|v| !v.is_finite()) {
                return Ok(diverged(params, state, curve, epochs, epoch, step, "non-finite parameter".into()));
            }
            params.values = next;
            state = next_state;
            sum += loss;
            batches += 1;
            step += 1;
        }
        let evaluate = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || step >= total);
        let (train_f1, dev_f1) = if evaluate {
            let t = micro_f1(&predicted_triplets(&params, train, cfg.execution)?, &train_gold).f1;
            let d = if dev.is_empty() {
                None
            } else {
                Some(micro_f1(&predicted_triplets(&params, dev, cfg.execution)?, &dev_gold).f1)
            };
            (Some(t), d)
        } else {
            (None, None)
        };
        epochs.push(EpochStats {
            epoch,
            mean_loss: if batches > 0 { sum / batches as f64 } else { f64::NAN },
            train_f1,
            dev_f1,
        });
    }
    Ok(TrainOutcome {
        params,
        optimizer: state,
        curve,
        epochs,
        diverged: None,
    })
}

fn diverged(
    params: ModelParams,
    optimizer: AdamState,
    curve: Vec<CurvePoint>,
    epochs: Vec<EpochStats>,
    epoch: usize,
    step: u64,
    reason: String,
) -> TrainOutcome {
    TrainOutcome {
        params,
        optimizer,
        curve,
        epochs,
        diverged: Some(Divergence { epoch, step, reason }),
    }
}

/// Positive predictions with score `logit_r − logit_TH`, in document and pair order.
pub fn predict_corpus(params: &ModelParams, examples: &[Example], exec: Execution) -> Result<Vec<Prediction>> {
    let per_doc = exec::map(exec, examples, |ex| {
        let logits = doc_logits(params, ex)?;
        let mut out = Vec::new();
        for pl in &logits {
            let th = pl.threshold();
            for r in predict(pl) {
                out.push(Prediction {
                    doc_id: ex.doc.doc_id.clone(),
                    head: pl.pair.0,
                    tail: pl.pair.1,
                    relation: r,
                    score: pl.logits[r as usize] - th,
                });
            }
        }
        Ok::<_, Error>(out)
    });
    let mut all = Vec::new();
    for p in per_doc {
        all.extend(p?);
    }
    Ok(all)
}

pub fn predicted_triplets(params: &ModelParams, examples: &[Example], exec: Execution) -> Result<TripletSet> {
    Ok(predict_corpus(params, examples, exec)?.iter().map(Prediction::triplet).collect())
}

/// `step,lr,loss` with a header line.
pub fn write_loss_curve(w: &mut impl Write, curve: &[CurvePoint]) -> Result<()> {
    writeln!(w, "step,lr,loss")?;
    for p in curve {
        writeln!(w, "{},{:e},{:.17e}", p.step, p.lr, p.loss)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthConfig};

    fn small() -> (ModelParams, Vec<Example>) {
        let mc = ModelConfig {
            groups: 2,
            gnn_layers: 1,
            num_relations: 2,
            ..ModelConfig::default()
        }
        .with_dim(8);
        let docs = synth_corpus(&SynthConfig {
            num_docs: 6,
            num_relations: 2,
            entities_per_doc: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let ex = encode_corpus(docs, &mc.encoder, Execution::Sequential).unwrap();
        (ModelParams::init(mc, 2).unwrap(), ex)
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            lr_head: 1e-2,
            epochs: 3,
            batch_size: 2,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_same_curve() {
        let (p, ex) = small();
        let a = train(p.clone(), &ex, &[], &cfg()).unwrap();
        let b = train(p, &ex, &[], &cfg()).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.params, b.params);
        assert_eq!(a.curve.len(), 9);
    }

    #[test]
    fn zero_lr_gives_constant_curve() {
        let (p, ex) = small();
        let c = TrainConfig {
            lr_head: 0.0,
            batch_size: 6,
            ..cfg()
        };
        let out = train(p.clone(), &ex, &[], &c).unwrap();
        // one full batch per epoch; only the summation order changes
        assert!(out.curve.windows(2).all(|w| (w[0].loss - w[1].loss).abs() < 1e-12));
        assert_eq!(out.params, p);
    }

    #[test]
    fn first_warmup_step_changes_nothing() {
        let (p, ex) = small();
        let c = TrainConfig {
            warmup_fraction: 0.5,
            max_steps: Some(1),
            ..cfg()
        };
        let out = train(p.clone(), &ex, &[], &c).unwrap();
        assert_eq!(out.curve[0].lr, 0.0);
        assert_eq!(out.params.values, p.values);
    }

    #[test]
    fn divergence_returns_last_good_params() {
        let (p, ex) = small();
        let c = TrainConfig {
            lr_head: f64::MAX,
            warmup_fraction: 0.0,
            ..cfg()
        };
        let out = train(p, &ex, &[], &c).unwrap();
        let d = out.diverged.expect("should diverge");
        assert!(out.params.values.iter().all(|v| v.is_finite()));
        assert!(d.step <= out.curve.len() as u64);
    }

    #[test]
    fn curve_csv() {
        let mut buf = Vec::new();
        write_loss_curve(&mut buf, &[CurvePoint { step: 0, epoch: 1, lr: 0.5, loss: 1.25 }]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("step,lr,loss\n0,5e-1,1.25"));
    }

    #[test]
    fn bad_config_rejected() {
        let (p, ex) = small();
        let c = TrainConfig {
            warmup_fraction: 1.0,
            ..cfg()
        };
        assert!(matches!(train(p, &ex, &[], &c), Err(Error::Config(_))));
    }
}
