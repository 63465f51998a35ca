//! Finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{synth_corpus, SynthConfig};
use crate::error::Result;
use crate::exec::Execution;

use super::forward::{batch_loss, batch_loss_and_grad, encode_corpus, Example};
use super::params::{ModelConfig, ModelParams};

/// Denominator floor of the relative error, so entries whose true gradient is
/// near zero are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub docs: usize,
    pub entities: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Above this many parameters only a random subset is checked.
    pub full_check_limit: usize,
    /// Fraction checked when subsampling.
    pub subset_fraction: f64,
    /// Scale of the random perturbation added to the initial parameters.
    pub perturbation: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                groups: 2,
                gnn_layers: 1,
                num_relations: 2,
                ..ModelConfig::default()
            }
            .with_dim(8),
            docs: 1,
            entities: 3,
            step: 1e-5,
            tolerance: 1e-4,
            full_check_limit: 5_000,
            subset_fraction: 0.25,
            perturbation: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub total: usize,
    pub passed: bool,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compare `analytic` with central differences of `f` at the given indices.
pub fn compare_gradients(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    step: f64,
    indices: &[usize],
    tolerance: f64,
    locate: &dyn Fn(usize) -> String,
) -> Result<GradReport> {
    let mut probe = x.to_vec();
    let mut worst = (0.0_f64, 0, 0.0, 0.0);
    for &i in indices {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe)?;
        probe[i] = orig - step;
        let down = f(&probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        // NaN compares false, so test it explicitly
        if err > worst.0 || err.is_nan() {
            worst = (err, i, analytic[i], numeric);
            if err.is_nan() {
                break;
            }
        }
    }
    let (max_rel_err, worst_index, a, n) = worst;
    Ok(GradReport {
        max_rel_err,
        worst_index,
        worst_param: locate(worst_index),
        analytic: a,
        numeric: n,
        checked: indices.len(),
        total: x.len(),
        passed: max_rel_err <= tolerance,
    })
}

/// Random parameters and a small synthetic batch for checking.
pub fn gradcheck_problem(cfg: &GradcheckConfig) -> Result<(ModelParams, Vec<Example>)> {
    let synth = SynthConfig {
        num_docs: cfg.docs,
        num_relations: cfg.model.num_relations,
        entities_per_doc: cfg.entities,
        num_entity_types: cfg.model.num_entity_types,
        fact_rate: 1.0,
        seed: cfg.seed,
        ..SynthConfig::default()
    };
    let docs = synth_corpus(&synth)?;
    let examples = encode_corpus(docs, &cfg.model.encoder, Execution::Sequential)?;
    let mut params = ModelParams::init(cfg.model.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD1CE);
    for v in &mut params.values {
        *v += cfg.perturbation * (2.0 * rng.random::<f64>() - 1.0);
    }
    Ok((params, examples))
}

/// Indices to probe: all of them, or a seeded subset for large models.
pub fn probe_indices(total: usize, cfg: &GradcheckConfig) -> Vec<usize> {
    if total <= cfg.full_check_limit {
        return (0..total).collect();
    }
    let k = ((total as f64 * cfg.subset_fraction).ceil() as usize).min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut idx = sample(&mut rng, total, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Check backprop through the whole model against central differences.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradReport> {
    let (params, examples) = gradcheck_problem(cfg)?;
    check_params(&params, &examples, cfg, None)
}

/// As [`gradcheck`] on given inputs. `corrupt` perturbs one analytic entry
/// first, which the report must then single out.
pub fn check_params(
    params: &ModelParams,
    examples: &[Example],
    cfg: &GradcheckConfig,
    corrupt: Option<(usize, f64)>,
) -> Result<GradReport> {
    let batch: Vec<&Example> = examples.iter().collect();
    let (_, mut analytic) = batch_loss_and_grad(params, &batch, Execution::Sequential)?;
    if let Some((i, delta)) = corrupt {
        analytic[i] += delta;
    }
    let f = |x: &[f64]| -> Result<f64> {
        let p = ModelParams {
            config: params.config.clone(),
            layout: params.layout.clone(),
            values: x.to_vec(),
        };
        batch_loss(&p, &batch, Execution::Sequential)
    };
    let indices = probe_indices(params.len(), cfg);
    let layout = &params.layout;
    compare_gradients(&f, &params.values, &analytic, cfg.step, &indices, cfg.tolerance, &|i| layout.locate(i))
}
