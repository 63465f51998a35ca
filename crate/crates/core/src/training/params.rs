//! Model configuration and the flat parameter vector.
//!
//! Every trainable scalar lives in one `Vec<f64>`. [`ParamLayout`] names the
//! tensors in a fixed order; that order is also the on-disk checkpoint order:
//!
//! 1. `cgmi.w_q`, `cgmi.w_k` (`d×d`)
//! 2. `pair.w_h`, `pair.w_t`, `pair.w_c1`, `pair.w_c2` (`d×d`), `pair.w_p.{i}`
//!    (`d/k × d/k`, one per group), `pair.coref` (`types × d_coref`)
//! 3. per GNN layer `l`: `gnn.{l}.q`, `.k`, `.w_r`, `.ffn1` (`d_node×d_node`),
//!    `.ffn1_b`, `.ffn2`, `.ffn2_b`, `.ln_gain`, `.ln_bias`
//! 4. `cls.w_a` (`d × (2d + d_node)`), `cls.b_a`, `cls.w_b` (`(R+1) × d`), `cls.b_b`
//!
//! Matrices are stored row-major as `out × in`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cgmi::AttentionParams;
use crate::classifier::{ClassifierParams, ClassifierVars};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::pairgraph::{BilinearMode, GnnLayerParams, GnnLayerVars, GnnSummand, PairNodeParams, PairNodeVars};

/// How an entity's mentions are pooled for a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Cross-attention guided by the pair context.
    #[default]
    Context,
    /// Plain mean of the mention rows.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub groups: usize,
    /// Width of the coreference (entity-type) embedding; `None` means `max(1, dim / 6)`.
    pub coref_dim: Option<usize>,
    pub gnn_layers: usize,
    pub num_relations: usize,
    pub num_entity_types: usize,
    pub bilinear: BilinearMode,
    pub gnn_summand: GnnSummand,
    pub pooling: Pooling,
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            groups: 4,
            coref_dim: None,
            gnn_layers: 3,
            num_relations: 4,
            num_entity_types: 3,
            bilinear: BilinearMode::Vector,
            gnn_summand: GnnSummand::Neighbor,
            pooling: Pooling::Context,
            encoder: EncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Set the embedding dimension of both the model and the encoder.
    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = dim;
        self.encoder.dim = dim;
        self
    }

    pub fn coref_width(&self) -> usize {
        self.coref_dim.unwrap_or((self.dim / 6).max(1))
    }

    pub fn node_dim(&self) -> usize {
        self.dim + 2 * self.coref_width()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if self.groups == 0 || !self.dim.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} groups",
                self.dim, self.groups
            )));
        }
        if self.encoder.dim != self.dim {
            return Err(Error::Dimension {
                what: "encoder output dimension".into(),
                expected: self.dim,
                found: self.encoder.dim,
            });
        }
        if self.num_relations == 0 {
            return Err(Error::Config("num_relations must be positive".into()));
        }
        if self.num_entity_types == 0 {
            return Err(Error::Config("num_entity_types must be positive".into()));
        }
        if self.coref_width() == 0 {
            return Err(Error::Config("coref_dim must be positive".into()));
        }
        if self.encoder.window <= self.encoder.overlap {
            return Err(Error::Config(format!(
                "encoder window {} must exceed overlap {}",
                self.encoder.window, self.encoder.overlap
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotInit {
    Orthogonal,
    Zero,
    One,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub init: SlotInit,
    /// Receives decoupled weight decay.
    pub decay: bool,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct GnnSlots {
    q: usize,
    k: usize,
    w_r: usize,
    ffn1: usize,
    ffn1_b: usize,
    ffn2: usize,
    ffn2_b: usize,
    ln_gain: usize,
    ln_bias: usize,
}

/// Named tensors over the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    slots: Vec<Slot>,
    total: usize,
    w_q: usize,
    w_k: usize,
    w_h: usize,
    w_t: usize,
    w_c1: usize,
    w_c2: usize,
    w_p: Vec<usize>,
    coref: usize,
    gnn: Vec<GnnSlots>,
    cls_w_a: usize,
    cls_b_a: usize,
    cls_w_b: usize,
    cls_b_b: usize,
}

struct LayoutBuilder {
    slots: Vec<Slot>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: SlotInit, decay: bool) -> usize {
        self.slots.push(Slot {
            name,
            offset: self.total,
            rows,
            cols,
            init,
            decay,
        });
        self.total += rows * cols;
        self.slots.len() - 1
    }

    fn matrix(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        self.add(name.into(), rows, cols, SlotInit::Orthogonal, true)
    }

    fn vector(&mut self, name: impl Into<String>, len: usize, init: SlotInit) -> usize {
        self.add(name.into(), len, 1, init, false)
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.dim;
        let g = d / cfg.groups;
        let dn = cfg.node_dim();
        let r = cfg.num_relations;
        let mut b = LayoutBuilder {
            slots: Vec::new(),
            total: 0,
        };
        let w_q = b.matrix("cgmi.w_q", d, d);
        let w_k = b.matrix("cgmi.w_k", d, d);
        let w_h = b.matrix("pair.w_h", d, d);
        let w_t = b.matrix("pair.w_t", d, d);
        let w_c1 = b.matrix("pair.w_c1", d, d);
        let w_c2 = b.matrix("pair.w_c2", d, d);
        let w_p = (0..cfg.groups).map(|i| b.matrix(format!("pair.w_p.{i}"), g, g)).collect();
        let coref = b.add("pair.coref".into(), cfg.num_entity_types, cfg.coref_width(), SlotInit::Orthogonal, false);
        let gnn = (0..cfg.gnn_layers)
            .map(|l| GnnSlots {
                q: b.matrix(format!("gnn.{l}.q"), dn, dn),
                k: b.matrix(format!("gnn.{l}.k"), dn, dn),
                w_r: b.matrix(format!("gnn.{l}.w_r"), dn, dn),
                ffn1: b.matrix(format!("gnn.{l}.ffn1"), dn, dn),
                ffn1_b: b.vector(format!("gnn.{l}.ffn1_b"), dn, SlotInit::Zero),
                ffn2: b.matrix(format!("gnn.{l}.ffn2"), dn, dn),
                ffn2_b: b.vector(format!("gnn.{l}.ffn2_b"), dn, SlotInit::Zero),
                ln_gain: b.vector(format!("gnn.{l}.ln_gain"), dn, SlotInit::One),
                ln_bias: b.vector(format!("gnn.{l}.ln_bias"), dn, SlotInit::Zero),
            })
            .collect();
        let cls_w_a = b.matrix("cls.w_a", d, 2 * d + dn);
        let cls_b_a = b.vector("cls.b_a", d, SlotInit::Zero);
        let cls_w_b = b.matrix("cls.w_b", r + 1, d);
        let cls_b_b = b.vector("cls.b_b", r + 1, SlotInit::Zero);
        Self {
            slots: b.slots,
            total: b.total,
            w_q,
            w_k,
            w_h,
            w_t,
            w_c1,
            w_c2,
            w_p,
            coref,
            gnn,
            cls_w_a,
            cls_b_a,
            cls_w_b,
            cls_b_b,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.name == name)
    }

    /// Human-readable name of one flat index, e.g. `gnn.0.q[3,4]`.
    pub fn locate(&self, index: usize) -> String {
        let i = self.slots.partition_point(|s| s.offset + s.len() <= index);
        match self.slots.get(i) {
            Some(s) if s.range().contains(&index) => {
                let k = index - s.offset;
                if s.cols == 1 {
                    format!("{}[{}]", s.name, k)
                } else {
                    format!("{}[{},{}]", s.name, k / s.cols, k % s.cols)
                }
            }
            _ => format!("<out of range {index}>"),
        }
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for s in &self.slots {
            mask[s.range()].fill(s.decay);
        }
        mask
    }
}

/// Trainable parameters plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

/// Orthogonal `rows × cols` matrix: orthonormal columns when `rows ≥ cols`,
/// orthonormal rows otherwise.
pub fn orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let big = rows.max(cols);
    let small = rows.min(cols);
    let g = DMatrix::<f64>::from_fn(big, small, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..small {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Matrix::from_vec(rows, cols, (0..rows * cols)
        .map(|i| {
            let (a, b) = (i / cols, i % cols);
            if rows >= cols {
                q[(a, b)]
            } else {
                q[(b, a)]
            }
        })
        .collect())
}

impl ModelParams {
    /// Orthogonal matrices, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut values = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in layout.slots() {
            match s.init {
                SlotInit::Zero => {}
                SlotInit::One => values[s.range()].fill(1.0),
                SlotInit::Orthogonal => {
                    let m = orthogonal(s.rows, s.cols, &mut rng);
                    values[s.range()].copy_from_slice(m.as_slice());
                }
            }
        }
        Ok(Self {
            config,
            layout,
            values,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let values = vec![0.0; layout.total()];
        Ok(Self {
            config,
            layout,
            values,
        })
    }

    pub fn from_values(config: ModelConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if values.len() != layout.total() {
            return Err(Error::Dimension {
                what: "parameter count".into(),
                expected: layout.total(),
                found: values.len(),
            });
        }
        Ok(Self {
            config,
            layout,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn matrix(&self, slot: usize) -> Matrix {
        let s = &self.layout.slots[slot];
        Matrix::from_vec(s.rows, s.cols, self.values[s.range()].to_vec())
    }

    fn vector(&self, slot: usize) -> Vec<f64> {
        self.values[self.layout.slots[slot].range()].to_vec()
    }

    pub fn slot_values(&self, name: &str) -> Option<&[f64]> {
        self.layout.slot(name).map(|s| &self.values[s.range()])
    }

    pub fn slot_values_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.slot(name)?.range();
        Some(&mut self.values[range])
    }

    pub fn attention(&self) -> AttentionParams {
        AttentionParams {
            w_q: self.matrix(self.layout.w_q),
            w_k: self.matrix(self.layout.w_k),
        }
    }

    pub fn pair_node(&self) -> PairNodeParams {
        PairNodeParams {
            w_h: self.matrix(self.layout.w_h),
            w_t: self.matrix(self.layout.w_t),
            w_c1: self.matrix(self.layout.w_c1),
            w_c2: self.matrix(self.layout.w_c2),
            w_p: self.layout.w_p.iter().map(|&s| self.matrix(s)).collect(),
            coref: self.matrix(self.layout.coref),
        }
    }

    pub fn gnn_layer(&self, l: usize) -> GnnLayerParams {
        let g = &self.layout.gnn[l];
        GnnLayerParams {
            q: self.matrix(g.q),
            k: self.matrix(g.k),
            w_r: self.matrix(g.w_r),
            ffn1: self.matrix(g.ffn1),
            ffn1_b: self.vector(g.ffn1_b),
            ffn2: self.matrix(g.ffn2),
            ffn2_b: self.vector(g.ffn2_b),
            ln_gain: self.vector(g.ln_gain),
            ln_bias: self.vector(g.ln_bias),
        }
    }

    pub fn classifier(&self) -> ClassifierParams {
        ClassifierParams {
            w_a: self.matrix(self.layout.cls_w_a),
            b_a: self.vector(self.layout.cls_b_a),
            w_b: self.matrix(self.layout.cls_w_b),
            b_b: self.vector(self.layout.cls_b_b),
        }
    }

    fn param(&self, tape: &mut Tape, slot: usize) -> Var {
        let s = &self.layout.slots[slot];
        tape.param(s.offset, s.cols, self.values[s.range()].to_vec())
    }

    /// Record every tensor as a trainable leaf, skipping the ones `pooling`
    /// leaves unused so their gradient stays exactly zero.
    pub fn vars(&self, tape: &mut Tape) -> ModelVars {
        let attention = match self.config.pooling {
            Pooling::Context => Some((self.param(tape, self.layout.w_q), self.param(tape, self.layout.w_k))),
            Pooling::Mean => None,
        };
        let pair = PairNodeVars {
            w_h: self.param(tape, self.layout.w_h),
            w_t: self.param(tape, self.layout.w_t),
            w_c1: self.param(tape, self.layout.w_c1),
            w_c2: self.param(tape, self.layout.w_c2),
            w_p: self.layout.w_p.iter().map(|&s| self.param(tape, s)).collect(),
            coref: self.param(tape, self.layout.coref),
        };
        let gnn = self
            .layout
            .gnn
            .iter()
            .map(|g| GnnLayerVars {
                q: self.param(tape, g.q),
                k: self.param(tape, g.k),
                w_r: self.param(tape, g.w_r),
                ffn1: self.param(tape, g.ffn1),
                ffn1_b: self.param(tape, g.ffn1_b),
                ffn2: self.param(tape, g.ffn2),
                ffn2_b: self.param(tape, g.ffn2_b),
                ln_gain: self.param(tape, g.ln_gain),
                ln_bias: self.param(tape, g.ln_bias),
            })
            .collect();
        let classifier = ClassifierVars {
            w_a: self.param(tape, self.layout.cls_w_a),
            b_a: self.param(tape, self.layout.cls_b_a),
            w_b: self.param(tape, self.layout.cls_w_b),
            b_b: self.param(tape, self.layout.cls_b_b),
        };
        ModelVars {
            attention,
            pair,
            gnn,
            classifier,
        }
    }
}

/// Tape handles for all model tensors.
#[derive(Debug, Clone)]
pub struct ModelVars {
    /// `(W_Q, W_K)`; absent under mean pooling.
    pub attention: Option<(Var, Var)>,
    pub pair: PairNodeVars,
    pub gnn: Vec<GnnLayerVars>,
    pub classifier: ClassifierVars,
}
