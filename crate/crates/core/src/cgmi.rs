//! Context-guided mention integration.
//!
//! For an ordered pair `(h, t)` the entity attention profiles `A_h`, `A_t`
//! (means of the attention rows at each entity's mention start markers) are
//! multiplied elementwise and renormalised into a token distribution `a`; the
//! pair context is `c = Σ_j a_j H_j`. Each entity's mentions are then pooled
//! by single-head cross-attention with `W_Q c` as the query and `W_K h_m` as
//! keys: `score_m = ⟨W_Q c, W_K h_m⟩ / √d`, weights `softmax(score)`.

use crate::autodiff::{Tape, Var};
use crate::corpus::Entity;
use crate::encoder::EncodedDocument;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Token distribution `a` and context vector `c` for one ordered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairContext {
    pub c: Vec<f64>,
    pub a: Vec<f64>,
    /// The two attention profiles had disjoint support; `a` is the uniform
    /// fallback over both entities' mention rows.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairEntityEmbedding {
    pub e_head: Vec<f64>,
    pub e_tail: Vec<f64>,
    pub alpha_head: Vec<f64>,
    pub alpha_tail: Vec<f64>,
}

/// Query and key projections shared by head and tail pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
}

impl AttentionParams {
    pub fn identity(d: usize) -> Self {
        Self {
            w_q: Matrix::identity(d),
            w_k: Matrix::identity(d),
        }
    }
}

/// Mean of the attention rows at the entity's mention start markers.
pub fn entity_attention(enc: &EncodedDocument, entity: &Entity) -> Result<Vec<f64>> {
    let starts = enc
        .mention_starts
        .get(entity.entity_id)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Encoding(format!("no mention rows for entity {}", entity.entity_id)))?;
    let n = enc.len();
    let mut out = vec![0.0; n];
    for &p in starts {
        if p >= n {
            return Err(Error::Encoding(format!(
                "mention row {p} of entity {} out of range for {n} tokens",
                entity.entity_id
            )));
        }
        for (o, v) in out.iter_mut().zip(enc.a.row(p)) {
            *o += v;
        }
    }
    let k = starts.len() as f64;
    for o in &mut out {
        *o /= k;
    }
    Ok(out)
}

/// Context from two precomputed entity attention profiles.
pub fn context_from_profiles(
    enc: &EncodedDocument,
    head_profile: &[f64],
    tail_profile: &[f64],
    head: &Entity,
    tail: &Entity,
) -> PairContext {
    let prod: Vec<f64> = head_profile.iter().zip(tail_profile).map(|(x, y)| x * y).collect();
    let z: f64 = prod.iter().sum();
    let (a, degenerate) = if z > 0.0 {
        (prod.into_iter().map(|v| v / z).collect(), false)
    } else {
        let mut rows: Vec<usize> = enc.mention_starts[head.entity_id]
            .iter()
            .chain(&enc.mention_starts[tail.entity_id])
            .copied()
            .collect();
        rows.sort_unstable();
        rows.dedup();
        let mut a = vec![0.0; enc.len()];
        let w = 1.0 / rows.len() as f64;
        for r in rows {
            a[r] = w;
        }
        (a, true)
    };
    let mut c = vec![0.0; enc.dim()];
    for (j, aj) in a.iter().enumerate() {
        if *aj == 0.0 {
            continue;
        }
        for (o, v) in c.iter_mut().zip(enc.h.row(j)) {
            *o += aj * v;
        }
    }
    PairContext { c, a, degenerate }
}

pub fn pair_context(enc: &EncodedDocument, head: &Entity, tail: &Entity) -> Result<PairContext> {
    if head.entity_id == tail.entity_id {
        return Err(Error::Config(format!(
            "pair context needs distinct entities (got {} twice)",
            head.entity_id
        )));
    }
    let ah = entity_attention(enc, head)?;
    let at = entity_attention(enc, tail)?;
    Ok(context_from_profiles(enc, &ah, &at, head, tail))
}

/// Record `W_Q c` on the tape.
pub fn query_on(tape: &mut Tape, w_q: Var, c: Var) -> Var {
    tape.matvec(w_q, c)
}

/// Record the cross-attention pooling of `rows` given the query and
/// per-row keys (`W_K h_m`). Returns `(pooled, weights)`.
pub fn integrate_on(tape: &mut Tape, query: Var, keys: &[Var], rows: &[Var], dim: usize) -> (Var, Var) {
    assert_eq!(keys.len(), rows.len());
    let inv_sqrt_d = 1.0 / (dim as f64).sqrt();
    let scores: Vec<Var> = keys
        .iter()
        .map(|&k| {
            let s = tape.dot(query, k);
            tape.scale(s, inv_sqrt_d)
        })
        .collect();
    let scores = tape.concat(&scores);
    let weights = tape.softmax(scores);
    let pooled = tape.weighted_sum(weights, rows);
    (pooled, weights)
}

/// Pool mention rows under the pair context. Returns `(pooled, weights)`.
pub fn integrate_mentions(
    ctx: &PairContext,
    mention_rows: &[Vec<f64>],
    params: &AttentionParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if mention_rows.is_empty() {
        return Err(Error::Empty("mention list".into()));
    }
    let d = ctx.c.len();
    if let Some(bad) = mention_rows.iter().find(|r| r.len() != d) {
        return Err(Error::Dimension {
            what: "mention row".into(),
            expected: d,
            found: bad.len(),
        });
    }
    let mut tape = Tape::new();
    let w_q = tape.leaf_matrix(d, d, params.w_q.as_slice().to_vec());
    let w_k = tape.leaf_matrix(d, d, params.w_k.as_slice().to_vec());
    let c = tape.leaf(ctx.c.clone());
    let q = query_on(&mut tape, w_q, c);
    let rows: Vec<Var> = mention_rows.iter().map(|r| tape.leaf(r.clone())).collect();
    let keys: Vec<Var> = rows.iter().map(|&r| tape.matvec(w_k, r)).collect();
    let (pooled, weights) = integrate_on(&mut tape, q, &keys, &rows, d);
    Ok((tape.value(pooled).to_vec(), tape.value(weights).to_vec()))
}

pub fn mention_rows(enc: &EncodedDocument, entity: &Entity) -> Vec<Vec<f64>> {
    (0..entity.mentions.len())
        .map(|k| enc.mention_row(entity.entity_id, k).to_vec())
        .collect()
}

/// Mean of an entity's mention rows; the pooling used when context guidance is disabled.
pub fn mean_pool(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let k = rows.len() as f64;
    out.iter_mut().for_each(|o| *o /= k);
    out
}

pub fn pair_entities(
    enc: &EncodedDocument,
    head: &Entity,
    tail: &Entity,
    params: &AttentionParams,
) -> Result<PairEntityEmbedding> {
    let ctx = pair_context(enc, head, tail)?;
    let (e_head, alpha_head) = integrate_mentions(&ctx, &mention_rows(enc, head), params)?;
    let (e_tail, alpha_tail) = integrate_mentions(&ctx, &mention_rows(enc, tail), params)?;
    Ok(PairEntityEmbedding {
        e_head,
        e_tail,
        alpha_head,
        alpha_tail,
    })
}
