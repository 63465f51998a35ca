//! Whole-model forward pass and gradients for one document or a batch.

use std::collections::BTreeSet;

use crate::autodiff::{Tape, Var};
use crate::cgmi::{context_from_profiles, entity_attention, integrate_on, mean_pool, mention_rows, query_on};
use crate::classifier::{atl_loss_on, pair_logits_on, PairLogits};
use crate::corpus::{insert_markers, Document};
use crate::encoder::{encode_windows, EncodedDocument, EncoderConfig};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::pairgraph::{build_graph, gnn_layer_on, init_node_on, pair_embedding_on, PairGraph};

use super::params::{ModelParams, Pooling};

/// A document together with its encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub doc: Document,
    pub enc: EncodedDocument,
}

impl Example {
    pub fn encode(doc: Document, cfg: &EncoderConfig) -> Result<Self> {
        let enc = encode_windows(&insert_markers(&doc), cfg)?;
        Ok(Self { doc, enc })
    }
}

/// Encode every document with the mock encoder.
pub fn encode_corpus(docs: Vec<Document>, cfg: &EncoderConfig, exec: Execution) -> Result<Vec<Example>> {
    let encoded = exec::map(exec, &docs, |d| encode_windows(&insert_markers(d), cfg));
    docs.into_iter()
        .zip(encoded)
        .map(|(doc, enc)| Ok(Example { doc, enc: enc? }))
        .collect()
}

/// Everything recorded for one document.
struct DocGraph {
    tape: Tape,
    graph: Option<PairGraph>,
    logits: Vec<Var>,
    loss: Option<Var>,
    alphas: Vec<(Var, Var)>,
    degenerate: Vec<bool>,
    gnn_attention: Vec<Vec<Option<Var>>>,
}

fn check_example(params: &ModelParams, ex: &Example) -> Result<()> {
    let cfg = &params.config;
    let doc = &ex.doc;
    if ex.enc.dim() != cfg.dim {
        return Err(Error::Dimension {
            what: format!("encoding of document {}", doc.doc_id),
            expected: cfg.dim,
            found: ex.enc.dim(),
        });
    }
    if ex.enc.mention_starts.len() != doc.entities.len() {
        return Err(Error::InvalidDocument {
            doc: doc.doc_id.clone(),
            message: format!(
                "encoding has {} entities, document has {}",
                ex.enc.mention_starts.len(),
                doc.entities.len()
            ),
        });
    }
    for (e, starts) in doc.entities.iter().zip(&ex.enc.mention_starts) {
        if starts.len() != e.mentions.len() {
            return Err(Error::InvalidDocument {
                doc: doc.doc_id.clone(),
                message: format!(
                    "entity {} has {} mentions but {} encoded rows",
                    e.entity_id,
                    e.mentions.len(),
                    starts.len()
                ),
            });
        }
        if e.entity_type as usize >= cfg.num_entity_types {
            return Err(Error::UnknownEntityType(format!(
                "{} (document {}, {} types configured)",
                e.entity_type, doc.doc_id, cfg.num_entity_types
            )));
        }
    }
    if let Some(f) = doc.gold_facts.iter().find(|f| f.relation as usize >= cfg.num_relations) {
        return Err(Error::UnknownRelation(format!(
            "{} (document {}, {} relations configured)",
            f.relation, doc.doc_id, cfg.num_relations
        )));
    }
    Ok(())
}

fn build(params: &ModelParams, ex: &Example, with_loss: bool) -> Result<DocGraph> {
    check_example(params, ex)?;
    let cfg = &params.config;
    let d = cfg.dim;
    let doc = &ex.doc;
    let enc = &ex.enc;
    let mut tape = Tape::new();
    let m = doc.entities.len();
    if m < 2 {
        return Ok(DocGraph {
            tape,
            graph: None,
            logits: Vec::new(),
            loss: None,
            alphas: Vec::new(),
            degenerate: Vec::new(),
            gnn_attention: Vec::new(),
        });
    }
    let graph = build_graph(m)?;
    let vars = params.vars(&mut tape);

    tape.set_stage("mention integration");
    let profiles = doc
        .entities
        .iter()
        .map(|e| entity_attention(enc, e))
        .collect::<Result<Vec<_>>>()?;
    let raw_rows: Vec<Vec<Vec<f64>>> = doc.entities.iter().map(|e| mention_rows(enc, e)).collect();
    let rows: Vec<Vec<Var>> = raw_rows
        .iter()
        .map(|rs| rs.iter().map(|r| tape.leaf(r.clone())).collect())
        .collect();
    let keys: Vec<Vec<Var>> = match vars.attention {
        Some((_, w_k)) => rows
            .iter()
            .map(|rs| rs.iter().map(|&r| tape.matvec(w_k, r)).collect())
            .collect(),
        None => Vec::new(),
    };
    let means: Vec<Var> = match cfg.pooling {
        Pooling::Mean => raw_rows.iter().map(|rs| tape.leaf(mean_pool(rs))).collect(),
        Pooling::Context => Vec::new(),
    };

    let mut nodes = Vec::with_capacity(graph.nodes.len());
    let mut ents = Vec::with_capacity(graph.nodes.len());
    let mut alphas = Vec::new();
    let mut degenerate = Vec::with_capacity(graph.nodes.len());
    for &(h, t) in &graph.nodes {
        tape.set_stage("mention integration");
        let (eh, et) = (&doc.entities[h], &doc.entities[t]);
        let ctx = context_from_profiles(enc, &profiles[h], &profiles[t], eh, et);
        degenerate.push(ctx.degenerate);
        let c = tape.leaf(ctx.c);
        let (e_h, e_t) = match vars.attention {
            Some((w_q, _)) => {
                let q = query_on(&mut tape, w_q, c);
                let (e_h, a_h) = integrate_on(&mut tape, q, &keys[h], &rows[h], d);
                let (e_t, a_t) = integrate_on(&mut tape, q, &keys[t], &rows[t], d);
                alphas.push((a_h, a_t));
                (e_h, e_t)
            }
            None => (means[h], means[t]),
        };
        tape.set_stage("pair representation");
        let p = pair_embedding_on(&mut tape, &vars.pair, e_h, e_t, c, cfg.bilinear);
        nodes.push(init_node_on(&mut tape, vars.pair.coref, p, eh.entity_type, et.entity_type));
        ents.push((e_h, e_t));
    }

    tape.set_stage("graph reasoning");
    let mut gnn_attention = Vec::with_capacity(vars.gnn.len());
    for layer in &vars.gnn {
        let (next, attn) = gnn_layer_on(&mut tape, layer, &nodes, &graph, cfg.gnn_summand);
        nodes = next;
        gnn_attention.push(attn);
    }

    tape.set_stage("classifier");
    let logits: Vec<Var> = ents
        .iter()
        .zip(&nodes)
        .map(|(&(e_h, e_t), &p)| pair_logits_on(&mut tape, &vars.classifier, e_h, e_t, p))
        .collect();

    let loss = if with_loss {
        tape.set_stage("loss");
        let terms: Vec<Var> = graph
            .nodes
            .iter()
            .zip(&logits)
            .map(|(&(h, t), &l)| {
                let gold: BTreeSet<u32> = doc.relations_of(h, t).into_iter().collect();
                atl_loss_on(&mut tape, l, &gold)
            })
            .collect();
        let total = tape.sum(&terms);
        Some(tape.scale(total, 1.0 / terms.len() as f64))
    } else {
        None
    };

    if let Some(bad) = tape.non_finite() {
        return Err(Error::NonFinite {
            stage: bad.stage,
            op: bad.op,
        });
    }
    Ok(DocGraph {
        tape,
        graph: Some(graph),
        logits,
        loss,
        alphas,
        degenerate,
        gnn_attention,
    })
}

/// Mean pair loss of one document (0 when it has fewer than two entities).
pub fn doc_loss(params: &ModelParams, ex: &Example) -> Result<f64> {
    let g = build(params, ex, true)?;
    Ok(g.loss.map_or(0.0, |l| g.tape.scalar(l)))
}

/// Mean pair loss and its gradient with respect to every parameter.
pub fn doc_loss_and_grad(params: &ModelParams, ex: &Example) -> Result<(f64, Vec<f64>)> {
    let g = build(params, ex, true)?;
    let mut grad = vec![0.0; params.len()];
    let Some(loss) = g.loss else {
        return Ok((0.0, grad));
    };
    let adj = g.tape.backward(loss);
    g.tape.scatter_params(&adj, &mut grad);
    Ok((g.tape.scalar(loss), grad))
}

/// Mean over documents of the per-document loss.
pub fn batch_loss(params: &ModelParams, batch: &[&Example], exec: Execution) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    let losses = exec::map(exec, batch, |ex| doc_loss(params, ex));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / batch.len() as f64)
}

/// Batch loss and gradient. Documents run independently under `exec`; the
/// reduction is always in batch order, so both modes give identical bits.
pub fn batch_loss_and_grad(params: &ModelParams, batch: &[&Example], exec: Execution) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    let per_doc = exec::map(exec, batch, |ex| doc_loss_and_grad(params, ex));
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for r in per_doc {
        let (l, g) = r?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let k = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= k);
    Ok((loss * k, grad))
}

/// Logits for every ordered entity pair, in row-major pair order.
pub fn doc_logits(params: &ModelParams, ex: &Example) -> Result<Vec<PairLogits>> {
    let g = build(params, ex, false)?;
    let Some(graph) = &g.graph else {
        return Ok(Vec::new());
    };
    Ok(graph
        .nodes
        .iter()
        .zip(&g.logits)
        .map(|(&pair, &l)| PairLogits {
            pair,
            logits: g.tape.value(l).to_vec(),
        })
        .collect())
}

/// Intermediate values of one document, for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct DocTrace {
    pub graph: Option<PairGraph>,
    pub logits: Vec<PairLogits>,
    /// Mention weights `(head, tail)` per pair; empty under mean pooling.
    pub mention_weights: Vec<(Vec<f64>, Vec<f64>)>,
    pub degenerate: Vec<bool>,
    /// `[layer][node]` neighbour attention, empty for isolated nodes.
    pub gnn_attention: Vec<Vec<Vec<f64>>>,
}

pub fn doc_trace(params: &ModelParams, ex: &Example) -> Result<DocTrace> {
    let g = build(params, ex, false)?;
    let t = &g.tape;
    let logits = match &g.graph {
        Some(graph) => graph
            .nodes
            .iter()
            .zip(&g.logits)
            .map(|(&pair, &l)| PairLogits {
                pair,
                logits: t.value(l).to_vec(),
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(DocTrace {
        logits,
        mention_weights: g
            .alphas
            .iter()
            .map(|&(a, b)| (t.value(a).to_vec(), t.value(b).to_vec()))
            .collect(),
        degenerate: g.degenerate.clone(),
        gnn_attention: g
            .gnn_attention
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|a| a.map(|v| t.value(v).to_vec()).unwrap_or_default())
                    .collect()
            })
            .collect(),
        graph: g.graph,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgmi::pair_entities;
    use crate::classifier::pair_logits;
    use crate::corpus::{synth_corpus, SynthConfig};
    use crate::pairgraph::{init_node, pair_embedding, run_gnn};
    use crate::training::params::ModelConfig;
    use crate::linalg::Matrix;

    fn setup(pooling: Pooling) -> (ModelParams, Vec<Example>) {
        let cfg = ModelConfig {
            groups: 2,
            gnn_layers: 2,
            num_relations: 2,
            pooling,
            ..ModelConfig::default()
        }
        .with_dim(8);
        let synth = SynthConfig {
            num_docs: 3,
            num_relations: 2,
            entities_per_doc: 3,
            fact_rate: 1.0,
            ..SynthConfig::default()
        };
        let docs = synth_corpus(&synth).unwrap();
        let exs = encode_corpus(docs, &cfg.encoder, Execution::Sequential).unwrap();
        (ModelParams::init(cfg, 5).unwrap(), exs)
    }

    #[test]
    fn composed_forward_matches_module_functions() {
        let (params, exs) = setup(Pooling::Context);
        let ex = &exs[0];
        let att = params.attention();
        let node_p = params.pair_node();
        let graph = build_graph(ex.doc.num_entities()).unwrap();
        let mut pairs = Vec::new();
        let mut nodes = Vec::new();
        for &(h, t) in &graph.nodes {
            let (eh, et) = (&ex.doc.entities[h], &ex.doc.entities[t]);
            let pe = pair_entities(&ex.enc, eh, et, &att).unwrap();
            let ctx = crate::cgmi::pair_context(&ex.enc, eh, et).unwrap();
            let p = pair_embedding(&pe.e_head, &pe.e_tail, &ctx.c, &node_p, params.config.bilinear).unwrap();
            nodes.push(init_node(&p, eh.entity_type, et.entity_type, &node_p).unwrap());
            pairs.push(pe);
        }
        let layers: Vec<_> = (0..params.config.gnn_layers).map(|l| params.gnn_layer(l)).collect();
        let out = run_gnn(&Matrix::from_rows(&nodes), &graph, &layers, params.config.gnn_summand).unwrap();
        let got = doc_logits(&params, ex).unwrap();
        for (i, pe) in pairs.iter().enumerate() {
            let want = pair_logits(graph.nodes[i], &pe.e_head, &pe.e_tail, out.row(i), &params.classifier()).unwrap();
            assert_eq!(got[i].pair, want.pair);
            for (a, b) in got[i].logits.iter().zip(&want.logits) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let (params, exs) = setup(Pooling::Context);
        let batch: Vec<&Example> = exs.iter().collect();
        let a = batch_loss_and_grad(&params, &batch, Execution::Sequential).unwrap();
        let b = batch_loss_and_grad(&params, &batch, Execution::Parallel).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn mean_pooling_leaves_attention_weights_untouched() {
        let (params, exs) = setup(Pooling::Mean);
        let (_, g) = doc_loss_and_grad(&params, &exs[0]).unwrap();
        for name in ["cgmi.w_q", "cgmi.w_k"] {
            let r = params.layout.slot(name).unwrap().range();
            assert!(g[r].iter().all(|v| *v == 0.0), "{name}");
        }
        let r = params.layout.slot("pair.w_h").unwrap().range();
        assert!(g[r].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn zero_classifier_gives_forced_softmax_gradient() {
        let (mut params, mut exs) = setup(Pooling::Context);
        for name in ["cls.w_b", "cls.b_b"] {
            params.slot_values_mut(name).unwrap().fill(0.0);
        }
        exs[0].doc.gold_facts.clear();
        let (loss, g) = doc_loss_and_grad(&params, &exs[0]).unwrap();
        let r = params.config.num_relations;
        assert!((loss - ((r + 1) as f64).ln()).abs() < 1e-12);
        let bb = &g[params.layout.slot("cls.b_b").unwrap().range()];
        let share = 1.0 / (r + 1) as f64;
        for v in &bb[..r] {
            assert!((v - share).abs() < 1e-12);
        }
        assert!((bb[r] - (share - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (params, exs) = setup(Pooling::Context);
        let other = ModelParams::init(params.config.clone().with_dim(16), 0).unwrap();
        assert!(matches!(doc_logits(&other, &exs[0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn non_finite_input_names_stage() {
        let (params, mut exs) = setup(Pooling::Context);
        let row = exs[0].enc.mention_starts[0][0];
        exs[0].enc.h.row_mut(row)[0] = f64::NAN;
        match doc_loss(&params, &exs[0]) {
            Err(Error::NonFinite { stage, .. }) => assert_eq!(stage, "mention integration"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn single_entity_document_contributes_nothing() {
        let (params, mut exs) = setup(Pooling::Context);
        exs[0].doc.entities.truncate(1);
        exs[0].doc.gold_facts.clear();
        exs[0].enc.mention_starts.truncate(1);
        let (l, g) = doc_loss_and_grad(&params, &exs[0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(doc_logits(&params, &exs[0]).unwrap().is_empty());
    }

    #[test]
    fn trace_shapes() {
        let (params, exs) = setup(Pooling::Context);
        let tr = doc_trace(&params, &exs[0]).unwrap();
        let n = exs[0].doc.num_pairs();
        assert_eq!(tr.logits.len(), n);
        assert_eq!(tr.mention_weights.len(), n);
        assert_eq!(tr.gnn_attention.len(), 2);
        assert_eq!(tr.gnn_attention[0][0].len(), tr.graph.as_ref().unwrap().adjacency[0].len());
    }
}
