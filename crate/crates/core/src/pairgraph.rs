//! Entity-pair nodes and attention-based message passing between pairs that
//! share an entity.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// How the group bilinear combines head and tail groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BilinearMode {
    /// Per group `σ(z_h^i ⊙ (W_p^i z_t^i))`, concatenated to length `d`.
    #[default]
    Vector,
    /// `σ(Σ_i z_h^iᵀ W_p^i z_t^i)`, a scalar broadcast to length `d`.
    Scalar,
}

/// Which embedding the neighbourhood attention aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GnnSummand {
    /// `Σ_v α(u,v) P_v`.
    #[default]
    Neighbor,
    /// `Σ_v α(u,v) P_u`, the formula taken literally.
    #[serde(rename = "self")]
    SelfNode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairNodeParams {
    pub w_h: Matrix,
    pub w_t: Matrix,
    pub w_c1: Matrix,
    pub w_c2: Matrix,
    /// One `(d/k)×(d/k)` matrix per group.
    pub w_p: Vec<Matrix>,
    /// `types × d_coref` coreference-embedding table.
    pub coref: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnLayerParams {
    pub q: Matrix,
    pub k: Matrix,
    pub w_r: Matrix,
    pub ffn1: Matrix,
    pub ffn1_b: Vec<f64>,
    pub ffn2: Matrix,
    pub ffn2_b: Vec<f64>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
}

/// Tape handles for [`PairNodeParams`].
#[derive(Debug, Clone)]
pub struct PairNodeVars {
    pub w_h: Var,
    pub w_t: Var,
    pub w_c1: Var,
    pub w_c2: Var,
    pub w_p: Vec<Var>,
    pub coref: Var,
}

/// Tape handles for [`GnnLayerParams`].
#[derive(Debug, Clone, Copy)]
pub struct GnnLayerVars {
    pub q: Var,
    pub k: Var,
    pub w_r: Var,
    pub ffn1: Var,
    pub ffn1_b: Var,
    pub ffn2: Var,
    pub ffn2_b: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

impl PairNodeParams {
    pub fn leaves(&self, tape: &mut Tape) -> PairNodeVars {
        let m = |tape: &mut Tape, x: &Matrix| tape.leaf_matrix(x.rows(), x.cols(), x.as_slice().to_vec());
        PairNodeVars {
            w_h: m(tape, &self.w_h),
            w_t: m(tape, &self.w_t),
            w_c1: m(tape, &self.w_c1),
            w_c2: m(tape, &self.w_c2),
            w_p: self.w_p.iter().map(|w| m(tape, w)).collect(),
            coref: m(tape, &self.coref),
        }
    }
}

impl GnnLayerParams {
    pub fn leaves(&self, tape: &mut Tape) -> GnnLayerVars {
        let m = |tape: &mut Tape, x: &Matrix| tape.leaf_matrix(x.rows(), x.cols(), x.as_slice().to_vec());
        GnnLayerVars {
            q: m(tape, &self.q),
            k: m(tape, &self.k),
            w_r: m(tape, &self.w_r),
            ffn1: m(tape, &self.ffn1),
            ffn1_b: tape.leaf(self.ffn1_b.clone()),
            ffn2: m(tape, &self.ffn2),
            ffn2_b: tape.leaf(self.ffn2_b.clone()),
            ln_gain: tape.leaf(self.ln_gain.clone()),
            ln_bias: tape.leaf(self.ln_bias.clone()),
        }
    }
}

/// Group bilinear of two length-`d` vectors split into `w_p.len()` groups.
pub fn group_bilinear_on(tape: &mut Tape, z_h: Var, z_t: Var, w_p: &[Var], mode: BilinearMode) -> Var {
    let d = tape.value(z_h).len();
    let g = d / w_p.len();
    match mode {
        BilinearMode::Vector => {
            let blocks: Vec<Var> = w_p
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let zh = tape.slice(z_h, i * g, g);
                    let zt = tape.slice(z_t, i * g, g);
                    let wz = tape.matvec(w, zt);
                    tape.mul(zh, wz)
                })
                .collect();
            let cat = tape.concat(&blocks);
            tape.sigmoid(cat)
        }
        BilinearMode::Scalar => {
            let terms: Vec<Var> = w_p
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let zh = tape.slice(z_h, i * g, g);
                    let zt = tape.slice(z_t, i * g, g);
                    let wz = tape.matvec(w, zt);
                    tape.dot(zh, wz)
                })
                .collect();
            let s = tape.sum(&terms);
            let s = tape.sigmoid(s);
            tape.repeat(s, d)
        }
    }
}

/// `p = bilinear(tanh(W_h e_h + W_c1 c), tanh(W_t e_t + W_c2 c))`.
pub fn pair_embedding_on(
    tape: &mut Tape,
    vars: &PairNodeVars,
    e_head: Var,
    e_tail: Var,
    c: Var,
    mode: BilinearMode,
) -> Var {
    let a = tape.matvec(vars.w_h, e_head);
    let b = tape.matvec(vars.w_c1, c);
    let z_h = tape.add(a, b);
    let z_h = tape.tanh(z_h);
    let a = tape.matvec(vars.w_t, e_tail);
    let b = tape.matvec(vars.w_c2, c);
    let z_t = tape.add(a, b);
    let z_t = tape.tanh(z_t);
    group_bilinear_on(tape, z_h, z_t, &vars.w_p, mode)
}

/// `[coref[head_type]; p; coref[tail_type]]`.
pub fn init_node_on(tape: &mut Tape, coref: Var, p: Var, head_type: u32, tail_type: u32) -> Var {
    let h = tape.row(coref, head_type as usize);
    let t = tape.row(coref, tail_type as usize);
    tape.concat(&[h, p, t])
}

fn check_groups(d: usize, k: usize) -> Result<()> {
    if k == 0 || !d.is_multiple_of(k) {
        return Err(Error::Config(format!("dimension {d} is not divisible by {k} groups")));
    }
    Ok(())
}

pub fn group_bilinear(z_h: &[f64], z_t: &[f64], w_p: &[Matrix], mode: BilinearMode) -> Result<Vec<f64>> {
    check_groups(z_h.len(), w_p.len())?;
    let mut tape = Tape::new();
    let zh = tape.leaf(z_h.to_vec());
    let zt = tape.leaf(z_t.to_vec());
    let w: Vec<Var> = w_p
        .iter()
        .map(|m| tape.leaf_matrix(m.rows(), m.cols(), m.as_slice().to_vec()))
        .collect();
    let out = group_bilinear_on(&mut tape, zh, zt, &w, mode);
    Ok(tape.value(out).to_vec())
}

pub fn pair_embedding(
    e_head: &[f64],
    e_tail: &[f64],
    c: &[f64],
    params: &PairNodeParams,
    mode: BilinearMode,
) -> Result<Vec<f64>> {
    let d = e_head.len();
    check_groups(d, params.w_p.len())?;
    for (what, v) in [("e_tail", e_tail.len()), ("c", c.len()), ("W_h", params.w_h.cols())] {
        if v != d {
            return Err(Error::Dimension {
                what: what.into(),
                expected: d,
                found: v,
            });
        }
    }
    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape);
    let eh = tape.leaf(e_head.to_vec());
    let et = tape.leaf(e_tail.to_vec());
    let cv = tape.leaf(c.to_vec());
    let out = pair_embedding_on(&mut tape, &vars, eh, et, cv, mode);
    Ok(tape.value(out).to_vec())
}

pub fn init_node(p: &[f64], head_type: u32, tail_type: u32, params: &PairNodeParams) -> Result<Vec<f64>> {
    let types = params.coref.rows() as u32;
    for t in [head_type, tail_type] {
        if t >= types {
            return Err(Error::UnknownEntityType(t.to_string()));
        }
    }
    let mut out = params.coref.row(head_type as usize).to_vec();
    out.extend_from_slice(p);
    out.extend_from_slice(params.coref.row(tail_type as usize));
    Ok(out)
}

/// Topology of the entity-pair graph for `m` entities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairGraph {
    pub num_entities: usize,
    /// Ordered pairs in row-major order.
    pub nodes: Vec<(usize, usize)>,
    /// Sorted neighbour node ids per node.
    pub adjacency: Vec<Vec<usize>>,
}

impl PairGraph {
    pub fn node_index(&self, head: usize, tail: usize) -> usize {
        let m = self.num_entities;
        debug_assert!(head != tail && head < m && tail < m);
        head * (m - 1) + if tail < head { tail } else { tail - 1 }
    }

    /// One line per node: `(h,t): (u,v) (u,v) ...`.
    pub fn adjacency_text(&self) -> String {
        let mut out = String::new();
        for (i, (h, t)) in self.nodes.iter().enumerate() {
            out.push_str(&format!("({h},{t}):"));
            for &j in &self.adjacency[i] {
                let (u, v) = self.nodes[j];
                out.push_str(&format!(" ({u},{v})"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn build_graph(m: usize) -> Result<PairGraph> {
    if m < 2 {
        return Err(Error::Config(format!("pair graph needs at least 2 entities (got {m})")));
    }
    let nodes: Vec<(usize, usize)> = crate::corpus::ordered_pairs(m).collect();
    let mut graph = PairGraph {
        num_entities: m,
        adjacency: vec![Vec::new(); nodes.len()],
        nodes,
    };
    for (i, &(h, t)) in graph.nodes.iter().enumerate() {
        let mut nbrs = Vec::with_capacity(4 * (m - 2) + 1);
        for x in 0..m {
            for (u, v) in [(h, x), (x, h), (t, x), (x, t)] {
                if u != v && (u, v) != (h, t) {
                    nbrs.push(graph.node_index(u, v));
                }
            }
        }
        nbrs.sort_unstable();
        nbrs.dedup();
        graph.adjacency[i] = nbrs;
    }
    Ok(graph)
}

/// One message-passing layer; returns the new node embeddings and each
/// node's attention weights over its neighbours.
pub fn gnn_layer_on(
    tape: &mut Tape,
    vars: &GnnLayerVars,
    nodes: &[Var],
    graph: &PairGraph,
    summand: GnnSummand,
) -> (Vec<Var>, Vec<Option<Var>>) {
    let queries: Vec<Var> = nodes.iter().map(|&p| tape.matvec(vars.q, p)).collect();
    let keys: Vec<Var> = nodes.iter().map(|&p| tape.matvec(vars.k, p)).collect();
    let dn = tape.value(nodes[0]).len();
    let mut out = Vec::with_capacity(nodes.len());
    let mut attn = Vec::with_capacity(nodes.len());
    for (u, &pu) in nodes.iter().enumerate() {
        let nbrs = &graph.adjacency[u];
        let message = if nbrs.is_empty() {
            attn.push(None);
            tape.leaf(vec![0.0; dn])
        } else {
            let scores: Vec<Var> = nbrs.iter().map(|&v| tape.dot(queries[v], keys[u])).collect();
            let scores = tape.concat(&scores);
            let alpha = tape.softmax(scores);
            attn.push(Some(alpha));
            let summed: Vec<Var> = match summand {
                GnnSummand::Neighbor => nbrs.iter().map(|&v| nodes[v]).collect(),
                GnnSummand::SelfNode => vec![pu; nbrs.len()],
            };
            let agg = tape.weighted_sum(alpha, &summed);
            tape.matvec(vars.w_r, agg)
        };
        let hdn = tape.matvec(vars.ffn1, message);
        let hdn = tape.add(hdn, vars.ffn1_b);
        let hdn = tape.tanh(hdn);
        let f = tape.matvec(vars.ffn2, hdn);
        let f = tape.add(f, vars.ffn2_b);
        let res = tape.add(pu, f);
        let normed = tape.layer_norm(res);
        let scaled = tape.mul(normed, vars.ln_gain);
        out.push(tape.add(scaled, vars.ln_bias));
    }
    (out, attn)
}

/// Plain-value layer: returns the next node matrix and per-node attention rows
/// (empty rows for isolated nodes).
pub fn gnn_layer_with_attention(
    nodes: &Matrix,
    graph: &PairGraph,
    params: &GnnLayerParams,
    summand: GnnSummand,
) -> Result<(Matrix, Vec<Vec<f64>>)> {
    if nodes.rows() != graph.nodes.len() {
        return Err(Error::Dimension {
            what: "node count".into(),
            expected: graph.nodes.len(),
            found: nodes.rows(),
        });
    }
    if nodes.cols() != params.q.cols() {
        return Err(Error::Dimension {
            what: "node embedding width".into(),
            expected: params.q.cols(),
            found: nodes.cols(),
        });
    }
    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape);
    let p: Vec<Var> = (0..nodes.rows()).map(|i| tape.leaf(nodes.row(i).to_vec())).collect();
    let (out, attn) = gnn_layer_on(&mut tape, &vars, &p, graph, summand);
    let rows: Vec<Vec<f64>> = out.iter().map(|&v| tape.value(v).to_vec()).collect();
    let attn = attn
        .iter()
        .map(|a| a.map(|v| tape.value(v).to_vec()).unwrap_or_default())
        .collect();
    Ok((Matrix::from_rows(&rows), attn))
}

pub fn gnn_layer(nodes: &Matrix, graph: &PairGraph, params: &GnnLayerParams, summand: GnnSummand) -> Result<Matrix> {
    gnn_layer_with_attention(nodes, graph, params, summand).map(|(m, _)| m)
}

/// Sequential composition of layers; zero layers is the identity.
pub fn run_gnn(
    nodes: &Matrix,
    graph: &PairGraph,
    layers: &[GnnLayerParams],
    summand: GnnSummand,
) -> Result<Matrix> {
    let mut p = nodes.clone();
    for layer in layers {
        p = gnn_layer(&p, graph, layer, summand)?;
    }
    Ok(p)
}
