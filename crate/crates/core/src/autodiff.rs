//! Minimal reverse-mode differentiation over dense vectors and matrices.
//!
//! A [`Tape`] records every operation eagerly: values are computed as nodes
//! are pushed, and [`Tape::backward`] walks the nodes in reverse to
//! accumulate adjoints. Parameter leaves remember their offset in the flat
//! parameter vector so gradients can be scattered back with
//! [`Gradients::scatter_params`].

use crate::linalg::{dot, logistic};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param { offset: usize },
    MatVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Dot(Var, Var),
    Sum(Vec<Var>),
    Softmax(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Repeat(Var),
    Row(Var, usize),
    WeightedSum(Var, Vec<Var>),
    LayerNorm(Var),
    LogSumExp(Var, Vec<usize>),
    Index(Var, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param { .. } => "param",
            Op::MatVec(..) => "matvec",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Dot(..) => "dot",
            Op::Sum(_) => "sum",
            Op::Softmax(_) => "softmax",
            Op::Concat(_) => "concat",
            Op::Slice(..) => "slice",
            Op::Repeat(_) => "repeat",
            Op::Row(..) => "row",
            Op::WeightedSum(..) => "weighted_sum",
            Op::LayerNorm(_) => "layer_norm",
            Op::LogSumExp(..) => "logsumexp",
            Op::Index(..) => "index",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
    /// Number of columns; 1 for vectors and scalars.
    cols: usize,
    stage: &'static str,
}

/// First operation that produced a NaN or infinity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NonFiniteAt {
    pub stage: &'static str,
    pub op: &'static str,
    pub node: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    stage: &'static str,
    non_finite: Option<NonFiniteAt>,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            stage: "input",
            non_finite: None,
        }
    }

    /// Label attached to subsequently recorded nodes, reported on non-finite values.
    pub fn set_stage(&mut self, stage: &'static str) {
        self.stage = stage;
    }

    pub fn non_finite(&self) -> Option<NonFiniteAt> {
        self.non_finite
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>, cols: usize) -> Var {
        if self.non_finite.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.non_finite = Some(NonFiniteAt {
                stage: self.stage,
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        self.nodes.push(Node {
            op,
            value,
            cols,
            stage: self.stage,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        val[0]
    }

    pub fn stage_of(&self, v: Var) -> &'static str {
        self.nodes[v.0].stage
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    /// Vector constant (or differentiable input when gradients w.r.t. it are read).
    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Leaf, value, 1)
    }

    pub fn leaf_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len());
        self.push(Op::Leaf, data, cols)
    }

    /// Trainable leaf whose gradient is scattered to `offset..offset+data.len()`.
    pub fn param(&mut self, offset: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(data.len() % cols, 0);
        self.push(Op::Param { offset }, data, cols)
    }

    pub fn matvec(&mut self, m: Var, x: Var) -> Var {
        let cols = self.nodes[m.0].cols;
        let mv = &self.nodes[m.0].value;
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), cols, "matvec: x length {} vs cols {}", xv.len(), cols);
        let out: Vec<f64> = mv.chunks_exact(cols).map(|row| dot(row, xv)).collect();
        self.push(Op::MatVec(m, x), out, 1)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.len(), bv.len(), "elementwise length mismatch");
        av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), out, 1)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), out, 1)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), out, 1)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).iter().map(|v| v * k).collect();
        self.push(Op::Scale(a, k), out, 1)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh(a), out, 1)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|v| logistic(*v)).collect();
        self.push(Op::Sigmoid(a), out, 1)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let out = dot(self.value(a), self.value(b));
        self.push(Op::Dot(a, b), vec![out], 1)
    }

    /// Elementwise sum of equally sized nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "sum of nothing");
        let mut out = self.value(xs[0]).to_vec();
        for x in &xs[1..] {
            for (o, v) in out.iter_mut().zip(self.value(*x)) {
                *o += v;
            }
        }
        self.push(Op::Sum(xs.to_vec()), out, 1)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = crate::linalg::softmax(self.value(a));
        self.push(Op::Softmax(a), out, 1)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let mut out = Vec::new();
        for x in xs {
            out.extend_from_slice(self.value(*x));
        }
        self.push(Op::Concat(xs.to_vec()), out, 1)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a)[start..start + len].to_vec();
        self.push(Op::Slice(a, start), out, 1)
    }

    /// Broadcast a scalar node to a vector of length `len`.
    pub fn repeat(&mut self, a: Var, len: usize) -> Var {
        let v = self.scalar(a);
        self.push(Op::Repeat(a), vec![v; len], 1)
    }

    /// Row `i` of a matrix node.
    pub fn row(&mut self, m: Var, i: usize) -> Var {
        let cols = self.nodes[m.0].cols;
        let out = self.value(m)[i * cols..(i + 1) * cols].to_vec();
        self.push(Op::Row(m, i), out, 1)
    }

    /// `Σ_i w[i] · rows[i]`.
    pub fn weighted_sum(&mut self, w: Var, rows: &[Var]) -> Var {
        let wv = self.value(w);
        assert_eq!(wv.len(), rows.len(), "weighted_sum arity");
        let mut out = vec![0.0; self.len_of(rows[0])];
        for (wi, r) in wv.iter().zip(rows) {
            for (o, v) in out.iter_mut().zip(self.value(*r)) {
                *o += wi * v;
            }
        }
        self.push(Op::WeightedSum(w, rows.to_vec()), out, 1)
    }

    /// Standardize to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let out = x.iter().map(|v| (v - mean) * inv).collect();
        self.push(Op::LayerNorm(a), out, 1)
    }

    /// `log Σ_{i ∈ idx} exp(a_i)`.
    pub fn logsumexp(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let out = crate::linalg::logsumexp(idx.iter().map(|&i| x[i]));
        self.push(Op::LogSumExp(a, idx.to_vec()), vec![out], 1)
    }

    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let out = self.value(a)[i];
        self.push(Op::Index(a, i), vec![out], 1)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.len_of(root), 1, "backward root must be scalar");
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);

        fn acc(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            adj[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param { .. } => {}
                Op::MatVec(m, x) => {
                    let cols = self.nodes[m.0].cols;
                    let mv = &self.nodes[m.0].value;
                    let xv = &self.nodes[x.0].value;
                    {
                        let gm = acc(&mut adj, *m, mv.len());
                        for (r, gr) in g.iter().enumerate() {
                            if *gr == 0.0 {
                                continue;
                            }
                            for (c, xc) in xv.iter().enumerate() {
                                gm[r * cols + c] += gr * xc;
                            }
                        }
                    }
                    let gx = acc(&mut adj, *x, xv.len());
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        for (c, gxc) in gx.iter_mut().enumerate() {
                            *gxc += gr * mv[r * cols + c];
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut adj, *a, g.len()), &g, 1.0);
                    add_into(acc(&mut adj, *b, g.len()), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut adj, *a, g.len()), &g, 1.0);
                    add_into(acc(&mut adj, *b, g.len()), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let ga = acc(&mut adj, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                    let gb = acc(&mut adj, *b, g.len());
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                }
                Op::Scale(a, k) => add_into(acc(&mut adj, *a, g.len()), &g, *k),
                Op::Tanh(a) => {
                    let ga = acc(&mut adj, *a, g.len());
                    for (k, y) in node.value.iter().enumerate() {
                        ga[k] += g[k] * (1.0 - y * y);
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = acc(&mut adj, *a, g.len());
                    for (k, y) in node.value.iter().enumerate() {
                        ga[k] += g[k] * y * (1.0 - y);
                    }
                }
                Op::Dot(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    add_into(acc(&mut adj, *a, av.len()), bv, g[0]);
                    add_into(acc(&mut adj, *b, bv.len()), av, g[0]);
                }
                Op::Sum(xs) => {
                    for x in xs {
                        add_into(acc(&mut adj, *x, g.len()), &g, 1.0);
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy = dot(&g, y);
                    let ga = acc(&mut adj, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += y[k] * (g[k] - gy);
                    }
                }
                Op::Concat(xs) => {
                    let mut off = 0;
                    for x in xs {
                        let len = self.len_of(*x);
                        add_into(acc(&mut adj, *x, len), &g[off..off + len], 1.0);
                        off += len;
                    }
                }
                Op::Slice(a, start) => {
                    let len = self.len_of(*a);
                    add_into(&mut acc(&mut adj, *a, len)[*start..*start + g.len()], &g, 1.0);
                }
                Op::Repeat(a) => {
                    acc(&mut adj, *a, 1)[0] += g.iter().sum::<f64>();
                }
                Op::Row(m, r) => {
                    let len = self.len_of(*m);
                    let cols = g.len();
                    add_into(&mut acc(&mut adj, *m, len)[r * cols..(r + 1) * cols], &g, 1.0);
                }
                Op::WeightedSum(w, rows) => {
                    let wv = &self.nodes[w.0].value;
                    let gw: Vec<f64> = rows.iter().map(|r| dot(&g, self.value(*r))).collect();
                    add_into(acc(&mut adj, *w, wv.len()), &gw, 1.0);
                    for (wi, r) in wv.iter().zip(rows) {
                        add_into(acc(&mut adj, *r, g.len()), &g, *wi);
                    }
                }
                Op::LayerNorm(a) => {
                    let x = &self.nodes[a.0].value;
                    let y = &node.value;
                    let n = x.len() as f64;
                    let mean = x.iter().sum::<f64>() / n;
                    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let g_mean = g.iter().sum::<f64>() / n;
                    let gy_mean = dot(&g, y) / n;
                    let ga = acc(&mut adj, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += inv * (g[k] - g_mean - y[k] * gy_mean);
                    }
                }
                Op::LogSumExp(a, idx) => {
                    let x = &self.nodes[a.0].value;
                    let out = node.value[0];
                    let ga = acc(&mut adj, *a, x.len());
                    for &k in idx {
                        ga[k] += g[0] * (x[k] - out).exp();
                    }
                }
                Op::Index(a, k) => {
                    let len = self.len_of(*a);
                    acc(&mut adj, *a, len)[*k] += g[0];
                }
            }
            adj[i] = Some(g);
        }
        Gradients { adj }
    }

    /// Scatter parameter-leaf adjoints into a flat gradient vector.
    pub fn scatter_params(&self, grads: &Gradients, flat: &mut [f64]) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param { offset } = node.op {
                if let Some(Some(g)) = grads.adj.get(i) {
                    add_into(&mut flat[offset..offset + g.len()], g, 1.0);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`; `None` if `v` does not reach the root.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.adj.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn get_or_zero(&self, tape: &Tape, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
    }
}
