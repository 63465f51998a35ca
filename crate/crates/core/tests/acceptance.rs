//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the test
//! harness so the lines are always printed; exits nonzero if a gated check fails.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use docrel::cgmi::pair_context;
use docrel::classifier::{atl_loss_with_grad, predict};
use docrel::corpus::{insert_markers, synth_corpus, Document, RelationFact, SynthConfig};
use docrel::encoder::{encode_windows, mock_encode, read_encoding, save_encoding, EncoderConfig};
use docrel::metrics::{
    chain_restrict, ign_f1, infer_f1, intra_inter_f1, micro_f1, DocIndex, FactKey, InferMode, Score, Triplet,
    TripletSet,
};
use docrel::pairgraph::build_graph;
use docrel::training::{
    doc_logits, doc_trace, encode_corpus, gradcheck, load_checkpoint, predicted_triplets, save_checkpoint, train,
    Example, GradcheckConfig, ModelConfig, ModelParams, Pooling, TrainConfig,
};
use docrel::Execution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const SIMPLEX_TOL: f64 = 1e-9;
const NORMALIZATION_INSTANCES: usize = 1000;
const LOSS_TOL: f64 = 1e-9;
const LOSS_VECTORS: usize = 1000;
const TRAIN_F1_MIN: f64 = 0.95;
const HELD_OUT_F1_MIN: f64 = 0.80;
const LEARN_BUDGET: Duration = Duration::from_secs(300);
const LEARN_EPOCHS: usize = 200;
const METRIC_PAIRS: usize = 200;
const F1_TOL: f64 = 1e-12;
const EQUIVARIANCE_DOCS: usize = 50;

struct Outcome {
    gated: bool,
    passed: bool,
}

fn report(results: &mut Vec<Outcome>, name: &str, gated: bool, passed: bool, detail: String) {
    let tag = match (gated, passed) {
        (_, true) => "PASS",
        (true, false) => "FAIL",
        (false, false) => "WARN",
    };
    println!("{tag} {name}: {detail}");
    results.push(Outcome { gated, passed });
}

fn perturbed(cfg: ModelConfig, seed: u64, scale: f64) -> ModelParams {
    let mut p = ModelParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA11CE);
    for v in &mut p.values {
        *v += scale * (2.0 * rng.random::<f64>() - 1.0);
    }
    p
}

fn small_model(dim: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        groups: 2,
        gnn_layers: layers,
        ..ModelConfig::default()
    }
    .with_dim(dim)
}

fn gradient_correctness() -> (bool, String) {
    let t = Instant::now();
    let r = gradcheck(&GradcheckConfig::default()).unwrap();
    let el = t.elapsed();
    let ok = r.max_rel_err <= GRADCHECK_TOL && el < GRADCHECK_BUDGET;
    let detail = format!(
        "max rel err {:.3e} at {} over {}/{} entries, {:.1?}",
        r.max_rel_err, r.worst_param, r.checked, r.total, el
    );
    (ok, detail)
}

fn on_simplex(w: &[f64]) -> bool {
    w.iter().all(|&x| x >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL
}

fn normalization() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut contexts, mut alphas, mut rows, mut bad) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..NORMALIZATION_INSTANCES {
        let synth = SynthConfig {
            num_docs: 1,
            entities_per_doc: rng.random_range(2..=6),
            mentions_per_entity: rng.random_range(1..=3),
            sentences_per_doc: rng.random_range(1..=4),
            seed: i as u64,
            ..SynthConfig::default()
        };
        let doc = synth_corpus(&synth).unwrap().remove(0);
        let cfg = small_model(8, rng.random_range(1..=2));
        let ex = Example::encode(doc, &cfg.encoder).unwrap();
        for (h, t) in ex.doc.ordered_pairs() {
            let ctx = pair_context(&ex.enc, &ex.doc.entities[h], &ex.doc.entities[t]).unwrap();
            contexts += 1;
            bad += usize::from(!on_simplex(&ctx.a));
        }
        let params = perturbed(cfg, i as u64, 0.5);
        let tr = doc_trace(&params, &ex).unwrap();
        for (a, b) in &tr.mention_weights {
            alphas += 2;
            bad += usize::from(!on_simplex(a)) + usize::from(!on_simplex(b));
        }
        for row in tr.gnn_attention.iter().flatten().filter(|r| !r.is_empty()) {
            rows += 1;
            bad += usize::from(!on_simplex(row));
        }
    }
    let detail = format!(
        "{NORMALIZATION_INSTANCES} documents: {contexts} pair contexts, {alphas} mention weight vectors, {rows} GNN rows, {bad} off the simplex"
    );
    (bad == 0 && contexts > 0 && alphas > 0 && rows > 0, detail)
}

fn graph_oracle() -> (bool, String) {
    let mut ok = true;
    let mut nodes = 0;
    for m in 2..=8 {
        let g = build_graph(m).unwrap();
        let pairs: Vec<(usize, usize)> =
            (0..m).flat_map(|h| (0..m).filter(move |&t| t != h).map(move |t| (h, t))).collect();
        ok &= g.nodes == pairs;
        for (i, &(h, t)) in pairs.iter().enumerate() {
            let expect: Vec<usize> = pairs
                .iter()
                .enumerate()
                .filter(|&(j, &(u, v))| j != i && (u == h || u == t || v == h || v == t))
                .map(|(j, _)| j)
                .collect();
            ok &= g.adjacency[i] == expect;
            nodes += 1;
        }
    }
    let g4 = build_graph(4).unwrap();
    let deg9 = g4.adjacency.iter().all(|a| a.len() == 9);
    (ok && deg9, format!("{nodes} nodes over m=2..8 match the shared-entity predicate; m=4 degree 9 everywhere: {deg9}"))
}

fn loss_identities() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0_f64;
    for _ in 0..LOSS_VECTORS {
        let r = rng.random_range(1..=8);
        let logits: Vec<f64> = (0..=r).map(|_| rng.random_range(-10.0..10.0)).collect();
        let gold: BTreeSet<u32> = (0..r as u32).filter(|_| rng.random_bool(0.3)).collect();
        let c = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
        let a = atl_loss_with_grad(&logits, &gold).unwrap().0;
        let b = atl_loss_with_grad(&shifted, &gold).unwrap().0;
        worst = worst.max((a - b).abs());
    }
    let equal = atl_loss_with_grad(&[0.7; 4], &BTreeSet::new()).unwrap().0;
    let log4_err = (equal - 4f64.ln()).abs();
    (
        worst <= LOSS_TOL && log4_err <= LOSS_TOL,
        format!("shift-invariance max diff {worst:.2e} over {LOSS_VECTORS} vectors; R=3 equal logits give log 4 within {log4_err:.2e}"),
    )
}

/// The learnability run: 64 training and 16 held-out documents from seed 7.
fn learnability_config() -> (ModelConfig, TrainConfig) {
    let model = ModelConfig::default().with_dim(64);
    let train = TrainConfig {
        lr_head: 2e-3,
        epochs: LEARN_EPOCHS,
        batch_size: 4,
        seed: 7,
        execution: Execution::Sequential,
        eval_every: 0,
        ..TrainConfig::default()
    };
    (model, train)
}

fn learnability_corpus() -> Vec<Document> {
    synth_corpus(&SynthConfig {
        num_docs: 80,
        seed: 7,
        ..SynthConfig::default()
    })
    .unwrap()
}

/// Train on the first 64 documents and score both splits.
fn fit(model: ModelConfig, tc: &TrainConfig) -> (f64, f64, Duration) {
    let t = Instant::now();
    let mut ex = encode_corpus(learnability_corpus(), &model.encoder, Execution::Sequential).unwrap();
    let dev = ex.split_off(64);
    let out = train(ModelParams::init(model, 7).unwrap(), &ex, &[], tc).unwrap();
    let score = |xs: &[Example]| {
        let pred = predicted_triplets(&out.params, xs, Execution::Sequential).unwrap();
        let gold = docrel::metrics::gold_triplets(xs.iter().map(|e| &e.doc));
        micro_f1(&pred, &gold).f1
    };
    let (tr, dv) = (score(&ex), score(&dev));
    (tr, dv, t.elapsed())
}

fn learnability() -> (bool, String, f64) {
    let (model, tc) = learnability_config();
    let (tr, dv, el) = fit(model, &tc);
    let ok = tr >= TRAIN_F1_MIN && dv >= HELD_OUT_F1_MIN && el < LEARN_BUDGET;
    (
        ok,
        format!("train F1 {tr:.4} (>= {TRAIN_F1_MIN}), held-out F1 {dv:.4} (>= {HELD_OUT_F1_MIN}), {LEARN_EPOCHS} epochs in {el:.1?} on one thread"),
        dv,
    )
}

// --- brute-force metric oracles --------------------------------------------

fn oracle_score(correct: usize, predicted: usize, gold: usize) -> (f64, f64, f64) {
    let p = if predicted == 0 {
        if gold == 0 { 1.0 } else { 0.0 }
    } else {
        correct as f64 / predicted as f64
    };
    let r = if gold == 0 { 0.0 } else { correct as f64 / gold as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

fn oracle_micro(pred: &[Triplet], gold: &[Triplet]) -> (usize, usize, usize) {
    let correct = pred.iter().filter(|p| gold.iter().any(|g| g == *p)).count();
    (correct, pred.len(), gold.len())
}

fn names(doc: &Document, e: usize) -> Vec<String> {
    let mut v: Vec<String> = doc.entities[e].mentions.iter().map(|m| m.name.clone()).collect();
    v.sort();
    v.dedup();
    v
}

fn find<'a>(docs: &'a [Document], id: &str) -> &'a Document {
    docs.iter().find(|d| d.doc_id == id).unwrap()
}

fn oracle_ign(pred: &[Triplet], gold: &[Triplet], seen: &[(Vec<String>, Vec<String>, u32)], docs: &[Document]) -> (usize, usize, usize) {
    let unseen = |t: &Triplet| {
        let d = find(docs, &t.doc_id);
        let key = (names(d, t.head), names(d, t.tail), t.relation);
        !seen.iter().any(|s| *s == key)
    };
    let p: Vec<Triplet> = pred.iter().filter(|t| unseen(t)).cloned().collect();
    let g: Vec<Triplet> = gold.iter().filter(|t| unseen(t)).cloned().collect();
    oracle_micro(&p, &g)
}

fn oracle_intra(t: &Triplet, docs: &[Document]) -> bool {
    let d = find(docs, &t.doc_id);
    d.entities[t.head]
        .mentions
        .iter()
        .any(|a| d.entities[t.tail].mentions.iter().any(|b| a.sent_index == b.sent_index))
}

fn oracle_chain(set: &[Triplet], mode: InferMode) -> Vec<Triplet> {
    let same = |a: &Triplet, b: &Triplet| a.doc_id == b.doc_id;
    let has = |doc: &Triplet, h: usize, t: usize| set.iter().any(|z| same(z, doc) && z.head == h && z.tail == t);
    set.iter()
        .filter(|x| {
            // x closes h -> o -> t
            let closing = set.iter().any(|y| same(x, y) && y.head == x.head && has(x, y.tail, x.tail));
            if mode == InferMode::R3 {
                return closing;
            }
            // x is the first hop h -> o
            let first = set
                .iter()
                .any(|y| same(x, y) && y.head == x.tail && y.tail != x.head && has(x, x.head, y.tail));
            // x is the second hop o -> t
            let second = set
                .iter()
                .any(|y| same(x, y) && y.tail == x.head && y.head != x.tail && has(x, y.head, x.tail));
            closing || first || second
        })
        .cloned()
        .collect()
}

fn same_score(s: &Score, counts: (usize, usize, usize)) -> bool {
    let (p, r, f) = oracle_score(counts.0, counts.1, counts.2);
    (s.correct, s.predicted, s.gold) == counts
        && (s.precision - p).abs() <= F1_TOL
        && (s.recall - r).abs() <= F1_TOL
        && (s.f1 - f).abs() <= F1_TOL
}

fn metric_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut mismatches = 0;
    let (mut chains, mut ign_dropped) = (0usize, 0usize);
    for i in 0..METRIC_PAIRS {
        let docs = synth_corpus(&SynthConfig {
            num_docs: 3,
            entities_per_doc: rng.random_range(2..=5),
            vocab_size: 40,
            seed: 1000 + i as u64,
            ..SynthConfig::default()
        })
        .unwrap();
        let nrel = 3;
        let density = rng.random_range(0.05..0.5);
        let random_set = |rng: &mut ChaCha8Rng, p: f64| -> Vec<Triplet> {
            let mut v = Vec::new();
            for d in &docs {
                for (h, t) in d.ordered_pairs() {
                    for r in 0..nrel {
                        if rng.random_bool(p) {
                            v.push(Triplet { doc_id: d.doc_id.clone(), head: h, tail: t, relation: r });
                        }
                    }
                }
            }
            v
        };
        let gold = random_set(&mut rng, density);
        // predictions: gold with misses plus false alarms
        let mut pred: Vec<Triplet> = gold.iter().filter(|_| rng.random_bool(0.7)).cloned().collect();
        for t in random_set(&mut rng, density / 2.0) {
            if !pred.contains(&t) {
                pred.push(t);
            }
        }
        let seen: Vec<(Vec<String>, Vec<String>, u32)> = random_set(&mut rng, density)
            .iter()
            .map(|t| {
                let d = find(&docs, &t.doc_id);
                (names(d, t.head), names(d, t.tail), t.relation)
            })
            .collect();

        let ps: TripletSet = pred.iter().cloned().collect();
        let gs: TripletSet = gold.iter().cloned().collect();
        let seen_set: BTreeSet<FactKey> = seen
            .iter()
            .map(|(a, b, r)| (a.iter().cloned().collect(), b.iter().cloned().collect(), *r))
            .collect();
        let index = DocIndex::new(&docs);

        let mut ok = same_score(&micro_f1(&ps, &gs), oracle_micro(&pred, &gold));
        let ign = oracle_ign(&pred, &gold, &seen, &docs);
        ign_dropped += gold.len() - ign.2;
        ok &= same_score(&ign_f1(&ps, &gs, &seen_set, &index).unwrap(), ign);

        let ii = intra_inter_f1(&ps, &gs, &index).unwrap();
        let split = |v: &[Triplet], intra: bool| -> Vec<Triplet> {
            v.iter().filter(|t| oracle_intra(t, &docs) == intra).cloned().collect()
        };
        ok &= same_score(&ii.intra, oracle_micro(&split(&pred, true), &split(&gold, true)));
        ok &= same_score(&ii.inter, oracle_micro(&split(&pred, false), &split(&gold, false)));

        for mode in [InferMode::All, InferMode::R3] {
            let og = oracle_chain(&gold, mode);
            let op = oracle_chain(&pred, mode);
            chains += og.len();
            let got = infer_f1(&ps, &gs, mode);
            ok &= chain_restrict(&gs, mode) == og.iter().cloned().collect::<TripletSet>();
            ok &= got.no_instances == og.is_empty();
            if og.is_empty() {
                ok &= got.score.f1 == 0.0;
            } else {
                ok &= same_score(&got.score, oracle_micro(&op, &og));
            }
        }
        mismatches += usize::from(!ok);
    }
    (
        mismatches == 0 && chains > 0 && ign_dropped > 0,
        format!("{METRIC_PAIRS} random prediction/gold pairs, {mismatches} mismatches ({chains} chain facts, {ign_dropped} seen facts dropped)"),
    )
}

/// The document with entity `e` renamed to `perm[e]`.
fn relabel(doc: &Document, perm: &[usize]) -> Document {
    let mut entities = doc.entities.clone();
    for (e, ent) in doc.entities.iter().enumerate() {
        let mut moved = ent.clone();
        moved.entity_id = perm[e];
        for m in &mut moved.mentions {
            m.entity_id = perm[e];
        }
        entities[perm[e]] = moved;
    }
    Document {
        entities,
        gold_facts: doc
            .gold_facts
            .iter()
            .map(|f| RelationFact { head: perm[f.head], tail: perm[f.tail], relation: f.relation })
            .collect(),
        ..doc.clone()
    }
}

fn predictions(params: &ModelParams, ex: &Example) -> BTreeSet<(usize, usize, u32)> {
    doc_logits(params, ex)
        .unwrap()
        .iter()
        .flat_map(|pl| predict(pl).into_iter().map(move |r| (pl.pair.0, pl.pair.1, r)))
        .collect()
}

fn equivariance() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (mut failures, mut total) = (0, 0);
    for i in 0..EQUIVARIANCE_DOCS {
        let doc = synth_corpus(&SynthConfig {
            num_docs: 1,
            entities_per_doc: rng.random_range(3..=6),
            mentions_per_entity: rng.random_range(1..=3),
            seed: 500 + i as u64,
            ..SynthConfig::default()
        })
        .unwrap()
        .remove(0);
        let cfg = small_model(16, 2);
        let params = perturbed(cfg.clone(), i as u64, 0.5);
        let mut perm: Vec<usize> = (0..doc.num_entities()).collect();
        perm.shuffle(&mut rng);
        let moved = relabel(&doc, &perm);
        let a = predictions(&params, &Example::encode(doc, &cfg.encoder).unwrap());
        let b = predictions(&params, &Example::encode(moved, &cfg.encoder).unwrap());
        let mapped: BTreeSet<_> = a.iter().map(|&(h, t, r)| (perm[h], perm[t], r)).collect();
        total += a.len();
        failures += usize::from(mapped != b);
    }
    (
        failures == 0 && total > 0,
        format!("{EQUIVARIANCE_DOCS} documents under random entity permutations, {failures} mismatched prediction sets ({total} predictions)"),
    )
}

fn determinism() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_model(8, 1);
    let docs = synth_corpus(&SynthConfig { num_docs: 6, seed: 3, ..SynthConfig::default() }).unwrap();
    let ex = encode_corpus(docs.clone(), &cfg.encoder, Execution::Parallel).unwrap();
    let tc = TrainConfig { lr_head: 1e-2, epochs: 3, batch_size: 2, seed: 9, eval_every: 0, ..TrainConfig::default() };
    let run = || train(ModelParams::init(cfg.clone(), 9).unwrap(), &ex, &[], &tc).unwrap();
    let (a, b) = (run(), run());
    let curves = a.curve == b.curve && !a.curve.is_empty();

    let ck = dir.path().join("m.ckpt");
    save_checkpoint(&ck, &a.params, Some(&a.optimizer)).unwrap();
    let (p, st) = load_checkpoint(&ck).unwrap();
    let ckpt = p.values.iter().zip(&a.params.values).all(|(x, y)| x.to_bits() == y.to_bits())
        && p == a.params
        && st.as_ref() == Some(&a.optimizer);

    let enc = dir.path().join("d.enc");
    save_encoding(&enc, &ex[0].enc).unwrap();
    let back = read_encoding(&enc).unwrap();
    let encoding = back == ex[0].enc
        && back.h.as_slice().iter().zip(ex[0].enc.h.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits());

    let mut window = true;
    for d in &docs {
        let marked = insert_markers(d);
        let wide = EncoderConfig { window: marked.len() + 1, overlap: 0, ..cfg.encoder.clone() };
        window &= encode_windows(&marked, &wide).unwrap() == mock_encode(&marked, &wide);
    }
    (
        curves && ckpt && encoding && window,
        format!("loss curves identical: {curves}; checkpoint bitwise: {ckpt}; encoding file bitwise: {encoding}; single window equals whole document: {window}"),
    )
}

fn ablation(full_dev: f64) -> (bool, String) {
    let (model, tc) = learnability_config();
    let mean = ModelConfig { pooling: Pooling::Mean, ..model.clone() };
    let no_gnn = ModelConfig { gnn_layers: 0, ..model };
    let (_, mean_dev, _) = fit(mean, &tc);
    let (_, gnn_dev, _) = fit(no_gnn, &tc);
    (
        mean_dev < full_dev && gnn_dev < full_dev,
        format!("held-out F1 full {full_dev:.4}, mean pooling {mean_dev:.4}, no GNN {gnn_dev:.4}"),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; nothing to list here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results = Vec::new();
    let (ok, d) = gradient_correctness();
    report(&mut results, "gradient correctness", true, ok, d);
    let (ok, d) = normalization();
    report(&mut results, "normalization invariants", true, ok, d);
    let (ok, d) = graph_oracle();
    report(&mut results, "graph oracle", true, ok, d);
    let (ok, d) = loss_identities();
    report(&mut results, "loss identities", true, ok, d);
    let (ok, d, full_dev) = learnability();
    report(&mut results, "learnability", true, ok, d);
    let (ok, d) = metric_oracle();
    report(&mut results, "metric oracle equivalence", true, ok, d);
    let (ok, d) = equivariance();
    report(&mut results, "equivariance", true, ok, d);
    let (ok, d) = determinism();
    report(&mut results, "determinism and round-trips", true, ok, d);
    let (ok, d) = ablation(full_dev);
    report(&mut results, "ablation direction (reported, not gated)", false, ok, d);

    let failed = results.iter().filter(|r| r.gated && !r.passed).count();
    println!("acceptance: {} of {} gated criteria passed", results.iter().filter(|r| r.gated && r.passed).count(), results.iter().filter(|r| r.gated).count());
    if failed > 0 {
        std::process::exit(1);
    }
}
