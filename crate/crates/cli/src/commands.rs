//! Subcommand bodies. Each one loads and checks all of its inputs before
//! creating the output directory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use docrel::classifier::predict;
use docrel::corpus::{
    insert_markers, parse_docred_file, read_corpus, synth_corpus, write_corpus, Document, EntityTypeMap,
    RelationMap, Vocab,
};
use docrel::encoder::{load_encoding, save_encoding};
use docrel::metrics::{evaluate, train_facts, write_predictions, TripletSet};
use docrel::pairgraph::build_graph;
use docrel::training::{
    doc_trace, encode_corpus, gradcheck, load_checkpoint, predict_corpus, save_checkpoint, train, write_loss_curve,
    Example, ModelConfig, ModelParams,
};
use docrel::{Error, Execution};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::manifest::ManifestBuilder;

pub const ENCODING_INDEX: &str = "index.json";

fn execution(cfg: &RunConfig) -> Execution {
    match cfg.jobs {
        Some(1) => Execution::Sequential,
        _ => cfg.train.execution,
    }
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    let docs = read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))?;
    if docs.is_empty() {
        return Err(Error::Empty(format!("corpus {}", path.display())).into());
    }
    Ok(docs)
}

pub fn ingest(cfg: &RunConfig, input: &Path, rel2id: Option<&Path>, out: &Path) -> Result<()> {
    let mut m = ManifestBuilder::new("ingest", cfg);
    m.input("docred", input);
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let relations = match rel2id {
        Some(p) => {
            m.input("rel2id", p);
            let json = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RelationMap::from_rel2id(&json)?
        }
        None => relations_in(&text)?,
    };
    let types = EntityTypeMap::docred();
    let mut vocab = Vocab::new();
    let docs = parse_docred_file(&text, &mut vocab, &relations, &types)?;

    create_out(out)?;
    let corpus = out.join("corpus.json");
    write_corpus(&corpus, &docs)?;
    let names: Vec<&str> = (0..relations.len() as u32).filter_map(|i| relations.name(i)).collect();
    write_json(&out.join("relations.json"), &names)?;
    write_json(&out.join("vocab.json"), &vocab.words())?;
    m.output("corpus", &corpus);
    m.output("relations", &out.join("relations.json"));
    m.output("vocab", &out.join("vocab.json"));
    m.note("documents", docs.len());
    m.note("relations", relations.len());
    m.note("entity_types", types.len());
    m.finish(out)?;
    println!("ingested {} documents, {} relation types", docs.len(), relations.len());
    Ok(())
}

/// Relation names found in the labels, sorted, when no rel2id file is given.
fn relations_in(text: &str) -> Result<RelationMap> {
    #[derive(Deserialize)]
    struct Label {
        r: String,
    }
    #[derive(Deserialize)]
    struct Rec {
        #[serde(default)]
        labels: Vec<Label>,
    }
    let recs: Vec<Rec> = serde_json::from_str(text).context("scanning relation labels")?;
    let mut names: Vec<String> = recs.into_iter().flat_map(|r| r.labels).map(|l| l.r).collect();
    names.sort();
    names.dedup();
    Ok(RelationMap::from_names(names))
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut m = ManifestBuilder::new("synth", cfg);
    if cfg.held_out >= cfg.synth.num_docs {
        bail!(Error::Config(format!(
            "held_out {} leaves no training documents out of {}",
            cfg.held_out, cfg.synth.num_docs
        )));
    }
    let mut docs = synth_corpus(&cfg.synth)?;
    let dev = docs.split_off(docs.len() - cfg.held_out);

    create_out(out)?;
    let corpus = out.join("corpus.json");
    write_corpus(&corpus, &docs)?;
    m.output("corpus", &corpus);
    if !dev.is_empty() {
        let p = out.join("dev.json");
        write_corpus(&p, &dev)?;
        m.output("dev", &p);
    }
    m.note("train_documents", docs.len());
    m.note("dev_documents", dev.len());
    m.note("train_facts", docs.iter().map(|d| d.gold_facts.len()).sum::<usize>());
    m.finish(out)?;
    println!("wrote {} training and {} held-out documents", docs.len(), dev.len());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct EncodingIndex {
    dim: usize,
    /// `doc_id` to file name within the index directory.
    files: BTreeMap<String, String>,
}

pub fn encode(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<()> {
    let mut m = ManifestBuilder::new("encode", cfg);
    m.input("corpus", corpus);
    let docs = load_corpus(corpus)?;
    let mut index = EncodingIndex {
        dim: cfg.model.encoder.dim,
        files: BTreeMap::new(),
    };
    for (i, d) in docs.iter().enumerate() {
        if index.files.insert(d.doc_id.clone(), format!("{i:05}.enc")).is_some() {
            bail!(Error::InvalidDocument {
                doc: d.doc_id.clone(),
                message: "duplicate document id in corpus".into(),
            });
        }
    }
    let examples = encode_corpus(docs, &cfg.model.encoder, execution(cfg))?;

    create_out(out)?;
    for ex in &examples {
        save_encoding(&out.join(&index.files[&ex.doc.doc_id]), &ex.enc)?;
    }
    write_json(&out.join(ENCODING_INDEX), &index)?;
    m.output("encodings", out);
    m.note("documents", examples.len());
    m.finish(out)?;
    println!("encoded {} documents at d={}", examples.len(), index.dim);
    Ok(())
}

/// Pair documents with their encodings, read from `encodings` when given and
/// otherwise computed with the mock encoder of `model`.
fn examples(docs: Vec<Document>, encodings: Option<&Path>, model: &ModelConfig, exec: Execution) -> Result<Vec<Example>> {
    let Some(dir) = encodings else {
        return Ok(encode_corpus(docs, &model.encoder, exec)?);
    };
    let index_path = dir.join(ENCODING_INDEX);
    let index: EncodingIndex = serde_json::from_reader(BufReader::new(
        File::open(&index_path).with_context(|| format!("opening {}", index_path.display()))?,
    ))
    .with_context(|| format!("parsing {}", index_path.display()))?;
    if index.dim != model.dim {
        bail!(Error::Dimension {
            what: format!("encodings in {} vs model", dir.display()),
            expected: model.dim,
            found: index.dim,
        });
    }
    docs.into_iter()
        .map(|doc| {
            let file = index
                .files
                .get(&doc.doc_id)
                .ok_or_else(|| Error::UnknownDocument(doc.doc_id.clone()))?;
            let enc = load_encoding(&dir.join(file), &insert_markers(&doc), Some(model.dim))?;
            Ok(Example { doc, enc })
        })
        .collect()
}

pub struct TrainInputs<'a> {
    pub corpus: &'a Path,
    pub dev: Option<&'a Path>,
    pub encodings: Option<&'a Path>,
}

pub fn train_cmd(cfg: &RunConfig, inp: &TrainInputs<'_>, out: &Path) -> Result<()> {
    let mut m = ManifestBuilder::new("train", cfg);
    m.input("corpus", inp.corpus);
    let exec = execution(cfg);
    let train_ex = examples(load_corpus(inp.corpus)?, inp.encodings, &cfg.model, exec)?;
    if let Some(p) = inp.encodings {
        m.input("encodings", p);
    }
    let dev_ex = match inp.dev {
        Some(p) => {
            m.input("dev", p);
            examples(load_corpus(p)?, None, &cfg.model, exec)?
        }
        None => Vec::new(),
    };
    let init = ModelParams::init(cfg.model.clone(), cfg.seed)?;
    let mut tc = cfg.train.clone();
    tc.execution = exec;
    let outcome = train(init, &train_ex, &dev_ex, &tc)?;

    create_out(out)?;
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&ckpt, &outcome.params, Some(&outcome.optimizer))?;
    let curve = out.join("loss.csv");
    let mut w = BufWriter::new(File::create(&curve)?);
    write_loss_curve(&mut w, &outcome.curve)?;
    w.flush()?;
    write_json(&out.join("epochs.json"), &outcome.epochs)?;
    m.output("checkpoint", &ckpt);
    m.output("loss_curve", &curve);
    m.output("epochs", &out.join("epochs.json"));
    m.note("parameters", outcome.params.len());
    m.note("steps", outcome.curve.len());
    m.note("final_loss", outcome.curve.last().map(|p| p.loss));
    if let Some(last) = outcome.epochs.iter().rev().find(|e| e.train_f1.is_some()) {
        m.note("train_f1", last.train_f1);
        m.note("dev_f1", last.dev_f1);
    }
    m.note("diverged", &outcome.diverged);
    m.finish(out)?;
    if let Some(d) = outcome.diverged {
        bail!("training diverged at epoch {} step {}: {}", d.epoch, d.step, d.reason);
    }
    println!(
        "trained {} steps, final loss {:.6}",
        outcome.curve.len(),
        outcome.curve.last().map_or(f64::NAN, |p| p.loss)
    );
    Ok(())
}

pub struct ModelInputs<'a> {
    pub corpus: &'a Path,
    pub checkpoint: &'a Path,
    pub encodings: Option<&'a Path>,
    /// `--dim` as given on the command line; must agree with the checkpoint.
    pub dim_flag: Option<usize>,
}

fn load_model(inp: &ModelInputs<'_>) -> Result<ModelParams> {
    let (params, _) =
        load_checkpoint(inp.checkpoint).with_context(|| format!("loading checkpoint {}", inp.checkpoint.display()))?;
    if let Some(d) = inp.dim_flag {
        if d != params.config.dim {
            bail!(Error::Dimension {
                what: format!("--dim vs checkpoint {}", inp.checkpoint.display()),
                expected: params.config.dim,
                found: d,
            });
        }
    }
    Ok(params)
}

pub fn eval(cfg: &RunConfig, inp: &ModelInputs<'_>, train_corpus: Option<&Path>, out: &Path) -> Result<()> {
    let mut m = ManifestBuilder::new("eval", cfg);
    m.input("corpus", inp.corpus);
    m.input("checkpoint", inp.checkpoint);
    let params = load_model(inp)?;
    let exec = execution(cfg);
    let ex = examples(load_corpus(inp.corpus)?, inp.encodings, &params.config, exec)?;
    let seen = match train_corpus {
        Some(p) => {
            m.input("train_corpus", p);
            train_facts(&load_corpus(p)?)
        }
        None => Default::default(),
    };
    let preds = predict_corpus(&params, &ex, exec)?;
    let docs: Vec<Document> = ex.into_iter().map(|e| e.doc).collect();
    let metrics = evaluate(&preds.iter().map(|p| p.triplet()).collect::<TripletSet>(), &docs, &seen, cfg.infer_eval)?;

    create_out(out)?;
    let path = out.join("metrics.json");
    write_json(&path, &metrics)?;
    m.output("metrics", &path);
    m.finish(out)?;
    println!(
        "F1 {:.4}  Ign F1 {:.4}  intra {:.4}  inter {:.4}  infer {:.4}",
        metrics.f1, metrics.ign_f1, metrics.intra_f1, metrics.inter_f1, metrics.infer_f1
    );
    Ok(())
}

pub fn predict_cmd(cfg: &RunConfig, inp: &ModelInputs<'_>, out: &Path) -> Result<()> {
    let mut m = ManifestBuilder::new("predict", cfg);
    m.input("corpus", inp.corpus);
    m.input("checkpoint", inp.checkpoint);
    let params = load_model(inp)?;
    let exec = execution(cfg);
    let ex = examples(load_corpus(inp.corpus)?, inp.encodings, &params.config, exec)?;
    let preds = predict_corpus(&params, &ex, exec)?;

    create_out(out)?;
    let path = out.join("predictions.jsonl");
    let mut w = BufWriter::new(File::create(&path)?);
    write_predictions(&mut w, &preds)?;
    w.flush()?;
    m.output("predictions", &path);
    m.note("predictions", preds.len());
    m.finish(out)?;
    println!("wrote {} predictions", preds.len());
    Ok(())
}

/// Returns whether the check passed.
pub fn gradcheck_cmd(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let mut m = ManifestBuilder::new("gradcheck", cfg);
    let report = gradcheck(&cfg.gradcheck)?;

    create_out(out)?;
    let path = out.join("report.json");
    write_json(&path, &report)?;
    m.output("report", &path);
    m.note("passed", report.passed);
    m.note("max_rel_err", report.max_rel_err);
    m.finish(out)?;
    println!(
        "max relative error {:.3e} at {} (analytic {:.6e}, numeric {:.6e}); {} of {} entries checked: {}",
        report.max_rel_err,
        report.worst_param,
        report.analytic,
        report.numeric,
        report.checked,
        report.total,
        if report.passed { "ok" } else { "FAILED" }
    );
    Ok(report.passed)
}

#[derive(Serialize)]
struct PairTrace {
    head: usize,
    tail: usize,
    neighbours: Vec<(usize, usize)>,
    logits: Vec<f64>,
    predicted: Vec<u32>,
    gold: Vec<u32>,
    head_mention_weights: Vec<f64>,
    tail_mention_weights: Vec<f64>,
    degenerate_context: bool,
    /// Per layer, attention over `neighbours`.
    gnn_attention: Vec<Vec<f64>>,
}

pub fn inspect_graph(
    cfg: &RunConfig,
    corpus: &Path,
    doc_id: &str,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mut m = ManifestBuilder::new("inspect-graph", cfg);
    m.input("corpus", corpus);
    let docs = load_corpus(corpus)?;
    let doc = docs
        .into_iter()
        .find(|d| d.doc_id == doc_id)
        .ok_or_else(|| Error::UnknownDocument(doc_id.to_string()))?;
    let graph = build_graph(doc.num_entities())?;
    let trace = match checkpoint {
        Some(p) => {
            m.input("checkpoint", p);
            let (params, _) = load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            let ex = Example::encode(doc.clone(), &params.config.encoder)?;
            let t = doc_trace(&params, &ex)?;
            let pairs: Vec<PairTrace> = graph
                .nodes
                .iter()
                .enumerate()
                .map(|(i, &(h, tl))| {
                    let (hw, tw) = t.mention_weights.get(i).cloned().unwrap_or_default();
                    PairTrace {
                        head: h,
                        tail: tl,
                        neighbours: graph.adjacency[i].iter().map(|&j| graph.nodes[j]).collect(),
                        logits: t.logits[i].logits.clone(),
                        predicted: predict(&t.logits[i]).into_iter().collect(),
                        gold: doc.relations_of(h, tl),
                        head_mention_weights: hw,
                        tail_mention_weights: tw,
                        degenerate_context: t.degenerate[i],
                        gnn_attention: t.gnn_attention.iter().map(|layer| layer[i].clone()).collect(),
                    }
                })
                .collect();
            Some(pairs)
        }
        None => None,
    };

    create_out(out)?;
    let text = graph.adjacency_text();
    let gpath = out.join("graph.txt");
    std::fs::write(&gpath, &text)?;
    m.output("graph", &gpath);
    if let Some(pairs) = trace {
        let tpath = out.join("trace.json");
        write_json(&tpath, &pairs)?;
        m.output("trace", &tpath);
    }
    m.note("entities", graph.num_entities);
    m.note("nodes", graph.nodes.len());
    m.finish(out)?;
    print!("{text}");
    Ok(())
}

/// Default location of an input produced by an earlier command.
pub fn default_input(data: &Path, command: &str, file: &str) -> PathBuf {
    data.join(command).join(file)
}
