//! Triplet-level evaluation: micro F1, Ign F1, intra/inter-sentence F1 and
//! two-hop inference F1.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub doc_id: String,
    pub head: usize,
    pub tail: usize,
    pub relation: u32,
}

pub type TripletSet = BTreeSet<Triplet>;

/// One positive prediction; `score` is the margin over the threshold logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_id: String,
    pub head: usize,
    pub tail: usize,
    pub relation: u32,
    pub score: f64,
}

impl Prediction {
    pub fn triplet(&self) -> Triplet {
        Triplet {
            doc_id: self.doc_id.clone(),
            head: self.head,
            tail: self.tail,
            relation: self.relation,
        }
    }
}

pub fn write_predictions(w: &mut impl Write, preds: &[Prediction]) -> Result<()> {
    for p in preds {
        serde_json::to_writer(&mut *w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions(r: impl BufRead) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            doc: format!("prediction line {}", i + 1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn gold_triplets<'a>(docs: impl IntoIterator<Item = &'a Document>) -> TripletSet {
    docs.into_iter()
        .flat_map(|d| {
            d.gold_facts.iter().map(move |f| Triplet {
                doc_id: d.doc_id.clone(),
                head: f.head,
                tail: f.tail,
                relation: f.relation,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Score {
    fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let precision = match (predicted, gold) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            _ => correct as f64 / predicted as f64,
        };
        let recall = if gold == 0 { 0.0 } else { correct as f64 / gold as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            correct,
            predicted,
            gold,
        }
    }
}

pub fn micro_f1(pred: &TripletSet, gold: &TripletSet) -> Score {
    Score::from_counts(pred.intersection(gold).count(), pred.len(), gold.len())
}

/// Surface-name identity of a fact, independent of document.
pub type FactKey = (BTreeSet<String>, BTreeSet<String>, u32);

/// Documents by id.
pub struct DocIndex<'a> {
    docs: BTreeMap<&'a str, &'a Document>,
}

impl<'a> DocIndex<'a> {
    pub fn new(docs: impl IntoIterator<Item = &'a Document>) -> Self {
        Self {
            docs: docs.into_iter().map(|d| (d.doc_id.as_str(), d)).collect(),
        }
    }

    pub fn get(&self, doc_id: &str) -> Result<&'a Document> {
        self.docs
            .get(doc_id)
            .copied()
            .ok_or_else(|| Error::UnknownDocument(doc_id.to_string()))
    }

    fn entity_checked(&self, t: &Triplet) -> Result<&'a Document> {
        let d = self.get(&t.doc_id)?;
        let m = d.entities.len();
        if t.head >= m || t.tail >= m {
            return Err(Error::InvalidDocument {
                doc: t.doc_id.clone(),
                message: format!("triplet references entity {} of {m}", t.head.max(t.tail)),
            });
        }
        Ok(d)
    }

    pub fn fact_key(&self, t: &Triplet) -> Result<FactKey> {
        let d = self.entity_checked(t)?;
        Ok((d.entity_names(t.head), d.entity_names(t.tail), t.relation))
    }

    /// Some head mention and some tail mention share a sentence.
    pub fn is_intra(&self, t: &Triplet) -> Result<bool> {
        Ok(self.entity_checked(t)?.co_sentential(t.head, t.tail))
    }
}

pub fn train_facts<'a>(docs: impl IntoIterator<Item = &'a Document>) -> BTreeSet<FactKey> {
    docs.into_iter()
        .flat_map(|d| {
            d.gold_facts
                .iter()
                .map(move |f| (d.entity_names(f.head), d.entity_names(f.tail), f.relation))
        })
        .collect()
}

/// Micro F1 after dropping, from both sides, triplets whose fact was seen in training.
pub fn ign_f1(pred: &TripletSet, gold: &TripletSet, seen: &BTreeSet<FactKey>, docs: &DocIndex<'_>) -> Result<Score> {
    let keep = |s: &TripletSet| -> Result<TripletSet> {
        let mut out = TripletSet::new();
        for t in s {
            if seen.is_empty() || !seen.contains(&docs.fact_key(t)?) {
                out.insert(t.clone());
            }
        }
        Ok(out)
    };
    Ok(micro_f1(&keep(pred)?, &keep(gold)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntraInter {
    pub intra: Score,
    pub inter: Score,
}

pub fn intra_inter_f1(pred: &TripletSet, gold: &TripletSet, docs: &DocIndex<'_>) -> Result<IntraInter> {
    let split = |s: &TripletSet| -> Result<(TripletSet, TripletSet)> {
        let (mut a, mut b) = (TripletSet::new(), TripletSet::new());
        for t in s {
            if docs.is_intra(t)? {
                a.insert(t.clone());
            } else {
                b.insert(t.clone());
            }
        }
        Ok((a, b))
    };
    let (pa, pe) = split(pred)?;
    let (ga, ge) = split(gold)?;
    Ok(IntraInter {
        intra: micro_f1(&pa, &ga),
        inter: micro_f1(&pe, &ge),
    })
}

/// Which facts of a two-hop chain are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferMode {
    /// `h→o`, `o→t` and the closing `h→t`.
    #[default]
    All,
    /// Only the closing fact `h→t`.
    R3,
}

/// Facts taking part in some chain `(h,r1,o), (o,r2,t), (h,r3,t)` within one document.
pub fn chain_restrict(facts: &TripletSet, mode: InferMode) -> TripletSet {
    let mut by_doc: BTreeMap<&str, Vec<&Triplet>> = BTreeMap::new();
    for t in facts {
        by_doc.entry(t.doc_id.as_str()).or_default().push(t);
    }
    let mut out = TripletSet::new();
    for ts in by_doc.values() {
        // relations keyed by (head, tail)
        let mut rel: BTreeMap<(usize, usize), Vec<&Triplet>> = BTreeMap::new();
        let mut from: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for t in ts {
            rel.entry((t.head, t.tail)).or_default().push(t);
            from.entry(t.head).or_default().insert(t.tail);
        }
        for (&(h, o), first) in &rel {
            let Some(next) = from.get(&o) else { continue };
            for &t in next {
                if t == h {
                    continue;
                }
                let Some(closing) = rel.get(&(h, t)) else { continue };
                if mode == InferMode::All {
                    out.extend(first.iter().map(|x| (*x).clone()));
                    out.extend(rel[&(o, t)].iter().map(|x| (*x).clone()));
                }
                out.extend(closing.iter().map(|x| (*x).clone()));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferScore {
    pub score: Score,
    /// The gold restriction was empty, so the score carries no information.
    pub no_instances: bool,
}

pub fn infer_f1(pred: &TripletSet, gold: &TripletSet, mode: InferMode) -> InferScore {
    let g = chain_restrict(gold, mode);
    let p = chain_restrict(pred, mode);
    if g.is_empty() {
        return InferScore {
            score: Score {
                f1: 0.0,
                ..Score::from_counts(p.intersection(&g).count(), p.len(), 0)
            },
            no_instances: true,
        };
    }
    InferScore {
        score: micro_f1(&p, &g),
        no_instances: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub predicted: usize,
    pub gold: usize,
    pub correct: usize,
    pub intra_gold: usize,
    pub inter_gold: usize,
    pub infer_gold: usize,
    pub infer_no_instances: bool,
}

/// The metrics JSON written by evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub ign_f1: f64,
    pub intra_f1: f64,
    pub inter_f1: f64,
    pub infer_f1: f64,
    pub counts: Counts,
}

pub fn evaluate(
    pred: &TripletSet,
    docs: &[Document],
    seen: &BTreeSet<FactKey>,
    mode: InferMode,
) -> Result<Metrics> {
    let index = DocIndex::new(docs);
    let gold = gold_triplets(docs);
    let micro = micro_f1(pred, &gold);
    let ign = ign_f1(pred, &gold, seen, &index)?;
    let ii = intra_inter_f1(pred, &gold, &index)?;
    let inf = infer_f1(pred, &gold, mode);
    Ok(Metrics {
        f1: micro.f1,
        precision: micro.precision,
        recall: micro.recall,
        ign_f1: ign.f1,
        intra_f1: ii.intra.f1,
        inter_f1: ii.inter.f1,
        infer_f1: inf.score.f1,
        counts: Counts {
            predicted: micro.predicted,
            gold: micro.gold,
            correct: micro.correct,
            intra_gold: ii.intra.gold,
            inter_gold: ii.inter.gold,
            infer_gold: inf.score.gold,
            infer_no_instances: inf.no_instances,
        },
    })
}
