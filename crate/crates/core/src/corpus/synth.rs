//! Synthetic corpora with planted, context-decodable relations.
//!
//! Token-id layout: the two marker ids, then one head-trigger and one
//! tail-trigger id per relation, then entity-name words, then filler words.
//! A planted fact `(h, r, t)` puts the head trigger of `r` directly before one
//! mention of `h` and the tail trigger of `r` directly before one mention of
//! `t`. Within a document every relation is planted at most once and every
//! entity is the head (and the tail) of at most one fact, so each pair's label
//! is decodable from the trigger tokens next to its mentions.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Document, Entity, Mention, RelationFact, Span, TokenId, FIRST_ORDINARY_TOKEN};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_docs: usize,
    pub vocab_size: usize,
    pub num_relations: usize,
    pub entities_per_doc: usize,
    pub mentions_per_entity: usize,
    pub seed: u64,
    /// Probability that an eligible ordered pair receives a planted fact.
    pub fact_rate: f64,
    pub sentences_per_doc: usize,
    pub num_entity_types: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_docs: 64,
            vocab_size: 256,
            num_relations: 4,
            entities_per_doc: 4,
            mentions_per_entity: 2,
            seed: 7,
            fact_rate: 1.0,
            sentences_per_doc: 3,
            num_entity_types: 3,
        }
    }
}

impl SynthConfig {
    pub fn head_trigger(&self, relation: usize) -> TokenId {
        FIRST_ORDINARY_TOKEN + relation as TokenId
    }

    pub fn tail_trigger(&self, relation: usize) -> TokenId {
        FIRST_ORDINARY_TOKEN + (self.num_relations + relation) as TokenId
    }

    fn word_ranges(&self) -> (std::ops::Range<TokenId>, std::ops::Range<TokenId>) {
        let first = FIRST_ORDINARY_TOKEN as usize + 2 * self.num_relations;
        let free = self.vocab_size - first;
        let names = first..first + free / 2;
        let filler = names.end..self.vocab_size;
        (
            names.start as TokenId..names.end as TokenId,
            filler.start as TokenId..filler.end as TokenId,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.entities_per_doc < 2 {
            return Err(Error::Config(format!(
                "entities_per_doc must be at least 2 (got {})",
                self.entities_per_doc
            )));
        }
        if self.mentions_per_entity == 0 {
            return Err(Error::Config("mentions_per_entity must be at least 1".into()));
        }
        if self.sentences_per_doc == 0 {
            return Err(Error::Config("sentences_per_doc must be at least 1".into()));
        }
        if self.num_entity_types == 0 {
            return Err(Error::Config("num_entity_types must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.fact_rate) {
            return Err(Error::Config(format!("fact_rate {} outside [0, 1]", self.fact_rate)));
        }
        let reserved = FIRST_ORDINARY_TOKEN as usize + 2 * self.num_relations;
        if self.vocab_size < reserved + 4 {
            return Err(Error::Config(format!(
                "vocab_size {} too small: {} ids reserved for markers and triggers, need at least 4 more",
                self.vocab_size, reserved
            )));
        }
        Ok(())
    }
}

/// Generate `cfg.num_docs` documents; identical configs give identical corpora.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<Document>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.num_docs)
        .map(|i| {
            let doc = synth_doc(cfg, i, &mut rng);
            doc.validate(Some(cfg.num_relations))?;
            Ok(doc)
        })
        .collect()
}

/// A random mention with no trigger yet, so every trigger sits directly
/// before its mention; falls back to any mention when all are taken.
fn free_mention(slots: &[Vec<TokenId>], rng: &mut ChaCha8Rng) -> usize {
    let free: Vec<usize> = (0..slots.len()).filter(|&k| slots[k].is_empty()).collect();
    match free.len() {
        0 => rng.random_range(0..slots.len()),
        n => free[rng.random_range(0..n)],
    }
}

fn synth_doc(cfg: &SynthConfig, index: usize, rng: &mut ChaCha8Rng) -> Document {
    let (names, filler) = cfg.word_ranges();
    let m = cfg.entities_per_doc;

    let types: Vec<u32> = (0..m)
        .map(|_| rng.random_range(0..cfg.num_entity_types as u32))
        .collect();
    let name_tokens: Vec<Vec<TokenId>> = (0..m)
        .map(|_| {
            let len = rng.random_range(1..=2);
            (0..len).map(|_| rng.random_range(names.clone())).collect()
        })
        .collect();
    // sentence of every mention
    let mention_sent: Vec<Vec<usize>> = (0..m)
        .map(|_| {
            (0..cfg.mentions_per_entity)
                .map(|_| rng.random_range(0..cfg.sentences_per_doc))
                .collect()
        })
        .collect();

    let mut pairs: Vec<(usize, usize)> = super::ordered_pairs(m).collect();
    pairs.shuffle(rng);
    let mut relations: Vec<u32> = (0..cfg.num_relations as u32).collect();
    relations.shuffle(rng);
    let mut head_used = vec![false; m];
    let mut tail_used = vec![false; m];
    let mut facts = BTreeSet::new();
    // triggers[e][k]: tokens placed right before mention k of entity e
    let mut triggers: Vec<Vec<Vec<TokenId>>> = (0..m)
        .map(|_| vec![Vec::new(); cfg.mentions_per_entity])
        .collect();
    for (h, t) in pairs {
        let planted = rng.random::<f64>() < cfg.fact_rate;
        if !planted || head_used[h] || tail_used[t] {
            continue;
        }
        let Some(r) = relations.pop() else { break };
        head_used[h] = true;
        tail_used[t] = true;
        facts.insert(RelationFact {
            head: h,
            tail: t,
            relation: r,
        });
        let hm = free_mention(&triggers[h], rng);
        triggers[h][hm].push(cfg.head_trigger(r as usize));
        let tm = free_mention(&triggers[t], rng);
        triggers[t][tm].push(cfg.tail_trigger(r as usize));
    }

    let mut sentences = Vec::with_capacity(cfg.sentences_per_doc);
    let mut mentions: Vec<Vec<Option<Mention>>> = (0..m)
        .map(|_| vec![None; cfg.mentions_per_entity])
        .collect();
    for s in 0..cfg.sentences_per_doc {
        let mut here: Vec<(usize, usize)> = (0..m)
            .flat_map(|e| (0..cfg.mentions_per_entity).map(move |k| (e, k)))
            .filter(|&(e, k)| mention_sent[e][k] == s)
            .collect();
        here.shuffle(rng);
        let mut tokens: Vec<TokenId> = Vec::new();
        push_filler(&mut tokens, &filler, rng);
        for (e, k) in here {
            tokens.extend_from_slice(&triggers[e][k]);
            let start = tokens.len();
            tokens.extend_from_slice(&name_tokens[e]);
            mentions[e][k] = Some(Mention {
                sent_index: s,
                span: Span::new(start, tokens.len()),
                entity_id: e,
                name: surface(&name_tokens[e]),
            });
            push_filler(&mut tokens, &filler, rng);
        }
        sentences.push(tokens);
    }

    let entities = mentions
        .into_iter()
        .enumerate()
        .map(|(e, ms)| Entity {
            entity_id: e,
            entity_type: types[e],
            mentions: ms.into_iter().map(|m| m.expect("every mention placed")).collect(),
        })
        .collect();

    Document {
        doc_id: format!("synth-{}-{index:05}", cfg.seed),
        sentences,
        entities,
        gold_facts: facts,
    }
}

fn push_filler(tokens: &mut Vec<TokenId>, filler: &std::ops::Range<TokenId>, rng: &mut ChaCha8Rng) {
    let n = rng.random_range(1..=3);
    for _ in 0..n {
        tokens.push(rng.random_range(filler.clone()));
    }
}

fn surface(tokens: &[TokenId]) -> String {
    tokens
        .iter()
        .map(|t| format!("w{t}"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_seed() {
        let cfg = SynthConfig {
            num_docs: 16,
            seed: 7,
            ..Default::default()
        };
        let a = serde_json::to_string(&synth_corpus(&cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&synth_corpus(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = SynthConfig { seed: 8, ..cfg };
        let c = serde_json::to_string(&synth_corpus(&other).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn four_entities_give_twelve_pairs() {
        let cfg = SynthConfig {
            num_docs: 64,
            entities_per_doc: 4,
            ..Default::default()
        };
        for d in synth_corpus(&cfg).unwrap() {
            assert_eq!(d.num_pairs(), 12);
            assert_eq!(d.ordered_pairs().count(), 12);
        }
    }

    #[test]
    fn zero_fact_rate_gives_no_facts() {
        let cfg = SynthConfig {
            fact_rate: 0.0,
            ..Default::default()
        };
        assert!(synth_corpus(&cfg).unwrap().iter().all(|d| d.gold_facts.is_empty()));
    }

    #[test]
    fn rejects_single_entity() {
        let cfg = SynthConfig {
            entities_per_doc: 1,
            ..Default::default()
        };
        assert!(matches!(synth_corpus(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_vocab_without_room_for_triggers() {
        let cfg = SynthConfig {
            vocab_size: 8,
            num_relations: 4,
            ..Default::default()
        };
        assert!(synth_corpus(&cfg).is_err());
    }

    #[test]
    fn triggers_sit_next_to_the_planted_mentions() {
        let cfg = SynthConfig::default();
        for d in synth_corpus(&cfg).unwrap() {
            for f in &d.gold_facts {
                let before = |e: usize, trig: TokenId| {
                    d.entities[e].mentions.iter().any(|m| {
                        let sent = &d.sentences[m.sent_index];
                        // with two mentions per entity each role gets its own mention
                        m.span.start > 0 && sent[m.span.start - 1] == trig
                    })
                };
                assert!(before(f.head, cfg.head_trigger(f.relation as usize)));
                assert!(before(f.tail, cfg.tail_trigger(f.relation as usize)));
            }
            // triggers never inside a mention span
            let trig_max = FIRST_ORDINARY_TOKEN + 2 * cfg.num_relations as TokenId;
            for e in &d.entities {
                for m in &e.mentions {
                    let sent = &d.sentences[m.sent_index];
                    assert!(sent[m.span.start..m.span.end].iter().all(|&t| t >= trig_max));
                }
            }
        }
    }

    #[test]
    fn some_facts_cross_sentences() {
        let docs = synth_corpus(&SynthConfig::default()).unwrap();
        let mut intra = 0;
        let mut inter = 0;
        for d in &docs {
            for f in &d.gold_facts {
                if d.co_sentential(f.head, f.tail) {
                    intra += 1;
                } else {
                    inter += 1;
                }
            }
        }
        assert!(intra > 0 && inter > 0, "intra {intra} inter {inter}");
    }
}
