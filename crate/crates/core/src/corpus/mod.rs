//! Documents, entities, mentions and relation facts.

mod docred;
mod io;
mod markers;
mod synth;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use docred::{parse_docred, parse_docred_file, to_docred, EntityTypeMap, RelationMap, Vocab};
pub use io::{read_corpus, write_corpus, CORPUS_FORMAT, CORPUS_VERSION};
pub use markers::{insert_markers, MarkedDocument};
pub use synth::{synth_corpus, SynthConfig};

pub type TokenId = u32;

/// Reserved token inserted before every mention span.
pub const MENTION_START: TokenId = 0;
/// Reserved token inserted after every mention span.
pub const MENTION_END: TokenId = 1;
/// Smallest id an ordinary (non-marker) token may take.
pub const FIRST_ORDINARY_TOKEN: TokenId = 2;

/// Half-open token interval `[start, end)` within one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub sent_index: usize,
    pub span: Span,
    pub entity_id: usize,
    /// Surface form; used as the entity's identity when excluding training facts.
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub entity_id: usize,
    pub entity_type: u32,
    pub mentions: Vec<Mention>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationFact {
    pub head: usize,
    pub tail: usize,
    pub relation: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<Vec<TokenId>>,
    pub entities: Vec<Entity>,
    pub gold_facts: BTreeSet<RelationFact>,
}

impl Document {
    /// Check the structural invariants. `num_relations` bounds relation ids when given.
    pub fn validate(&self, num_relations: Option<usize>) -> Result<()> {
        let invalid = |message: String| Error::InvalidDocument {
            doc: self.doc_id.clone(),
            message,
        };
        for (ei, entity) in self.entities.iter().enumerate() {
            if entity.entity_id != ei {
                return Err(invalid(format!(
                    "entity at position {ei} carries id {}",
                    entity.entity_id
                )));
            }
            if entity.mentions.is_empty() {
                return Err(invalid(format!("entity {ei} has no mentions")));
            }
            for (mi, m) in entity.mentions.iter().enumerate() {
                let bad = |detail: String| Error::MalformedMention {
                    doc: self.doc_id.clone(),
                    entity: ei,
                    mention: mi,
                    detail,
                };
                if m.entity_id != ei {
                    return Err(bad(format!("mention carries entity id {}", m.entity_id)));
                }
                let Some(sent) = self.sentences.get(m.sent_index) else {
                    return Err(bad(format!(
                        "sentence index {} out of range ({} sentences)",
                        m.sent_index,
                        self.sentences.len()
                    )));
                };
                if m.span.is_empty() {
                    return Err(bad(format!("empty span [{}, {})", m.span.start, m.span.end)));
                }
                if m.span.end > sent.len() {
                    return Err(bad(format!(
                        "span [{}, {}) exceeds sentence {} length {}",
                        m.span.start,
                        m.span.end,
                        m.sent_index,
                        sent.len()
                    )));
                }
            }
        }
        for f in &self.gold_facts {
            if f.head == f.tail {
                return Err(invalid(format!("fact with head == tail == {}", f.head)));
            }
            if f.head >= self.entities.len() || f.tail >= self.entities.len() {
                return Err(invalid(format!(
                    "fact ({}, {}) references a missing entity",
                    f.head, f.tail
                )));
            }
            if let Some(r) = num_relations {
                if f.relation as usize >= r {
                    return Err(invalid(format!(
                        "relation id {} outside vocabulary of {r}",
                        f.relation
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// `m (m - 1)` for `m` entities.
    pub fn num_pairs(&self) -> usize {
        let m = self.entities.len();
        m * m.saturating_sub(1)
    }

    /// Ordered candidate pairs in row-major `(head, tail)` order, skipping `head == tail`.
    pub fn ordered_pairs(&self) -> impl Iterator<Item = (usize, usize)> {
        ordered_pairs(self.entities.len())
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn flat_tokens(&self) -> Vec<TokenId> {
        self.sentences.iter().flatten().copied().collect()
    }

    /// Gold relations holding between `head` and `tail`.
    pub fn relations_of(&self, head: usize, tail: usize) -> Vec<u32> {
        self.gold_facts
            .iter()
            .filter(|f| f.head == head && f.tail == tail)
            .map(|f| f.relation)
            .collect()
    }

    /// Distinct surface names of an entity.
    pub fn entity_names(&self, entity: usize) -> BTreeSet<String> {
        self.entities[entity]
            .mentions
            .iter()
            .map(|m| m.name.clone())
            .collect()
    }

    /// True when some mention of `a` and some mention of `b` share a sentence.
    pub fn co_sentential(&self, a: usize, b: usize) -> bool {
        let sa: BTreeSet<usize> = self.entities[a].mentions.iter().map(|m| m.sent_index).collect();
        self.entities[b]
            .mentions
            .iter()
            .any(|m| sa.contains(&m.sent_index))
    }
}

pub fn ordered_pairs(m: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..m).flat_map(move |h| (0..m).filter(move |&t| t != h).map(move |t| (h, t)))
}
