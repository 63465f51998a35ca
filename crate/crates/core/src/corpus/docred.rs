//! DocRED-format records (`title`, `sents`, `vertexSet`, `labels`).

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{Document, Entity, Mention, RelationFact, Span, TokenId, FIRST_ORDINARY_TOKEN};
use crate::error::{Error, Result};

/// Word ↔ token-id table. Ids start after the reserved marker ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut v = Self::new();
        for w in words {
            v.intern(&w);
        }
        v
    }

    pub fn intern(&mut self, word: &str) -> TokenId {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = FIRST_ORDINARY_TOKEN + self.words.len() as TokenId;
        self.words.push(word.to_owned());
        self.index.insert(word.to_owned(), id);
        id
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        id.checked_sub(FIRST_ORDINARY_TOKEN)
            .and_then(|i| self.words.get(i as usize))
            .map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Relation name ↔ id in `[0, R)`. The no-relation label is never part of the map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationMap {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl RelationMap {
    pub fn from_names(names: impl IntoIterator<Item = String>) -> Self {
        let mut out = Self {
            names: Vec::new(),
            index: HashMap::new(),
        };
        for n in names {
            if !out.index.contains_key(&n) {
                out.index.insert(n.clone(), out.names.len() as u32);
                out.names.push(n);
            }
        }
        out
    }

    /// Parse a `{"P17": 1, ...}` object; entries named `Na` are dropped and the
    /// remaining ids are re-packed in ascending order of their original ids.
    pub fn from_rel2id(json: &str) -> Result<Self> {
        let raw: HashMap<String, i64> = serde_json::from_str(json)?;
        let mut pairs: Vec<(i64, String)> = raw
            .into_iter()
            .filter(|(n, _)| n != "Na")
            .map(|(n, i)| (i, n))
            .collect();
        pairs.sort();
        Ok(Self::from_names(pairs.into_iter().map(|(_, n)| n)))
    }

    /// Generic names `R0..R{n-1}`.
    pub fn numbered(n: usize) -> Self {
        Self::from_names((0..n).map(|i| format!("R{i}")))
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Entity type name ↔ id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityTypeMap {
    names: Vec<String>,
}

impl EntityTypeMap {
    pub fn new(names: impl IntoIterator<Item = String>) -> Self {
        Self {
            names: names.into_iter().collect(),
        }
    }

    /// The six DocRED entity types.
    pub fn docred() -> Self {
        Self::new(["PER", "ORG", "LOC", "TIME", "NUM", "MISC"].map(String::from))
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.names.iter().position(|n| n == name).map(|i| i as u32)
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDoc {
    title: String,
    sents: Vec<Vec<String>>,
    #[serde(rename = "vertexSet")]
    vertex_set: Vec<Vec<RawMention>>,
    #[serde(default)]
    labels: Vec<RawLabel>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawMention {
    name: String,
    sent_id: usize,
    pos: [usize; 2],
    #[serde(rename = "type")]
    kind: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawLabel {
    h: usize,
    t: usize,
    r: String,
    #[serde(default)]
    evidence: Vec<usize>,
}

/// Parse one DocRED record.
pub fn parse_docred(
    record: &serde_json::Value,
    vocab: &mut Vocab,
    relations: &RelationMap,
    types: &EntityTypeMap,
) -> Result<Document> {
    let raw: RawDoc = serde_json::from_value(record.clone()).map_err(|e| Error::Parse {
        doc: record
            .get("title")
            .and_then(|t| t.as_str())
            .unwrap_or("<untitled>")
            .to_owned(),
        message: e.to_string(),
    })?;
    from_raw(raw, vocab, relations, types)
}

/// Parse a DocRED file: a top-level JSON array of records.
pub fn parse_docred_file(
    text: &str,
    vocab: &mut Vocab,
    relations: &RelationMap,
    types: &EntityTypeMap,
) -> Result<Vec<Document>> {
    let records: Vec<serde_json::Value> = serde_json::from_str(text)?;
    records
        .iter()
        .map(|r| parse_docred(r, vocab, relations, types))
        .collect()
}

fn from_raw(
    raw: RawDoc,
    vocab: &mut Vocab,
    relations: &RelationMap,
    types: &EntityTypeMap,
) -> Result<Document> {
    let sentences: Vec<Vec<TokenId>> = raw
        .sents
        .iter()
        .map(|s| s.iter().map(|w| vocab.intern(w)).collect())
        .collect();

    let mut entities = Vec::with_capacity(raw.vertex_set.len());
    for (ei, vertex) in raw.vertex_set.into_iter().enumerate() {
        let first = vertex.first().ok_or_else(|| Error::InvalidDocument {
            doc: raw.title.clone(),
            message: format!("entity {ei} has no mentions"),
        })?;
        let entity_type = types
            .id(&first.kind)
            .ok_or_else(|| Error::UnknownEntityType(first.kind.clone()))?;
        let mentions = vertex
            .into_iter()
            .map(|m| Mention {
                sent_index: m.sent_id,
                span: Span::new(m.pos[0], m.pos[1]),
                entity_id: ei,
                name: m.name,
            })
            .collect();
        entities.push(Entity {
            entity_id: ei,
            entity_type,
            mentions,
        });
    }

    let mut gold_facts = BTreeSet::new();
    for label in raw.labels {
        let relation = relations
            .id(&label.r)
            .ok_or_else(|| Error::UnknownRelation(label.r.clone()))?;
        gold_facts.insert(RelationFact {
            head: label.h,
            tail: label.t,
            relation,
        });
    }

    let doc = Document {
        doc_id: raw.title,
        sentences,
        entities,
        gold_facts,
    };
    doc.validate(Some(relations.len()))?;
    Ok(doc)
}

/// Render a document back to a DocRED record. Evidence lists are emitted empty.
pub fn to_docred(
    doc: &Document,
    vocab: &Vocab,
    relations: &RelationMap,
    types: &EntityTypeMap,
) -> Result<serde_json::Value> {
    let sents = doc
        .sentences
        .iter()
        .map(|s| {
            s.iter()
                .map(|&t| {
                    vocab
                        .word(t)
                        .map(str::to_owned)
                        .ok_or_else(|| Error::Encoding(format!("token id {t} not in vocabulary")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut vertex_set = Vec::new();
    for e in &doc.entities {
        let kind = types
            .name(e.entity_type)
            .ok_or_else(|| Error::UnknownEntityType(e.entity_type.to_string()))?
            .to_owned();
        vertex_set.push(
            e.mentions
                .iter()
                .map(|m| RawMention {
                    name: m.name.clone(),
                    sent_id: m.sent_index,
                    pos: [m.span.start, m.span.end],
                    kind: kind.clone(),
                })
                .collect::<Vec<_>>(),
        );
    }
    let labels = doc
        .gold_facts
        .iter()
        .map(|f| {
            Ok(RawLabel {
                h: f.head,
                t: f.tail,
                r: relations
                    .name(f.relation)
                    .ok_or_else(|| Error::UnknownRelation(f.relation.to_string()))?
                    .to_owned(),
                evidence: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(serde_json::to_value(RawDoc {
        title: doc.doc_id.clone(),
        sents,
        vertex_set,
        labels,
    })?)
}
