use super::{Document, TokenId, MENTION_END, MENTION_START};

/// Flattened token sequence with a start/end marker pair around every mention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedDocument<'a> {
    pub tokens: Vec<TokenId>,
    /// `mention_starts[e][k]` is the position of the start marker of mention `k` of entity `e`.
    pub mention_starts: Vec<Vec<usize>>,
    /// True at positions holding an inserted marker.
    pub marker_mask: Vec<bool>,
    pub doc: &'a Document,
}

impl MarkedDocument<'_> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Original flat token sequence with markers removed.
    pub fn strip_markers(&self) -> Vec<TokenId> {
        self.tokens
            .iter()
            .zip(&self.marker_mask)
            .filter(|(_, &m)| !m)
            .map(|(t, _)| *t)
            .collect()
    }
}

/// Insert a start marker before and an end marker after every mention.
///
/// Nested or overlapping spans are ordered by `(start ascending, end descending)`,
/// ties broken by entity then mention index; end markers close in reverse of
/// that order so markers nest.
pub fn insert_markers(doc: &Document) -> MarkedDocument<'_> {
    let mut mention_starts: Vec<Vec<usize>> = doc
        .entities
        .iter()
        .map(|e| vec![0; e.mentions.len()])
        .collect();
    let mut tokens = Vec::with_capacity(doc.num_tokens() + 2 * total_mentions(doc));
    let mut marker_mask = Vec::with_capacity(tokens.capacity());

    for (si, sent) in doc.sentences.iter().enumerate() {
        // (start, end, entity, mention) for mentions in this sentence, opening order
        let mut spans: Vec<(usize, usize, usize, usize)> = doc
            .entities
            .iter()
            .enumerate()
            .flat_map(|(ei, e)| {
                e.mentions
                    .iter()
                    .enumerate()
                    .filter(move |(_, m)| m.sent_index == si)
                    .map(move |(mi, m)| (m.span.start, m.span.end, ei, mi))
            })
            .collect();
        spans.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)).then((a.2, a.3).cmp(&(b.2, b.3))));

        for pos in 0..=sent.len() {
            // close spans ending here, innermost (latest opened) first
            for _ in spans.iter().rev().filter(|s| s.1 == pos) {
                tokens.push(MENTION_END);
                marker_mask.push(true);
            }
            for s in spans.iter().filter(|s| s.0 == pos) {
                mention_starts[s.2][s.3] = tokens.len();
                tokens.push(MENTION_START);
                marker_mask.push(true);
            }
            if let Some(&t) = sent.get(pos) {
                tokens.push(t);
                marker_mask.push(false);
            }
        }
    }

    MarkedDocument {
        tokens,
        mention_starts,
        marker_mask,
        doc,
    }
}

fn total_mentions(doc: &Document) -> usize {
    doc.entities.iter().map(|e| e.mentions.len()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::mention;
    use crate::corpus::{Entity, FIRST_ORDINARY_TOKEN};
    use proptest::prelude::*;

    fn doc_with(sentences: Vec<Vec<TokenId>>, spans: &[(usize, usize, usize)]) -> Document {
        let entities = spans
            .iter()
            .enumerate()
            .map(|(i, &(s, a, b))| Entity {
                entity_id: i,
                entity_type: 0,
                mentions: vec![mention(s, a, b, i)],
            })
            .collect();
        Document {
            doc_id: "d".into(),
            sentences,
            entities,
            gold_facts: Default::default(),
        }
    }

    #[test]
    fn single_mention() {
        let d = doc_with(vec![vec![10, 11, 12, 13]], &[(0, 1, 3)]);
        let m = insert_markers(&d);
        assert_eq!(m.tokens, vec![10, MENTION_START, 11, 12, MENTION_END, 13]);
        assert_eq!(m.mention_starts, vec![vec![1]]);
    }

    #[test]
    fn adjacent_mentions() {
        let d = doc_with(vec![vec![10, 11]], &[(0, 0, 1), (0, 1, 2)]);
        let m = insert_markers(&d);
        assert_eq!(m.tokens.len(), 6);
        // brute-force re-scan for start markers
        let starts: Vec<usize> = m
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == MENTION_START)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(starts, vec![0, 3]);
        assert_eq!(m.mention_starts, vec![vec![0], vec![3]]);
        assert_eq!(
            m.tokens,
            vec![MENTION_START, 10, MENTION_END, MENTION_START, 11, MENTION_END]
        );
    }

    #[test]
    fn nested_mentions_open_outer_first() {
        // outer [0,3), inner [1,2)
        let d = doc_with(vec![vec![10, 11, 12]], &[(0, 1, 2), (0, 0, 3)]);
        let m = insert_markers(&d);
        assert_eq!(
            m.tokens,
            vec![MENTION_START, 10, MENTION_START, 11, MENTION_END, 12, MENTION_END]
        );
        assert_eq!(m.mention_starts, vec![vec![2], vec![0]]);
    }

    #[test]
    fn identical_spans_follow_entity_order() {
        let d = doc_with(vec![vec![10, 11]], &[(0, 0, 1), (0, 0, 1)]);
        let m = insert_markers(&d);
        assert_eq!(m.mention_starts, vec![vec![0], vec![1]]);
        assert_eq!(m.tokens.len(), 6);
    }

    #[test]
    fn multi_sentence_offsets() {
        let d = doc_with(vec![vec![10, 11], vec![12, 13, 14]], &[(0, 1, 2), (1, 0, 2)]);
        let m = insert_markers(&d);
        assert_eq!(m.tokens[m.mention_starts[0][0] + 1], 11);
        assert_eq!(m.tokens[m.mention_starts[1][0] + 1], 12);
    }

    fn arb_doc() -> impl Strategy<Value = Document> {
        prop::collection::vec(1usize..8, 1..4).prop_flat_map(|lens| {
            let sentences: Vec<Vec<TokenId>> = lens
                .iter()
                .enumerate()
                .map(|(s, &l)| (0..l).map(|i| FIRST_ORDINARY_TOKEN + (s * 10 + i) as TokenId).collect())
                .collect();
            let n_sent = lens.len();
            let spans = prop::collection::vec(
                (0..n_sent, 0usize..8, 1usize..4),
                1..6,
            );
            (Just(sentences), spans, Just(lens))
        })
        .prop_map(|(sentences, spans, lens)| {
            let spans: Vec<(usize, usize, usize)> = spans
                .into_iter()
                .map(|(s, a, w)| {
                    let a = a % lens[s];
                    let b = (a + w).min(lens[s]);
                    (s, a, b)
                })
                .collect();
            doc_with(sentences, &spans)
        })
    }

    proptest! {
        #[test]
        fn markers_are_reversible(doc in arb_doc()) {
            let m = insert_markers(&doc);
            prop_assert_eq!(m.strip_markers(), doc.flat_tokens());
            prop_assert_eq!(m.tokens.len(), doc.num_tokens() + 2 * total_mentions(&doc));
            for (ei, e) in doc.entities.iter().enumerate() {
                for (mi, men) in e.mentions.iter().enumerate() {
                    let p = m.mention_starts[ei][mi];
                    prop_assert_eq!(m.tokens[p], MENTION_START);
                    // first ordinary token after the start marker is the span's first token
                    let first = m.tokens[p..].iter().zip(&m.marker_mask[p..])
                        .find(|(_, &mk)| !mk).map(|(t, _)| *t);
                    prop_assert_eq!(first, Some(doc.sentences[men.sent_index][men.span.start]));
                }
            }
        }
    }
}
