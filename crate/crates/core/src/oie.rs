//! Turns raw subject-relation-object extractions into silver relation labels.
//!
//! Stages run in a fixed order, because they do not commute:
//!
//! 1. drop triples with an implicit part (text not present in the sentence)
//! 2. drop triples with a non-consecutive subject, relation or object
//! 3. drop incomplete triples
//! 4. drop relations longer than [`MAX_RELATION_TOKENS`]
//! 5. drop triples not in subject < relation < object order
//! 6. merge relations: disjoint relations all survive; among relations that
//!    share tokens the longest wins (earliest start breaks ties), applied
//!    greedily by descending length
//! 7. keep only the relation spans, without duplicates
//!
//! A sentence that loses every relation is still emitted, with all-`O` tags.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpusio::CorpusRecord;
use crate::tagging::{encode_tags, Label, Scheme, Span, Tag};

pub const MAX_RELATION_TOKENS: usize = 5;
pub const RELATION_LABEL: &str = "Relation";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OieError {
    #[error("triple {triple}: token index {index} out of bounds for a sentence of {length} tokens")]
    IndexOutOfBounds { triple: usize, index: usize, length: usize },
}

/// One argument or relation of a triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Part {
    /// Token indices into the sentence.
    Tokens(Vec<usize>),
    /// Text the extractor introduced that does not occur in the sentence.
    Implicit { implicit: String },
}

impl Part {
    fn tokens(&self) -> Option<&[usize]> {
        match self {
            Part::Tokens(t) => Some(t),
            Part::Implicit { .. } => None,
        }
    }

    /// Half-open range if the indices are strictly consecutive.
    fn range(&self) -> Option<(usize, usize)> {
        let t = self.tokens()?;
        let first = *t.first()?;
        t.iter()
            .enumerate()
            .all(|(k, &i)| i == first + k)
            .then_some((first, first + t.len()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Triple {
    #[serde(default)]
    pub subject: Option<Part>,
    #[serde(default)]
    pub relation: Option<Part>,
    #[serde(default)]
    pub object: Option<Part>,
}

impl Triple {
    pub fn from_tokens(subject: Vec<usize>, relation: Vec<usize>, object: Vec<usize>) -> Self {
        Triple {
            subject: Some(Part::Tokens(subject)),
            relation: Some(Part::Tokens(relation)),
            object: Some(Part::Tokens(object)),
        }
    }

    fn parts(&self) -> impl Iterator<Item = Option<&Part>> {
        [self.subject.as_ref(), self.relation.as_ref(), self.object.as_ref()].into_iter()
    }
}

/// A sentence with OIE input triples, as read from triple JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OieRecord {
    pub tokens: Vec<String>,
    #[serde(default)]
    pub triples: Vec<Triple>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationLabeling {
    pub tokens: Vec<String>,
    /// Sorted, pairwise disjoint, each labelled [`RELATION_LABEL`].
    pub spans: Vec<Span>,
}

impl RelationLabeling {
    pub fn tags(&self) -> Vec<Tag> {
        encode_tags(&self.spans, self.tokens.len(), Scheme::Iob2)
            .expect("relation spans are disjoint and in bounds")
    }

    pub fn has_relations(&self) -> bool {
        !self.spans.is_empty()
    }

    pub fn to_record(&self) -> CorpusRecord {
        CorpusRecord::new(self.tokens.clone(), self.tags())
    }
}

/// How many triples each stage removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FilterStats {
    pub implicit: usize,
    pub non_consecutive: usize,
    pub incomplete: usize,
    pub long_relation: usize,
    pub out_of_order: usize,
    /// Relations lost to overlap with a longer relation, or duplicates.
    pub merged: usize,
}

pub fn filter_and_merge(tokens: &[String], triples: &[Triple]) -> Result<RelationLabeling, OieError> {
    filter_and_merge_with_stats(tokens, triples).map(|(labeling, _)| labeling)
}

pub fn filter_and_merge_with_stats(
    tokens: &[String],
    triples: &[Triple],
) -> Result<(RelationLabeling, FilterStats), OieError> {
    let length = tokens.len();
    for (triple, t) in triples.iter().enumerate() {
        for part in t.parts().flatten() {
            if let Some(&index) = part.tokens().and_then(|ix| ix.iter().find(|&&i| i >= length)) {
                return Err(OieError::IndexOutOfBounds { triple, index, length });
            }
        }
    }

    let mut stats = FilterStats::default();
    let mut relations: Vec<(usize, usize)> = Vec::new();
    for t in triples {
        if t.parts().flatten().any(|p| matches!(p, Part::Implicit { .. })) {
            stats.implicit += 1;
            continue;
        }
        let present_tokens = |p: &&Part| p.tokens().is_some_and(|ix| !ix.is_empty());
        if t.parts().flatten().filter(present_tokens).any(|p| p.range().is_none()) {
            stats.non_consecutive += 1;
            continue;
        }
        let (Some(subject), Some(relation), Some(object)) = (
            t.subject.as_ref().and_then(Part::range),
            t.relation.as_ref().and_then(Part::range),
            t.object.as_ref().and_then(Part::range),
        ) else {
            stats.incomplete += 1;
            continue;
        };
        if relation.1 - relation.0 > MAX_RELATION_TOKENS {
            stats.long_relation += 1;
            continue;
        }
        if !(subject.1 <= relation.0 && relation.1 <= object.0) {
            stats.out_of_order += 1;
            continue;
        }
        relations.push(relation);
    }

    let candidates = relations.len();
    let kept = merge_relations(relations);
    stats.merged = candidates - kept.len();

    let label = Label::new(RELATION_LABEL).expect("valid label");
    let spans = kept
        .into_iter()
        .map(|(start, end)| Span::with_label(label.clone(), start, end))
        .collect();
    Ok((RelationLabeling { tokens: tokens.to_vec(), spans }, stats))
}

/// Greedy selection by descending length, then earliest start. Returns the
/// kept ranges sorted by start.
fn merge_relations(mut relations: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    relations.sort_by_key(|&(start, end)| (std::cmp::Reverse(end - start), start));
    relations.dedup();
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for r in relations {
        if kept.iter().all(|k| r.1 <= k.0 || k.1 <= r.0) {
            kept.push(r);
        }
    }
    kept.sort();
    kept
}

/// `(sentences_total, sentences_with_relations)`.
pub fn relation_stats<'a>(labelings: impl IntoIterator<Item = &'a RelationLabeling>) -> (usize, usize) {
    labelings
        .into_iter()
        .fold((0, 0), |(total, with), l| (total + 1, with + usize::from(l.has_relations())))
}
