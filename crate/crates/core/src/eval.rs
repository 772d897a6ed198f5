//! Strict span-based evaluation.
//!
//! A predicted span is a true positive only when its boundaries equal those of
//! a reference span in the same sequence (span detection, `Sd`) and, for span
//! classification (`Sc`), the classes agree as well. Correct `O` tokens never
//! contribute to any score.
//!
//! Degenerate ratios are zero: precision is 0 without predictions, recall is 0
//! without references and F1 is 0 whenever precision + recall is 0.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tagging::{decode_tags, DecodeMode, LabeledSequence, Scheme, Span, Tag, TaggingError};

/// Class key used for every span in span-detection mode.
pub const SD_CLASS: &str = "SPAN";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("{refs} reference sequences but {preds} predicted sequences")]
    SequenceCount { refs: usize, preds: usize },
    #[error("sequence {index}: {refs} reference tags but {preds} predicted tags")]
    LengthMismatch { index: usize, refs: usize, preds: usize },
    #[error("sequence {index}: word {word} has no subwords")]
    Alignment { index: usize, word: usize },
    #[error("sequence {index}: head subword {subword} out of range for {available} predictions")]
    SubwordIndex { index: usize, subword: usize, available: usize },
    #[error("sequence {index}: {source}")]
    Tagging { index: usize, source: TaggingError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MatchMode {
    /// Boundaries only.
    #[serde(rename = "SD")]
    Sd,
    /// Boundaries and class.
    #[default]
    #[serde(rename = "SC")]
    Sc,
}

impl FromStr for MatchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sd" => Ok(MatchMode::Sd),
            "sc" => Ok(MatchMode::Sc),
            other => Err(format!("unknown evaluation mode {other:?}")),
        }
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchMode::Sd => "SD",
            MatchMode::Sc => "SC",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub true_positive: u64,
    pub predicted_total: u64,
    pub reference_total: u64,
}

impl MatchCounts {
    pub fn scores(&self) -> Scores {
        Scores::from_counts(self.true_positive, self.predicted_total, self.reference_total)
    }

    fn add(&mut self, other: MatchCounts) {
        self.true_positive += other.true_positive;
        self.predicted_total += other.predicted_total;
        self.reference_total += other.reference_total;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Scores {
    pub fn from_counts(tp: u64, predicted: u64, reference: u64) -> Scores {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, reference);
        Scores { precision, recall, f1: f1(precision, recall) }
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    #[serde(flatten)]
    pub scores: Scores,
    pub counts: MatchCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: MatchMode,
    pub per_class: BTreeMap<String, ClassReport>,
    pub micro: Scores,
    #[serde(rename = "macro")]
    pub macro_avg: Scores,
    pub counts: MatchCounts,
}

impl EvalReport {
    /// Fixed-width text table, one row per class then the two averages.
    pub fn to_table(&self) -> String {
        let width = self
            .per_class
            .keys()
            .map(|k| k.chars().count())
            .chain([9])
            .max()
            .unwrap_or(9);
        let mut out = String::new();
        let _ = writeln!(out, "mode: {}", self.mode);
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}  {:>7}  {:>7}",
            "class", "precision", "recall", "f1", "tp", "pred", "ref"
        );
        let row = |out: &mut String, name: &str, s: &Scores, c: &MatchCounts| {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}  {:>7}  {:>7}",
                name, s.precision, s.recall, s.f1, c.true_positive, c.predicted_total, c.reference_total
            );
        };
        for (name, class) in &self.per_class {
            row(&mut out, name, &class.scores, &class.counts);
        }
        row(&mut out, "micro avg", &self.micro, &self.counts);
        row(&mut out, "macro avg", &self.macro_avg, &self.counts);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    pub mode: MatchMode,
    pub scheme: Scheme,
    /// Applied to references and predictions alike.
    pub decode: DecodeMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { mode: MatchMode::Sc, scheme: Scheme::Iob2, decode: DecodeMode::Discard }
    }
}

impl EvalConfig {
    pub fn with_mode(mode: MatchMode) -> Self {
        EvalConfig { mode, ..Default::default() }
    }
}

/// Streaming accumulator of per-class match counts.
#[derive(Debug, Clone)]
pub struct SpanCounter {
    config: EvalConfig,
    classes: BTreeMap<String, MatchCounts>,
    seen: usize,
}

impl SpanCounter {
    pub fn new(config: EvalConfig) -> Self {
        SpanCounter { config, classes: BTreeMap::new(), seen: 0 }
    }

    /// Adds one (reference, prediction) tag pair.
    pub fn add(&mut self, refs: &[Tag], preds: &[Tag]) -> Result<(), EvalError> {
        let index = self.seen;
        self.seen += 1;
        if refs.len() != preds.len() {
            return Err(EvalError::LengthMismatch { index, refs: refs.len(), preds: preds.len() });
        }
        let decode = |tags: &[Tag]| {
            decode_tags(tags, self.config.scheme, self.config.decode)
                .map_err(|source| EvalError::Tagging { index, source })
        };
        let ref_spans = decode(refs)?;
        let pred_spans = decode(preds)?;
        self.add_spans(&ref_spans, &pred_spans);
        Ok(())
    }

    pub fn add_spans(&mut self, refs: &[Span], preds: &[Span]) {
        let key = |s: &Span| -> String {
            match self.config.mode {
                MatchMode::Sd => SD_CLASS.to_string(),
                MatchMode::Sc => s.label.as_str().to_string(),
            }
        };
        let matches = |a: &Span, b: &Span| {
            a.start == b.start
                && a.end == b.end
                && (self.config.mode == MatchMode::Sd || a.label == b.label)
        };
        let mut updates: Vec<(String, MatchCounts)> = Vec::new();
        for r in refs {
            updates.push((key(r), MatchCounts { reference_total: 1, ..Default::default() }));
        }
        for p in preds {
            // spans in one sequence are disjoint, so at most one reference can match
            let tp = u64::from(refs.iter().any(|r| matches(r, p)));
            updates.push((key(p), MatchCounts { true_positive: tp, predicted_total: 1, reference_total: 0 }));
        }
        for (k, c) in updates {
            self.classes.entry(k).or_default().add(c);
        }
    }

    pub fn finish(self) -> EvalReport {
        let mut counts = MatchCounts::default();
        let per_class: BTreeMap<String, ClassReport> = self
            .classes
            .into_iter()
            .map(|(name, c)| {
                counts.add(c);
                (name, ClassReport { scores: c.scores(), counts: c })
            })
            .collect();
        let macro_avg = if per_class.is_empty() {
            Scores::default()
        } else {
            let n = per_class.len() as f64;
            let sum = per_class.values().fold((0.0, 0.0, 0.0), |acc, c| {
                (acc.0 + c.scores.precision, acc.1 + c.scores.recall, acc.2 + c.scores.f1)
            });
            Scores { precision: sum.0 / n, recall: sum.1 / n, f1: sum.2 / n }
        };
        EvalReport { mode: self.config.mode, per_class, micro: counts.scores(), macro_avg, counts }
    }
}

pub fn evaluate(
    refs: &[LabeledSequence],
    preds: &[LabeledSequence],
    mode: MatchMode,
) -> Result<EvalReport, EvalError> {
    evaluate_with(refs, preds, EvalConfig::with_mode(mode))
}

pub fn evaluate_with(
    refs: &[LabeledSequence],
    preds: &[LabeledSequence],
    config: EvalConfig,
) -> Result<EvalReport, EvalError> {
    if refs.len() != preds.len() {
        return Err(EvalError::SequenceCount { refs: refs.len(), preds: preds.len() });
    }
    let mut counter = SpanCounter::new(config);
    for (r, p) in refs.iter().zip(preds) {
        counter.add(r.tags(), p.tags())?;
    }
    Ok(counter.finish())
}

/// Projects subword predictions onto words through each word's first subword.
///
/// `word_subwords[k][w]` lists the subword positions of word `w` in sequence `k`.
pub fn project_to_head_words(
    preds_on_subwords: &[Vec<Tag>],
    word_subwords: &[Vec<Vec<usize>>],
) -> Result<Vec<Vec<Tag>>, EvalError> {
    if preds_on_subwords.len() != word_subwords.len() {
        return Err(EvalError::SequenceCount {
            refs: word_subwords.len(),
            preds: preds_on_subwords.len(),
        });
    }
    preds_on_subwords
        .iter()
        .zip(word_subwords)
        .enumerate()
        .map(|(index, (preds, words))| {
            words
                .iter()
                .enumerate()
                .map(|(word, subwords)| {
                    let &head = subwords.first().ok_or(EvalError::Alignment { index, word })?;
                    preds.get(head).cloned().ok_or(EvalError::SubwordIndex {
                        index,
                        subword: head,
                        available: preds.len(),
                    })
                })
                .collect()
        })
        .collect()
}

/// Evaluates subword-level predictions at the head (first) subword of every word.
pub fn evaluate_head_word(
    refs: &[LabeledSequence],
    preds_on_subwords: &[Vec<Tag>],
    word_subwords: &[Vec<Vec<usize>>],
    mode: MatchMode,
) -> Result<EvalReport, EvalError> {
    let projected = project_to_head_words(preds_on_subwords, word_subwords)?;
    if refs.len() != projected.len() {
        return Err(EvalError::SequenceCount { refs: refs.len(), preds: projected.len() });
    }
    let mut counter = SpanCounter::new(EvalConfig::with_mode(mode));
    for (r, p) in refs.iter().zip(&projected) {
        counter.add(r.tags(), p)?;
    }
    Ok(counter.finish())
}
