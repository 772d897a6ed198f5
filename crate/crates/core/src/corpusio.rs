//! Corpus records, readers and writers, subword label alignment, the
//! right-side dependency relations ratio and mixed source/target batching.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tagging::{decode_tags, DecodeMode, LabeledSequence, Scheme, Tag, TaggingError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("record {record}: {field} has {found} entries, expected {expected}")]
    LengthMismatch { record: usize, field: &'static str, expected: usize, found: usize },
    #[error("record {record}: invalid head {head} for token {token}")]
    InvalidHead { record: usize, token: usize, head: i64 },
    #[error("record {record}: verb index {verb_index} out of range")]
    InvalidVerbIndex { record: usize, verb_index: usize },
    #[error("record {record}: dependency heads are required")]
    MissingHeads { record: usize },
    #[error("word {word} has no subwords")]
    Alignment { word: usize },
    #[error("no labelled-span token has a non-root dependency head")]
    NoArcs,
    #[error("invalid batch configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tagging(#[from] TaggingError),
}

impl CorpusError {
    fn io(path: &Path, source: io::Error) -> Self {
        CorpusError::Io { path: path.to_path_buf(), source }
    }
}

/// One sentence of a corpus.
///
/// Fields not listed here are kept in `extra` and written back unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub tokens: Vec<String>,
    pub tags: Vec<Tag>,
    /// Dependency head per token, `-1` for the root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deprels: Option<Vec<String>>,
    /// Token index of the governing predicate for SRL records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verb_index: Option<usize>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl CorpusRecord {
    pub fn new(tokens: Vec<String>, tags: Vec<Tag>) -> Self {
        CorpusRecord {
            tokens,
            tags,
            heads: None,
            deprels: None,
            verb_index: None,
            extra: serde_json::Map::new(),
        }
    }

    pub fn from_sequence(seq: LabeledSequence) -> Self {
        let (tokens, tags) = seq.into_parts();
        CorpusRecord::new(tokens, tags)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks array lengths, head ranges and the verb index. `record` is only
    /// used for error messages.
    pub fn validate(&self, record: usize) -> Result<(), CorpusError> {
        let n = self.tokens.len();
        let check = |field: &'static str, found: usize| {
            if found == n {
                Ok(())
            } else {
                Err(CorpusError::LengthMismatch { record, field, expected: n, found })
            }
        };
        check("tags", self.tags.len())?;
        if let Some(heads) = &self.heads {
            check("heads", heads.len())?;
            for (token, &head) in heads.iter().enumerate() {
                let in_range = head == -1 || (head >= 0 && (head as usize) < n);
                if !in_range || head == token as i64 {
                    return Err(CorpusError::InvalidHead { record, token, head });
                }
            }
        }
        if let Some(deprels) = &self.deprels {
            check("deprels", deprels.len())?;
        }
        if let Some(verb_index) = self.verb_index {
            if verb_index >= n {
                return Err(CorpusError::InvalidVerbIndex { record, verb_index });
            }
        }
        Ok(())
    }

    pub fn to_sequence(&self) -> Result<LabeledSequence, TaggingError> {
        LabeledSequence::new(self.tokens.clone(), self.tags.clone())
    }
}

/// Parses one JSONL line (1-based `line` for diagnostics).
pub fn parse_record(text: &str, line: usize) -> Result<CorpusRecord, CorpusError> {
    let record: CorpusRecord = serde_json::from_str(text)
        .map_err(|e| CorpusError::Parse { line, reason: e.to_string() })?;
    record.validate(line)?;
    Ok(record)
}

/// Streams records from JSONL text, skipping blank lines.
pub struct JsonlRecords<R> {
    lines: io::Lines<R>,
    line: usize,
}

impl<R: BufRead> JsonlRecords<R> {
    pub fn new(reader: R) -> Self {
        JsonlRecords { lines: reader.lines(), line: 0 }
    }
}

impl<R: BufRead> Iterator for JsonlRecords<R> {
    type Item = Result<CorpusRecord, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(text) => text,
                Err(e) => {
                    return Some(Err(CorpusError::Parse { line: self.line + 1, reason: e.to_string() }))
                }
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            return Some(parse_record(&text, self.line));
        }
    }
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<CorpusRecord>, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    JsonlRecords::new(BufReader::new(file)).collect()
}

pub fn write_record<W: Write>(out: &mut W, record: &CorpusRecord) -> io::Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")
}

pub fn write_jsonl(records: &[CorpusRecord], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        write_record(&mut out, record).map_err(|e| CorpusError::io(path, e))?;
    }
    out.flush().map_err(|e| CorpusError::io(path, e))
}

/// Which whitespace-separated columns hold what in a CoNLL file.
///
/// The head column uses the CoNLL convention (1-based, `0` = root) and is
/// converted to 0-based indices with `-1` for the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnMap {
    pub token: usize,
    pub tag: usize,
    pub head: Option<usize>,
    pub deprel: Option<usize>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap { token: 0, tag: 1, head: None, deprel: None }
    }
}

impl ColumnMap {
    fn required_columns(&self) -> usize {
        [Some(self.token), Some(self.tag), self.head, self.deprel]
            .into_iter()
            .flatten()
            .max()
            .unwrap_or(0)
            + 1
    }
}

pub fn read_conll(path: impl AsRef<Path>, columns: ColumnMap) -> Result<Vec<CorpusRecord>, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    parse_conll(BufReader::new(file), columns)
}

pub fn parse_conll<R: BufRead>(reader: R, columns: ColumnMap) -> Result<Vec<CorpusRecord>, CorpusError> {
    struct Pending {
        tokens: Vec<String>,
        tags: Vec<Tag>,
        heads: Vec<i64>,
        deprels: Vec<String>,
        first_line: usize,
    }

    let needed = columns.required_columns();
    let mut records = Vec::new();
    let mut pending: Option<Pending> = None;

    let flush = |pending: &mut Option<Pending>, records: &mut Vec<CorpusRecord>| -> Result<(), CorpusError> {
        if let Some(p) = pending.take() {
            let mut record = CorpusRecord::new(p.tokens, p.tags);
            if columns.head.is_some() {
                record.heads = Some(p.heads);
            }
            if columns.deprel.is_some() {
                record.deprels = Some(p.deprels);
            }
            record.validate(p.first_line)?;
            records.push(record);
        }
        Ok(())
    };

    for (idx, text) in reader.lines().enumerate() {
        let line = idx + 1;
        let text = text.map_err(|e| CorpusError::Parse { line, reason: e.to_string() })?;
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.is_empty() {
            flush(&mut pending, &mut records)?;
            continue;
        }
        if fields[0] == "-DOCSTART-" {
            flush(&mut pending, &mut records)?;
            continue;
        }
        if fields.len() < needed {
            return Err(CorpusError::Parse {
                line,
                reason: format!("expected at least {needed} columns, found {}", fields.len()),
            });
        }
        let tag: Tag = fields[columns.tag]
            .parse()
            .map_err(|e: TaggingError| CorpusError::Parse { line, reason: e.to_string() })?;
        let p = pending.get_or_insert_with(|| Pending {
            tokens: Vec::new(),
            tags: Vec::new(),
            heads: Vec::new(),
            deprels: Vec::new(),
            first_line: line,
        });
        p.tokens.push(fields[columns.token].to_string());
        p.tags.push(tag);
        if let Some(col) = columns.head {
            let head: i64 = fields[col].parse().map_err(|_| CorpusError::Parse {
                line,
                reason: format!("head {:?} is not an integer", fields[col]),
            })?;
            p.heads.push(head - 1);
        }
        if let Some(col) = columns.deprel {
            p.deprels.push(fields[col].to_string());
        }
    }
    flush(&mut pending, &mut records)?;
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignMode {
    /// Every subword carries a label; a `B-X` word continues as `I-X`.
    #[default]
    Duplicate,
    /// Only the first subword of each word carries a label.
    HeadOnly,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordAlignment {
    pub subword_tokens: Vec<String>,
    pub word_of_subword: Vec<usize>,
    pub head_flag: Vec<bool>,
}

impl SubwordAlignment {
    /// Index of each word's head subword.
    pub fn head_positions(&self) -> Vec<usize> {
        self.head_flag
            .iter()
            .enumerate()
            .filter_map(|(i, &h)| h.then_some(i))
            .collect()
    }

    /// Subword positions of every word, the format `eval::evaluate_head_word` takes.
    pub fn word_subwords(&self) -> Vec<Vec<usize>> {
        let words = self.word_of_subword.last().map_or(0, |&w| w + 1);
        let mut out = vec![Vec::new(); words];
        for (i, &w) in self.word_of_subword.iter().enumerate() {
            out[w].push(i);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordLabels {
    pub alignment: SubwordAlignment,
    /// `None` marks a subword that carries no label (head-only mode).
    pub tags: Vec<Option<Tag>>,
    pub loss_mask: Vec<bool>,
}

/// Spreads word-level tags over a subword tokenization given as the pieces
/// of every word.
pub fn align_subwords<S: AsRef<str>>(
    record: &CorpusRecord,
    word_pieces: &[Vec<S>],
    mode: AlignMode,
) -> Result<SubwordLabels, CorpusError> {
    if word_pieces.len() != record.tags.len() {
        return Err(CorpusError::LengthMismatch {
            record: 0,
            field: "subword pieces",
            expected: record.tags.len(),
            found: word_pieces.len(),
        });
    }
    let total: usize = word_pieces.iter().map(Vec::len).sum();
    let mut alignment = SubwordAlignment {
        subword_tokens: Vec::with_capacity(total),
        word_of_subword: Vec::with_capacity(total),
        head_flag: Vec::with_capacity(total),
    };
    let mut tags = Vec::with_capacity(total);
    let mut loss_mask = Vec::with_capacity(total);

    for (word, (pieces, tag)) in word_pieces.iter().zip(&record.tags).enumerate() {
        if pieces.is_empty() {
            return Err(CorpusError::Alignment { word });
        }
        for (k, piece) in pieces.iter().enumerate() {
            let head = k == 0;
            alignment.subword_tokens.push(piece.as_ref().to_string());
            alignment.word_of_subword.push(word);
            alignment.head_flag.push(head);
            let (sub_tag, in_loss) = match (mode, head) {
                (_, true) => (Some(tag.clone()), true),
                (AlignMode::HeadOnly, false) => (None, false),
                (AlignMode::Duplicate, false) => {
                    let t = match tag {
                        Tag::Begin(l) => Tag::Inside(l.clone()),
                        other => other.clone(),
                    };
                    (Some(t), true)
                }
            };
            tags.push(sub_tag);
            loss_mask.push(in_loss);
        }
    }
    Ok(SubwordLabels { alignment, tags, loss_mask })
}

/// Right-side and left-side arc counts behind the RDRR metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Rdrr {
    pub right: u64,
    pub left: u64,
}

impl Rdrr {
    /// right / (left + right).
    pub fn value(&self) -> f64 {
        self.right as f64 / (self.right + self.left) as f64
    }

    pub fn total(&self) -> u64 {
        self.right + self.left
    }
}

/// Counts, for every token inside a labelled span, whether its dependency
/// head lies to its right or left. Root arcs are skipped; arcs to heads in
/// the same span count like any other.
pub fn rdrr_counts(records: &[CorpusRecord]) -> Result<Rdrr, CorpusError> {
    let mut counts = Rdrr::default();
    for (index, record) in records.iter().enumerate() {
        counts.add_record(record, index)?;
    }
    if counts.total() == 0 {
        return Err(CorpusError::NoArcs);
    }
    Ok(counts)
}

impl Rdrr {
    /// Adds one record's arcs; `index` is only used in error messages.
    pub fn add_record(&mut self, record: &CorpusRecord, index: usize) -> Result<(), CorpusError> {
        let spans = decode_tags(&record.tags, Scheme::Iob2, DecodeMode::Repair)?;
        if spans.is_empty() {
            return Ok(());
        }
        let heads = record.heads.as_ref().ok_or(CorpusError::MissingHeads { record: index })?;
        if heads.len() != record.tokens.len() {
            return Err(CorpusError::LengthMismatch {
                record: index,
                field: "heads",
                expected: record.tokens.len(),
                found: heads.len(),
            });
        }
        for span in &spans {
            for (token, &head) in heads.iter().enumerate().take(span.end).skip(span.start) {
                if head < 0 {
                    continue;
                }
                if head as usize > token {
                    self.right += 1;
                } else if (head as usize) < token {
                    self.left += 1;
                }
            }
        }
        Ok(())
    }
}

pub fn rdrr(records: &[CorpusRecord]) -> Result<f64, CorpusError> {
    rdrr_counts(records).map(|c| c.value())
}

/// Mixed mini-batch composition: `source_per_batch` source examples plus
/// `target_per_batch` few-shot target examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedBatchPlan {
    pub batch_size: usize,
    pub source_per_batch: usize,
    pub target_per_batch: usize,
    pub seed: u64,
}

impl Default for MixedBatchPlan {
    fn default() -> Self {
        MixedBatchPlan { batch_size: 32, source_per_batch: 27, target_per_batch: 5, seed: 1337 }
    }
}

impl MixedBatchPlan {
    pub fn new(source_per_batch: usize, target_per_batch: usize, seed: u64) -> Self {
        MixedBatchPlan {
            batch_size: source_per_batch + target_per_batch,
            source_per_batch,
            target_per_batch,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedBatch<T> {
    pub epoch: usize,
    pub source: Vec<T>,
    pub target: Vec<T>,
}

/// Lays out every batch for `epochs` passes over the source pool.
///
/// Source ids are reshuffled each epoch and used once per epoch; when the pool
/// size is not a multiple of `source_per_batch` the last batch of an epoch is
/// short. Each batch draws `target_per_batch` ids from the few-shot pool,
/// distinct within the batch when the pool is large enough and with
/// replacement otherwise.
pub fn plan_mixed_batches<T: Clone>(
    source_ids: &[T],
    target_ids: &[T],
    plan: &MixedBatchPlan,
    epochs: usize,
) -> Result<Vec<MixedBatch<T>>, CorpusError> {
    let n = plan.source_per_batch;
    let m = plan.target_per_batch;
    if plan.batch_size != n + m {
        return Err(CorpusError::Config(format!(
            "batch size {} != {n} source + {m} target",
            plan.batch_size
        )));
    }
    if n == 0 {
        return Err(CorpusError::Config("an epoch needs at least one source example per batch".into()));
    }
    if source_ids.is_empty() {
        return Err(CorpusError::Config("source pool is empty".into()));
    }
    if m > 0 && target_ids.is_empty() {
        return Err(CorpusError::Config("few-shot target pool is empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut order: Vec<usize> = (0..source_ids.len()).collect();
    let mut batches = Vec::with_capacity(epochs * source_ids.len().div_ceil(n));
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(n) {
            let target = if m == 0 {
                Vec::new()
            } else if target_ids.len() >= m {
                rand::seq::index::sample(&mut rng, target_ids.len(), m)
                    .into_iter()
                    .map(|i| target_ids[i].clone())
                    .collect()
            } else {
                (0..m).map(|_| target_ids[rng.gen_range(0..target_ids.len())].clone()).collect()
            };
            batches.push(MixedBatch {
                epoch,
                source: chunk.iter().map(|&i| source_ids[i].clone()).collect(),
                target,
            });
        }
    }
    Ok(batches)
}
