//! IOB2 / IOB1 span codecs.
//!
//! Spans are half-open token intervals `[start, end)`. A [`Tag`] is either
//! `O` or a `B-`/`I-` prefix carrying a validated [`Label`]. Decoding comes in
//! three flavours, selected with [`DecodeMode`]:
//!
//! - `Strict` rejects any tag sequence that is not well formed for the scheme.
//! - `Repair` promotes an orphan `I-X` (not preceded by `B-X`/`I-X`) to `B-X`.
//! - `Discard` drops orphan `I-` tags, so they never produce a span. This is
//!   how the strict mode of seqeval reads IOB2 and what the evaluator uses.
//!
//! ```
//! use seqlabel::tagging::{decode_tags, DecodeMode, Scheme, Span, Tag};
//!
//! let tags: Vec<Tag> = ["B-location", "I-location", "O", "O", "B-location"]
//!     .iter()
//!     .map(|t| t.parse().unwrap())
//!     .collect();
//! let spans = decode_tags(&tags, Scheme::Iob2, DecodeMode::Strict).unwrap();
//! assert_eq!(spans, vec![
//!     Span::new("location", 0, 2).unwrap(),
//!     Span::new("location", 4, 5).unwrap(),
//! ]);
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Characters reserved by the response grammar (`span:class;span:class`).
pub const RESERVED_CHARS: [char; 2] = [':', ';'];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaggingError {
    #[error("invalid class label {0:?}: labels must be non-empty and free of ':' and ';'")]
    InvalidLabel(String),
    #[error("cannot parse tag {0:?}")]
    InvalidTag(String),
    #[error("tag {tag} at index {index} violates the tagging scheme")]
    SchemeViolation { index: usize, tag: String },
    #[error("length mismatch: {tokens} tokens but {tags} tags")]
    LengthMismatch { tokens: usize, tags: usize },
    #[error("spans {first} and {second} overlap")]
    Overlap { first: Span, second: Span },
    #[error("span {span} is outside a sequence of length {length}")]
    OutOfBounds { span: Span, length: usize },
}

pub type Result<T, E = TaggingError> = std::result::Result<T, E>;

/// A class name. Never empty, never contains `:` or `;`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label(String);

impl Label {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.contains(RESERVED_CHARS) {
            return Err(TaggingError::InvalidLabel(name));
        }
        Ok(Label(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Label {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl FromStr for Label {
    type Err = TaggingError;

    fn from_str(s: &str) -> Result<Self> {
        Label::new(s)
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Label::new(s).map_err(serde::de::Error::custom)
    }
}

/// One token-level tag.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Tag {
    Outside,
    Begin(Label),
    Inside(Label),
}

impl Tag {
    pub fn begin(label: &str) -> Result<Self> {
        Ok(Tag::Begin(Label::new(label)?))
    }

    pub fn inside(label: &str) -> Result<Self> {
        Ok(Tag::Inside(Label::new(label)?))
    }

    pub fn label(&self) -> Option<&Label> {
        match self {
            Tag::Outside => None,
            Tag::Begin(l) | Tag::Inside(l) => Some(l),
        }
    }

    pub fn is_outside(&self) -> bool {
        matches!(self, Tag::Outside)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Outside => f.write_str("O"),
            Tag::Begin(l) => write!(f, "B-{l}"),
            Tag::Inside(l) => write!(f, "I-{l}"),
        }
    }
}

impl FromStr for Tag {
    type Err = TaggingError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "O" {
            return Ok(Tag::Outside);
        }
        let bad = || TaggingError::InvalidTag(s.to_string());
        let (prefix, label) = s.split_at_checked(2).ok_or_else(bad)?;
        let label = Label::new(label).map_err(|_| bad())?;
        match prefix {
            "B-" => Ok(Tag::Begin(label)),
            "I-" => Ok(Tag::Inside(label)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for Tag {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Tag {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A labelled half-open token interval `[start, end)`.
///
/// Field order makes the derived ordering sort by position first.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: Label,
}

impl Span {
    pub fn new(label: &str, start: usize, end: usize) -> Result<Self> {
        Ok(Span::with_label(Label::new(label)?, start, end))
    }

    /// Panics when `start >= end`.
    pub fn with_label(label: Label, start: usize, end: usize) -> Self {
        assert!(start < end, "empty span [{start}, {end})");
        Span { start, end, label }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}, {})", self.label, self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Iob2,
    Iob1,
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "iob2" => Ok(Scheme::Iob2),
            "iob1" => Ok(Scheme::Iob1),
            other => Err(format!("unknown tagging scheme {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    Strict,
    #[default]
    Repair,
    Discard,
}

/// Tokens with one tag per token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSequence {
    tokens: Vec<String>,
    tags: Vec<Tag>,
}

impl LabeledSequence {
    pub fn new(tokens: Vec<String>, tags: Vec<Tag>) -> Result<Self> {
        if tokens.len() != tags.len() {
            return Err(TaggingError::LengthMismatch {
                tokens: tokens.len(),
                tags: tags.len(),
            });
        }
        Ok(LabeledSequence { tokens, tags })
    }

    /// Builds a sequence from string tags, e.g. `["B-PER", "O"]`.
    pub fn from_strs<T: AsRef<str>, G: AsRef<str>>(tokens: &[T], tags: &[G]) -> Result<Self> {
        let tags = tags
            .iter()
            .map(|t| t.as_ref().parse())
            .collect::<Result<Vec<Tag>>>()?;
        LabeledSequence::new(tokens.iter().map(|t| t.as_ref().to_string()).collect(), tags)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn into_parts(self) -> (Vec<String>, Vec<Tag>) {
        (self.tokens, self.tags)
    }

    /// Checks the tags are well formed under `scheme`.
    pub fn validate(&self, scheme: Scheme) -> Result<()> {
        decode_tags(&self.tags, scheme, DecodeMode::Strict).map(|_| ())
    }
}

pub fn decode_spans(seq: &LabeledSequence, scheme: Scheme, mode: DecodeMode) -> Result<Vec<Span>> {
    decode_tags(seq.tags(), scheme, mode)
}

/// Decodes maximal spans from a tag list. Output is sorted and disjoint.
pub fn decode_tags(tags: &[Tag], scheme: Scheme, mode: DecodeMode) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    // (label, start) of the span currently open
    let mut open: Option<(&Label, usize)> = None;
    let mut close = |open: &mut Option<(&Label, usize)>, end: usize| {
        if let Some((label, start)) = open.take() {
            spans.push(Span::with_label(label.clone(), start, end));
        }
    };

    for (i, tag) in tags.iter().enumerate() {
        match tag {
            Tag::Outside => close(&mut open, i),
            Tag::Begin(label) => {
                if scheme == Scheme::Iob1
                    && mode == DecodeMode::Strict
                    && !matches!(open, Some((l, _)) if l == label)
                {
                    // IOB1 only uses B- to split adjacent spans of one class
                    return Err(TaggingError::SchemeViolation { index: i, tag: tag.to_string() });
                }
                close(&mut open, i);
                open = Some((label, i));
            }
            Tag::Inside(label) => {
                if matches!(open, Some((l, _)) if l == label) {
                    continue;
                }
                close(&mut open, i);
                match (scheme, mode) {
                    (Scheme::Iob1, _) | (Scheme::Iob2, DecodeMode::Repair) => open = Some((label, i)),
                    (Scheme::Iob2, DecodeMode::Discard) => {}
                    (Scheme::Iob2, DecodeMode::Strict) => {
                        return Err(TaggingError::SchemeViolation { index: i, tag: tag.to_string() })
                    }
                }
            }
        }
    }
    close(&mut open, tags.len());
    Ok(spans)
}

/// Encodes spans into tags for a sequence of `length` tokens.
pub fn encode_tags(spans: &[Span], length: usize, scheme: Scheme) -> Result<Vec<Tag>> {
    let mut sorted: Vec<&Span> = spans.iter().collect();
    sorted.sort();
    for span in &sorted {
        if span.start >= span.end || span.end > length {
            return Err(TaggingError::OutOfBounds { span: (*span).clone(), length });
        }
    }
    for pair in sorted.windows(2) {
        if pair[0].overlaps(pair[1]) {
            return Err(TaggingError::Overlap {
                first: pair[0].clone(),
                second: pair[1].clone(),
            });
        }
    }

    let mut tags = vec![Tag::Outside; length];
    let mut previous: Option<&Span> = None;
    for span in sorted {
        let begins_with_b = match scheme {
            Scheme::Iob2 => true,
            Scheme::Iob1 => {
                matches!(previous, Some(p) if p.end == span.start && p.label == span.label)
            }
        };
        tags[span.start] = if begins_with_b {
            Tag::Begin(span.label.clone())
        } else {
            Tag::Inside(span.label.clone())
        };
        for tag in &mut tags[span.start + 1..span.end] {
            *tag = Tag::Inside(span.label.clone());
        }
        previous = Some(span);
    }
    Ok(tags)
}
