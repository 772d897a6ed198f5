//! Parsing of generated responses and greedy mapping back to IOB2 tags.
//!
//! Only the first line of a generation is considered. A response is either
//! `NA` or `span:class` pairs separated by `;`, with every class drawn from
//! the task's options. Anything else parses to an empty, invalid response,
//! which maps to all-`O` tags.

use serde::{Deserialize, Serialize};

use crate::prompts::NA_RESPONSE;
use crate::tagging::{encode_tags, Label, Scheme, Span, Tag};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extraction {
    pub span: String,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub extractions: Vec<Extraction>,
    pub is_na: bool,
    pub valid: bool,
}

impl ParsedResponse {
    fn invalid() -> Self {
        ParsedResponse::default()
    }
}

/// Parses a raw model answer. Never fails: text outside the grammar yields
/// `valid == false` and no extractions.
pub fn parse_response<S: AsRef<str>>(raw: &str, options: &[S]) -> ParsedResponse {
    let line = raw.split('\n').next().unwrap_or("");
    let line = line.strip_suffix('\r').unwrap_or(line);
    if line == NA_RESPONSE {
        return ParsedResponse { extractions: Vec::new(), is_na: true, valid: true };
    }
    let mut extractions = Vec::new();
    for part in line.split(';') {
        let Some((span, class)) = part.split_once(':') else {
            return ParsedResponse::invalid();
        };
        if span.is_empty() || class.contains(':') || !options.iter().any(|o| o.as_ref() == class) {
            return ParsedResponse::invalid();
        }
        extractions.push(Extraction { span: span.to_string(), class: class.to_string() });
    }
    ParsedResponse { extractions, is_na: false, valid: true }
}

/// Tags `tokens` with the parsed extractions. Each extraction, in response
/// order, claims the earliest unclaimed run of tokens whose space-joined text
/// equals the whitespace-normalized span text. Extractions without a match
/// are dropped.
pub fn map_to_tags<S: AsRef<str>>(parsed: &ParsedResponse, tokens: &[S]) -> Vec<Tag> {
    let n = tokens.len();
    let mut claimed = vec![false; n];
    let mut spans = Vec::new();
    for ex in &parsed.extractions {
        let Ok(label) = Label::new(&ex.class) else { continue };
        let words: Vec<&str> = ex.span.split_whitespace().collect();
        let k = words.len();
        if k == 0 || k > n {
            continue;
        }
        let found = (0..=n - k).find(|&start| {
            (start..start + k).all(|i| !claimed[i] && tokens[i].as_ref() == words[i - start])
        });
        if let Some(start) = found {
            claimed[start..start + k].iter_mut().for_each(|c| *c = true);
            spans.push(Span::with_label(label, start, start + k));
        }
    }
    spans.sort();
    encode_tags(&spans, n, Scheme::Iob2).expect("claimed spans are disjoint and in bounds")
}

/// `parse_response` followed by `map_to_tags`.
pub fn parse_and_map<S: AsRef<str>, T: AsRef<str>>(raw: &str, tokens: &[T], options: &[S]) -> Vec<Tag> {
    map_to_tags(&parse_response(raw, options), tokens)
}

/// One line of batch input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub tokens: Vec<String>,
    pub response: String,
    #[serde(default)]
    pub options: Option<Vec<String>>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}
