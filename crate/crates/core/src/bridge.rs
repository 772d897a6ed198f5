//! JSON-value entry points for host-language bindings.
//!
//! Every function takes and returns [`serde_json::Value`]s built from plain
//! lists, maps, strings and 64-bit numbers, and delegates to the owning
//! module. Errors carry a stable `code` so a binding can map them onto its
//! own exception types.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpusio::CorpusRecord;
use crate::eval::{EvalConfig, MatchMode, SpanCounter};
use crate::oie::{filter_and_merge, Triple};
use crate::prompts::{build_prompt, loss, Objective, PromptLayout, PromptSpec, Reduction, TokenLogProbs};
use crate::respparse::parse_and_map;
use crate::tagging::Tag;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{code}: {message}")]
pub struct BridgeError {
    pub code: &'static str,
    pub message: String,
}

impl BridgeError {
    fn new(code: &'static str, err: impl ToString) -> Self {
        BridgeError { code, message: err.to_string() }
    }
}

fn from_value<T: DeserializeOwned>(v: &Value, what: &str) -> Result<T, BridgeError> {
    T::deserialize(v).map_err(|e| BridgeError::new("invalid_input", format!("{what}: {e}")))
}

fn to_value<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("serializable")
}

/// `refs` and `preds` are lists of tag-string lists; `mode` is `"SD"` or `"SC"`.
pub fn evaluate(refs: &Value, preds: &Value, mode: &str) -> Result<Value, BridgeError> {
    let refs: Vec<Vec<Tag>> = from_value(refs, "refs")?;
    let preds: Vec<Vec<Tag>> = from_value(preds, "preds")?;
    let mode: MatchMode = mode.parse().map_err(|e| BridgeError::new("invalid_input", e))?;
    if refs.len() != preds.len() {
        return Err(BridgeError::new(
            "eval_error",
            format!("{} reference sequences but {} predicted sequences", refs.len(), preds.len()),
        ));
    }
    let mut counter = SpanCounter::new(EvalConfig::with_mode(mode));
    for (r, p) in refs.iter().zip(&preds) {
        counter.add(r, p).map_err(|e| BridgeError::new("eval_error", e))?;
    }
    Ok(to_value(&counter.finish()))
}

/// Parses a generated response and maps it to tag strings over `tokens`.
pub fn parse_and_map_tags(response: &str, tokens: &Value, options: &Value) -> Result<Value, BridgeError> {
    let tokens: Vec<String> = from_value(tokens, "tokens")?;
    let options: Vec<String> = from_value(options, "options")?;
    Ok(to_value(&parse_and_map(response, &tokens, &options)))
}

/// Takes a serialized `PromptSpec`, returns a serialized `PromptLayout`.
pub fn build_prompt_layout(spec: &Value) -> Result<Value, BridgeError> {
    let spec: PromptSpec = from_value(spec, "spec")?;
    let layout = build_prompt(&spec).map_err(|e| BridgeError::new("prompt_error", e))?;
    Ok(to_value(&layout))
}

/// Loss over a layout map plus `token_offsets` (byte offsets of each
/// non-padding token), given per-position log-probs and an optional pad mask.
pub fn prompt_loss(
    layout: &Value,
    token_offsets: &Value,
    logprobs: &[f64],
    pad_mask: Option<&[bool]>,
    objective: &str,
    reduction: &str,
) -> Result<Value, BridgeError> {
    let layout: PromptLayout = from_value(layout, "layout")?;
    let offsets: Vec<(usize, usize)> = from_value(token_offsets, "token_offsets")?;
    let objective: Objective = objective.parse().map_err(|e| BridgeError::new("invalid_input", e))?;
    let reduction: Reduction = reduction.parse().map_err(|e| BridgeError::new("invalid_input", e))?;
    let tokens = layout.token_layout(&offsets).map_err(|e| BridgeError::new("alignment_error", e))?;
    let logprobs = TokenLogProbs {
        logprobs: logprobs.to_vec(),
        pad_mask: pad_mask.map_or_else(|| vec![false; logprobs.len()], <[bool]>::to_vec),
    };
    let value = loss(&tokens, &logprobs, objective, reduction).map_err(|e| BridgeError::new("alignment_error", e))?;
    Ok(to_value(&value))
}

/// Returns a corpus record map with relation tags.
pub fn filter_and_merge_triples(tokens: &Value, triples: &Value) -> Result<Value, BridgeError> {
    let tokens: Vec<String> = from_value(tokens, "tokens")?;
    let triples: Vec<Triple> = from_value(triples, "triples")?;
    let labeling = filter_and_merge(&tokens, &triples).map_err(|e| BridgeError::new("oie_error", e))?;
    Ok(to_value(&labeling.to_record()))
}

/// Validates a corpus record map and returns its canonical form.
pub fn normalize_record(record: &Value) -> Result<Value, BridgeError> {
    let rec: CorpusRecord = from_value(record, "record")?;
    rec.validate(0).map_err(|e| BridgeError::new("corpus_error", e))?;
    Ok(to_value(&rec))
}

pub fn version() -> Value {
    json!({ "name": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION") })
}
