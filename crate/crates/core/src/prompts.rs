//! Prompt construction for supervised (in-context) fine-tuning, and the
//! response-oriented loss objectives computed over it.
//!
//! A training prompt looks like this (instruction block optional, any number
//! of demonstrations, `### Verb:` only for predicate-conditioned tasks):
//!
//! ```text
//! ### Instruction:
//! {instruction}
//! ### Options:
//! {class_1, class_2, ...}
//! ### Sentence:
//! {demonstration sentence}
//! ### Response:
//! {demonstration response}
//! ### Sentence:
//! {query sentence}
//! ### Response:
//! {query response}<eos>
//! ```
//!
//! Evaluation prompts stop right after the final `### Response:\n`.
//!
//! [`PromptLayout`] records where each part of the text lives (byte offsets),
//! so a tokenizer's offsets can be mapped to roles and the vanilla / SRC / MRC
//! objectives can select which token log-probabilities enter the loss.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpusio::CorpusRecord;
use crate::tagging::{decode_tags, DecodeMode, Scheme, TaggingError, RESERVED_CHARS};

pub const EOS_MARKER: &str = "<eos>";
pub const NA_RESPONSE: &str = "NA";

const INSTRUCTION_HEADER: &str = "### Instruction:\n";
const OPTIONS_HEADER: &str = "\n### Options:\n";
const SENTENCE_HEADER: &str = "### Sentence:\n";
const VERB_HEADER: &str = "\n### Verb:\n";
const RESPONSE_HEADER: &str = "\n### Response:\n";
const OPTIONS_SEPARATOR: &str = ", ";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("span text {0:?} contains a reserved ':' or ';' character")]
    ReservedChar(String),
    #[error("{field} contains a reserved template marker or line break: {text:?}")]
    Reserved { field: &'static str, text: String },
    #[error("verb field requested but example {0} has no verb")]
    MissingVerb(String),
    #[error("{0}")]
    Alignment(String),
    #[error("log-probability {value} at position {index} is not a finite value <= 0")]
    InvalidLogProb { index: usize, value: f64 },
    #[error("need {wanted} demonstrations but the pool only has {available}")]
    NotEnoughDemonstrations { wanted: usize, available: usize },
    #[error(transparent)]
    Tagging(#[from] TaggingError),
}

/// Renders the gold response of a record: `span:class` pairs joined by `;`,
/// or `NA` when the record has no spans.
pub fn render_response(record: &CorpusRecord) -> Result<String, PromptError> {
    let spans = decode_tags(&record.tags, Scheme::Iob2, DecodeMode::Repair)?;
    if spans.is_empty() {
        return Ok(NA_RESPONSE.to_string());
    }
    let mut parts = Vec::with_capacity(spans.len());
    for span in spans {
        let text = record.tokens[span.start..span.end].join(" ");
        if text.contains(RESERVED_CHARS) || text.contains('\n') {
            return Err(PromptError::ReservedChar(text));
        }
        parts.push(format!("{text}:{}", span.label));
    }
    Ok(parts.join(";"))
}

/// One sentence of a prompt together with its response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptExample {
    pub sentence: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verb: Option<String>,
    pub response: String,
}

impl PromptExample {
    /// Space-joins the tokens, renders the response and, when the record
    /// carries a `verb_index`, takes the verb token.
    pub fn from_record(record: &CorpusRecord) -> Result<Self, PromptError> {
        Ok(PromptExample {
            sentence: record.tokens.join(" "),
            verb: record.verb_index.map(|i| record.tokens[i].clone()),
            response: render_response(record)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub instruction: Option<String>,
    pub options: Vec<String>,
    pub demonstrations: Vec<PromptExample>,
    pub query: PromptExample,
    /// Training prompts carry the query response and the end marker.
    pub include_query_response: bool,
    pub verb_field: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegionKind {
    Instruction,
    DemonstrationExample(usize),
    DemonstrationResponse(usize),
    QueryExample,
    QueryResponse,
}

impl RegionKind {
    fn name(&self) -> &'static str {
        match self {
            RegionKind::Instruction => "instruction",
            RegionKind::DemonstrationExample(_) => "demonstration_example",
            RegionKind::DemonstrationResponse(_) => "demonstration_response",
            RegionKind::QueryExample => "query_example",
            RegionKind::QueryResponse => "query_response",
        }
    }

    fn demonstration(&self) -> Option<usize> {
        match *self {
            RegionKind::DemonstrationExample(i) | RegionKind::DemonstrationResponse(i) => Some(i),
            _ => None,
        }
    }

    /// Whether tokens of this region enter the loss under `objective`.
    pub fn in_loss(&self, objective: Objective) -> bool {
        match objective {
            Objective::Vanilla => true,
            Objective::Src => *self == RegionKind::QueryResponse,
            Objective::Mrc => matches!(self, RegionKind::QueryResponse | RegionKind::DemonstrationResponse(_)),
        }
    }
}

/// A labelled byte interval `[start, end)` of the prompt text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub kind: RegionKind,
    pub start: usize,
    pub end: usize,
}

#[derive(Serialize, Deserialize)]
struct RegionRepr {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    demonstration: Option<usize>,
    start: usize,
    end: usize,
}

impl Serialize for Region {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        RegionRepr {
            kind: self.kind.name().to_string(),
            demonstration: self.kind.demonstration(),
            start: self.start,
            end: self.end,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Region {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let r = RegionRepr::deserialize(deserializer)?;
        let demo = || r.demonstration.ok_or_else(|| D::Error::custom("missing demonstration index"));
        let kind = match r.kind.as_str() {
            "instruction" => RegionKind::Instruction,
            "demonstration_example" => RegionKind::DemonstrationExample(demo()?),
            "demonstration_response" => RegionKind::DemonstrationResponse(demo()?),
            "query_example" => RegionKind::QueryExample,
            "query_response" => RegionKind::QueryResponse,
            other => return Err(D::Error::custom(format!("unknown region kind {other:?}"))),
        };
        Ok(Region { kind, start: r.start, end: r.end })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub text: String,
    /// Disjoint and ordered by position.
    pub regions: Vec<Region>,
    pub eos_included: bool,
}

impl PromptLayout {
    pub fn region(&self, kind: RegionKind) -> Option<&Region> {
        self.regions.iter().find(|r| r.kind == kind)
    }

    pub fn region_text(&self, region: &Region) -> &str {
        &self.text[region.start..region.end]
    }

    /// Splits the text into consecutive pieces: each region, and the template
    /// scaffolding between them (`None`).
    pub fn segments(&self) -> Vec<(Option<RegionKind>, &str)> {
        let mut out = Vec::with_capacity(self.regions.len() * 2 + 1);
        let mut pos = 0;
        for r in &self.regions {
            if r.start > pos {
                out.push((None, &self.text[pos..r.start]));
            }
            out.push((Some(r.kind), &self.text[r.start..r.end]));
            pos = r.end;
        }
        if pos < self.text.len() {
            out.push((None, &self.text[pos..]));
        }
        out
    }

    /// Assigns each token, given by its byte offsets into `text`, to the
    /// region it overlaps. A token touching several regions goes to the one
    /// that enters the most objectives (query response first); tokens that
    /// overlap no region, such as the `### Response:` header, are scaffolding.
    pub fn token_layout(&self, offsets: &[(usize, usize)]) -> Result<TokenLayout, PromptError> {
        let roles = offsets
            .iter()
            .enumerate()
            .map(|(i, &(start, end))| {
                if start > end || end > self.text.len() {
                    return Err(PromptError::Alignment(format!(
                        "token {i} offsets ({start}, {end}) outside a text of {} bytes",
                        self.text.len()
                    )));
                }
                Ok(self
                    .regions
                    .iter()
                    .filter(|r| start < r.end && r.start < end)
                    .map(|r| r.kind)
                    .max_by_key(|k| loss_priority(*k)))
            })
            .collect::<Result<_, _>>()?;
        Ok(TokenLayout { roles })
    }
}

fn loss_priority(kind: RegionKind) -> u8 {
    match kind {
        RegionKind::QueryResponse => 3,
        RegionKind::DemonstrationResponse(_) => 2,
        _ => 1,
    }
}

fn check_field(field: &'static str, text: &str, multiline: bool) -> Result<(), PromptError> {
    let has_header = text.starts_with("###") || text.contains("\n###");
    let bad_break = !multiline && (text.contains('\n') || text.contains('\r'));
    if has_header || bad_break || text.contains(EOS_MARKER) {
        return Err(PromptError::Reserved { field, text: text.to_string() });
    }
    Ok(())
}

impl PromptSpec {
    fn validate(&self) -> Result<(), PromptError> {
        if let Some(instruction) = &self.instruction {
            check_field("instruction", instruction, true)?;
        }
        for option in &self.options {
            check_field("option", option, false)?;
            if option.contains(',') {
                return Err(PromptError::Reserved { field: "option", text: option.clone() });
            }
        }
        for ex in self.demonstrations.iter().chain([&self.query]) {
            check_field("sentence", &ex.sentence, false)?;
            check_field("response", &ex.response, false)?;
            if let Some(verb) = &ex.verb {
                check_field("verb", verb, false)?;
            }
            if self.verb_field && ex.verb.is_none() {
                return Err(PromptError::MissingVerb(ex.sentence.clone()));
            }
        }
        Ok(())
    }
}

/// Renders the prompt and records its regions.
pub fn build_prompt(spec: &PromptSpec) -> Result<PromptLayout, PromptError> {
    spec.validate()?;
    let mut text = String::new();
    let mut regions = Vec::new();
    let mut push_region = |text: &mut String, kind: RegionKind, content: &str| {
        let start = text.len();
        text.push_str(content);
        regions.push(Region { kind, start, end: text.len() });
    };

    if let Some(instruction) = &spec.instruction {
        let block = format!(
            "{INSTRUCTION_HEADER}{instruction}{OPTIONS_HEADER}{}",
            spec.options.join(OPTIONS_SEPARATOR)
        );
        push_region(&mut text, RegionKind::Instruction, &block);
        text.push('\n');
    }

    let example_block = |ex: &PromptExample| -> String {
        match (&ex.verb, spec.verb_field) {
            (Some(verb), true) => format!("{}{VERB_HEADER}{verb}", ex.sentence),
            _ => ex.sentence.clone(),
        }
    };

    for (i, demo) in spec.demonstrations.iter().enumerate() {
        text.push_str(SENTENCE_HEADER);
        push_region(&mut text, RegionKind::DemonstrationExample(i), &example_block(demo));
        text.push_str(RESPONSE_HEADER);
        push_region(&mut text, RegionKind::DemonstrationResponse(i), &demo.response);
        text.push('\n');
    }

    text.push_str(SENTENCE_HEADER);
    push_region(&mut text, RegionKind::QueryExample, &example_block(&spec.query));
    text.push_str(RESPONSE_HEADER);
    if spec.include_query_response {
        let response = format!("{}{EOS_MARKER}", spec.query.response);
        push_region(&mut text, RegionKind::QueryResponse, &response);
    }

    Ok(PromptLayout { text, regions, eos_included: spec.include_query_response })
}

/// Per-token region roles (`None` = scaffolding) for one tokenized prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub roles: Vec<Option<RegionKind>>,
}

impl TokenLayout {
    pub fn new(roles: Vec<Option<RegionKind>>) -> Self {
        TokenLayout { roles }
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }
}

/// Log-probability of every realized token, possibly left-padded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    pub logprobs: Vec<f64>,
    /// `true` at padding positions.
    pub pad_mask: Vec<bool>,
}

impl TokenLogProbs {
    pub fn unpadded(logprobs: Vec<f64>) -> Self {
        let pad_mask = vec![false; logprobs.len()];
        TokenLogProbs { logprobs, pad_mask }
    }

    /// Prepends `count` padding positions.
    pub fn left_padded(mut self, count: usize, fill: f64) -> Self {
        self.logprobs.splice(0..0, std::iter::repeat_n(fill, count));
        self.pad_mask.splice(0..0, std::iter::repeat_n(true, count));
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Every token.
    #[default]
    Vanilla,
    /// Query response only.
    Src,
    /// Query response and every demonstration response.
    Mrc,
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(Objective::Vanilla),
            "src" => Ok(Objective::Src),
            "mrc" => Ok(Objective::Mrc),
            other => Err(format!("unknown objective {other:?}")),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Vanilla => "vanilla",
            Objective::Src => "src",
            Objective::Mrc => "mrc",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl FromStr for Reduction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(format!("unknown reduction {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    /// Tokens that entered the loss.
    pub selected: usize,
    /// Set when no token was selected; `value` is then 0.
    pub empty_selection: bool,
}

/// Negative log-likelihood over the tokens `objective` selects. Padding
/// positions never contribute. Only the sum reduction guarantees
/// `SRC <= MRC <= vanilla`.
pub fn loss(
    layout: &TokenLayout,
    logprobs: &TokenLogProbs,
    objective: Objective,
    reduction: Reduction,
) -> Result<LossValue, PromptError> {
    if logprobs.logprobs.len() != logprobs.pad_mask.len() {
        return Err(PromptError::Alignment(format!(
            "{} log-probs but {} pad flags",
            logprobs.logprobs.len(),
            logprobs.pad_mask.len()
        )));
    }
    let real = logprobs.pad_mask.iter().filter(|&&p| !p).count();
    if real != layout.len() {
        return Err(PromptError::Alignment(format!(
            "{real} non-padding log-probs for a layout of {} tokens",
            layout.len()
        )));
    }

    let mut total = 0.0;
    let mut selected = 0usize;
    let real_positions = logprobs
        .logprobs
        .iter()
        .zip(&logprobs.pad_mask)
        .enumerate()
        .filter(|(_, (_, &pad))| !pad);
    for ((index, (&lp, _)), role) in real_positions.zip(&layout.roles) {
        if lp.is_nan() || lp > 0.0 {
            return Err(PromptError::InvalidLogProb { index, value: lp });
        }
        let take = match role {
            Some(kind) => kind.in_loss(objective),
            None => objective == Objective::Vanilla,
        };
        if take {
            total += -lp;
            selected += 1;
        }
    }

    if selected == 0 {
        return Ok(LossValue { value: 0.0, selected, empty_selection: true });
    }
    let value = match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / selected as f64,
    };
    Ok(LossValue { value, selected, empty_selection: false })
}

/// Picks `count` demonstration indices from `0..pool_size`, excluding the
/// query itself, as a deterministic function of `(seed, query_id)`.
///
/// Draws are a lazy Fisher-Yates shuffle, so the first `k` picks are the same
/// for every `count >= k`: adding shots extends the context without changing
/// the demonstrations already in it.
pub fn sample_demonstrations(
    seed: u64,
    query_id: usize,
    pool_size: usize,
    count: usize,
) -> Result<Vec<usize>, PromptError> {
    sample(seed, query_id, pool_size, count, query_id < pool_size)
}

/// Like [`sample_demonstrations`] for a pool that does not contain the
/// queries (e.g. a training split used as context for a test split).
pub fn sample_external_demonstrations(
    seed: u64,
    query_id: usize,
    pool_size: usize,
    count: usize,
) -> Result<Vec<usize>, PromptError> {
    sample(seed, query_id, pool_size, count, false)
}

fn sample(seed: u64, query_id: usize, pool_size: usize, count: usize, excluded: bool) -> Result<Vec<usize>, PromptError> {
    let available = pool_size - usize::from(excluded);
    if count > available {
        return Err(PromptError::NotEnoughDemonstrations { wanted: count, available });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, query_id as u64));
    // virtual array 0..available with the query's slot remapped past it
    let mut swapped: HashMap<usize, usize> = HashMap::new();
    let mut picks = Vec::with_capacity(count);
    for i in 0..count {
        let j = rng.gen_range(i..available);
        let at_j = *swapped.get(&j).unwrap_or(&j);
        let at_i = *swapped.get(&i).unwrap_or(&i);
        swapped.insert(j, at_i);
        let slot = at_j;
        picks.push(if excluded && slot >= query_id { slot + 1 } else { slot });
    }
    Ok(picks)
}

fn mix(seed: u64, query: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ query.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generic instruction for span extraction tasks, in the format the
/// response grammar expects.
pub fn generic_instruction() -> String {
    [
        "extract spans and their type from the input sentence, all span types are in options",
        "if there are no spans in the sentence the output should just be 'NA'",
        "if there are multiple extractions from the sentence, the extraction format should be span_1_text:span_1_class;span_2_text:span_2_class;...",
    ]
    .join("\n")
}
