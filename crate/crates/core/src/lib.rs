//! Sequence labeling toolkit: span tagging codecs, strict span evaluation,
//! corpus utilities, OIE silver labels, prompt construction with
//! response-oriented losses, response parsing, constrained-generation
//! automata and a reference attention-mask engine.

pub mod attnmask;
pub mod bridge;
pub mod corpusio;
pub mod eval;
pub mod oie;
pub mod genfsm;
pub mod prompts;
pub mod respparse;
pub mod tagging;
