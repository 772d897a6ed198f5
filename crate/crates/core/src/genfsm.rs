//! Byte-level automaton for the response grammar, used to constrain decoding.
//!
//! The accepted language is `NA` (optional) or one or more `span:class`
//! groups joined by `;`, where a span is one or more bytes other than `:`,
//! `;` and newline, and `class` is one of the options verbatim.
//!
//! Sampling parameters used with constrained generation are the caller's
//! business; the defaults we pair this with are [`GENERATION_TEMPERATURE`],
//! [`GENERATION_TOP_P`] and [`GENERATION_MAX_NEW_TOKENS`].

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GENERATION_TEMPERATURE: f64 = 0.1;
pub const GENERATION_TOP_P: f64 = 0.9;
pub const GENERATION_MAX_NEW_TOKENS: usize = 200;

pub type State = u32;
/// Absorbing rejecting state. Never stored in the table.
pub const DEAD: State = State::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GrammarError {
    #[error("grammar needs at least one class")]
    NoClasses,
    #[error("empty class name")]
    EmptyClass,
    #[error("duplicate class name {0:?}")]
    Duplicate(String),
    #[error("class name {0:?} contains ':', ';' or a line break")]
    Reserved(String),
    #[error("malformed automaton table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputGrammar {
    pub options: Vec<String>,
    pub allows_na: bool,
}

impl OutputGrammar {
    pub fn new<S: Into<String>>(options: impl IntoIterator<Item = S>, allows_na: bool) -> Self {
        OutputGrammar { options: options.into_iter().map(Into::into).collect(), allows_na }
    }

    fn validate(&self) -> Result<(), GrammarError> {
        if self.options.is_empty() {
            return Err(GrammarError::NoClasses);
        }
        let mut seen = BTreeSet::new();
        for o in &self.options {
            if o.is_empty() {
                return Err(GrammarError::EmptyClass);
            }
            if o.bytes().any(|b| !is_span_byte(b)) {
                return Err(GrammarError::Reserved(o.clone()));
            }
            if !seen.insert(o.as_str()) {
                return Err(GrammarError::Duplicate(o.clone()));
            }
        }
        Ok(())
    }
}

fn is_span_byte(b: u8) -> bool {
    !matches!(b, b':' | b';' | b'\n')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WalkResult {
    Accepting,
    LiveNonAccepting,
    Dead,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dfa {
    /// `transitions[s][b]` is the successor of `s` on byte `b`, or [`DEAD`].
    transitions: Vec<[State; 256]>,
    accepting: Vec<bool>,
    start: State,
}

/// Per-token allowed flags for one state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabMask {
    pub allowed: Vec<bool>,
    /// The end-of-sequence pseudo-token.
    pub eos: bool,
}

impl VocabMask {
    pub fn allowed_ids(&self) -> Vec<usize> {
        self.allowed.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect()
    }
}

// NFA over byte predicates; only used during compilation
enum Edge {
    SpanByte(usize),
    Byte(u8, usize),
}

struct Nfa {
    edges: Vec<Vec<Edge>>,
    accepting: Vec<bool>,
}

impl Nfa {
    fn add_state(&mut self, accepting: bool) -> usize {
        self.edges.push(Vec::new());
        self.accepting.push(accepting);
        self.edges.len() - 1
    }

    fn build(grammar: &OutputGrammar) -> (Nfa, usize) {
        let mut nfa = Nfa { edges: Vec::new(), accepting: Vec::new() };
        let start = nfa.add_state(false);
        let group = nfa.add_state(false);
        let span = nfa.add_state(false);
        let class_root = nfa.add_state(false);
        nfa.edges[start].push(Edge::SpanByte(span));
        nfa.edges[group].push(Edge::SpanByte(span));
        nfa.edges[span].push(Edge::SpanByte(span));
        nfa.edges[span].push(Edge::Byte(b':', class_root));

        let mut trie: BTreeMap<(usize, u8), usize> = BTreeMap::new();
        for class in &grammar.options {
            let mut node = class_root;
            for &b in class.as_bytes() {
                node = match trie.get(&(node, b)) {
                    Some(&next) => next,
                    None => {
                        let next = nfa.add_state(false);
                        nfa.edges[node].push(Edge::Byte(b, next));
                        trie.insert((node, b), next);
                        next
                    }
                };
            }
            if !nfa.accepting[node] {
                nfa.accepting[node] = true;
                nfa.edges[node].push(Edge::Byte(b';', group));
            }
        }

        if grammar.allows_na {
            let n = nfa.add_state(false);
            let na = nfa.add_state(true);
            nfa.edges[start].push(Edge::Byte(b'N', n));
            nfa.edges[n].push(Edge::Byte(b'A', na));
        }
        (nfa, start)
    }

    fn step(&self, set: &BTreeSet<usize>, byte: u8) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for &s in set {
            for e in &self.edges[s] {
                match *e {
                    Edge::SpanByte(t) if is_span_byte(byte) => {
                        out.insert(t);
                    }
                    Edge::Byte(b, t) if b == byte => {
                        out.insert(t);
                    }
                    _ => {}
                }
            }
        }
        out
    }
}

/// Compiles the grammar to a DFA by subset construction. States are numbered
/// in breadth-first order from the start state; every state can reach an
/// accepting state.
pub fn compile(grammar: &OutputGrammar) -> Result<Dfa, GrammarError> {
    grammar.validate()?;
    let (nfa, nfa_start) = Nfa::build(grammar);

    let start_set = BTreeSet::from([nfa_start]);
    let mut ids: BTreeMap<BTreeSet<usize>, State> = BTreeMap::from([(start_set.clone(), 0)]);
    let mut sets = vec![start_set.clone()];
    let mut queue = VecDeque::from([start_set]);
    let mut transitions: Vec<[State; 256]> = Vec::new();
    while let Some(set) = queue.pop_front() {
        let mut row = [DEAD; 256];
        for byte in 0..=255u8 {
            let next = nfa.step(&set, byte);
            if next.is_empty() {
                continue;
            }
            let id = match ids.get(&next) {
                Some(&id) => id,
                None => {
                    let id = sets.len() as State;
                    ids.insert(next.clone(), id);
                    sets.push(next.clone());
                    queue.push_back(next);
                    id
                }
            };
            row[byte as usize] = id;
        }
        transitions.push(row);
    }
    let accepting = sets.iter().map(|s| s.iter().any(|&q| nfa.accepting[q])).collect();
    let dfa = Dfa { transitions, accepting, start: 0 };
    Ok(dfa.prune())
}

impl Dfa {
    pub fn start(&self) -> State {
        self.start
    }

    pub fn num_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_accepting(&self, state: State) -> bool {
        state != DEAD && self.accepting[state as usize]
    }

    pub fn step(&self, state: State, byte: u8) -> State {
        if state == DEAD {
            DEAD
        } else {
            self.transitions[state as usize][byte as usize]
        }
    }

    pub fn step_str(&self, state: State, text: &str) -> State {
        let mut s = state;
        for &b in text.as_bytes() {
            s = self.step(s, b);
            if s == DEAD {
                break;
            }
        }
        s
    }

    pub fn walk(&self, text: &str) -> WalkResult {
        match self.step_str(self.start, text) {
            DEAD => WalkResult::Dead,
            s if self.is_accepting(s) => WalkResult::Accepting,
            _ => WalkResult::LiveNonAccepting,
        }
    }

    pub fn accepts(&self, text: &str) -> bool {
        self.walk(text) == WalkResult::Accepting
    }

    /// A token is allowed iff consuming all its bytes from `state` stays out
    /// of the dead state. Every non-dead state can still reach acceptance
    /// byte by byte; use [`TokenGuide`] when acceptance must be reachable
    /// with the given vocabulary alone.
    pub fn allowed_tokens<S: AsRef<str>>(&self, state: State, vocab: &[S]) -> VocabMask {
        let allowed = vocab
            .iter()
            .map(|t| state != DEAD && self.step_str(state, t.as_ref()) != DEAD)
            .collect();
        VocabMask { allowed, eos: self.is_accepting(state) }
    }

    /// Removes states that cannot reach acceptance and renumbers the rest in
    /// breadth-first order.
    fn prune(self) -> Dfa {
        let n = self.num_states();
        let mut live: Vec<bool> = self.accepting.clone();
        let mut changed = true;
        while changed {
            changed = false;
            for s in 0..n {
                if !live[s] && self.transitions[s].iter().any(|&t| t != DEAD && live[t as usize]) {
                    live[s] = true;
                    changed = true;
                }
            }
        }
        if !live[self.start as usize] {
            return Dfa { transitions: vec![[DEAD; 256]], accepting: vec![false], start: 0 };
        }

        let mut order = vec![DEAD; n];
        let mut bfs = VecDeque::from([self.start]);
        let mut kept = Vec::new();
        order[self.start as usize] = 0;
        kept.push(self.start);
        while let Some(s) = bfs.pop_front() {
            for &t in &self.transitions[s as usize] {
                if t != DEAD && live[t as usize] && order[t as usize] == DEAD {
                    order[t as usize] = kept.len() as State;
                    kept.push(t);
                    bfs.push_back(t);
                }
            }
        }
        let transitions = kept
            .iter()
            .map(|&s| {
                let mut row = [DEAD; 256];
                for (b, &t) in self.transitions[s as usize].iter().enumerate() {
                    if t != DEAD && live[t as usize] {
                        row[b] = order[t as usize];
                    }
                }
                row
            })
            .collect();
        let accepting = kept.iter().map(|&s| self.accepting[s as usize]).collect();
        Dfa { transitions, accepting, start: 0 }
    }

    pub fn to_table(&self) -> DfaTable {
        let transitions = self
            .transitions
            .iter()
            .map(|row| {
                let mut ranges = Vec::new();
                let mut b = 0usize;
                while b < 256 {
                    let to = row[b];
                    let lo = b;
                    while b + 1 < 256 && row[b + 1] == to {
                        b += 1;
                    }
                    if to != DEAD {
                        ranges.push(ByteRange { lo: lo as u8, hi: b as u8, to });
                    }
                    b += 1;
                }
                ranges
            })
            .collect();
        DfaTable {
            states: self.num_states(),
            start: self.start,
            accepting: (0..self.num_states() as State).filter(|&s| self.is_accepting(s)).collect(),
            transitions,
        }
    }

    pub fn from_table(table: &DfaTable) -> Result<Dfa, GrammarError> {
        let n = table.states;
        let bad = |msg: String| Err(GrammarError::Table(msg));
        if table.transitions.len() != n || table.start as usize >= n.max(1) || n == 0 {
            return bad(format!("{} rows for {n} states, start {}", table.transitions.len(), table.start));
        }
        let mut transitions = vec![[DEAD; 256]; n];
        for (s, ranges) in table.transitions.iter().enumerate() {
            for r in ranges {
                if r.lo > r.hi || r.to as usize >= n {
                    return bad(format!("state {s}: bad range {}..={} -> {}", r.lo, r.hi, r.to));
                }
                for b in r.lo..=r.hi {
                    if transitions[s][b as usize] != DEAD {
                        return bad(format!("state {s}: byte {b} has two transitions"));
                    }
                    transitions[s][b as usize] = r.to;
                }
            }
        }
        let mut accepting = vec![false; n];
        for &a in &table.accepting {
            match accepting.get_mut(a as usize) {
                Some(flag) => *flag = true,
                None => return bad(format!("accepting state {a} out of range")),
            }
        }
        Ok(Dfa { transitions, accepting, start: table.start })
    }
}

/// Inclusive byte range with a common successor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteRange {
    pub lo: u8,
    pub hi: u8,
    pub to: State,
}

/// JSON form of a [`Dfa`] for external samplers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DfaTable {
    pub states: usize,
    pub start: State,
    pub accepting: Vec<State>,
    pub transitions: Vec<Vec<ByteRange>>,
}

/// Token-level guide for a fixed vocabulary: a token is allowed only if the
/// state it leads to can still reach acceptance using vocabulary tokens.
/// Sampling only allowed tokens therefore never gets stuck.
#[derive(Debug, Clone)]
pub struct TokenGuide {
    dfa: Dfa,
    /// `next[s][t]`: state after token `t` from state `s`.
    next: Vec<Vec<State>>,
    live: Vec<bool>,
}

impl TokenGuide {
    pub fn new<S: AsRef<str>>(dfa: Dfa, vocab: &[S]) -> Self {
        let n = dfa.num_states();
        let next: Vec<Vec<State>> = (0..n as State)
            .map(|s| vocab.iter().map(|t| dfa.step_str(s, t.as_ref())).collect())
            .collect();
        let mut live: Vec<bool> = (0..n as State).map(|s| dfa.is_accepting(s)).collect();
        let mut changed = true;
        while changed {
            changed = false;
            for s in 0..n {
                if !live[s] && next[s].iter().any(|&t| t != DEAD && live[t as usize]) {
                    live[s] = true;
                    changed = true;
                }
            }
        }
        TokenGuide { dfa, next, live }
    }

    pub fn dfa(&self) -> &Dfa {
        &self.dfa
    }

    pub fn is_live(&self, state: State) -> bool {
        state != DEAD && self.live[state as usize]
    }

    pub fn advance(&self, state: State, token: usize) -> State {
        if state == DEAD {
            DEAD
        } else {
            self.next[state as usize][token]
        }
    }

    pub fn mask(&self, state: State) -> VocabMask {
        if !self.is_live(state) {
            let width = self.next.first().map_or(0, Vec::len);
            return VocabMask { allowed: vec![false; width], eos: false };
        }
        let allowed = self.next[state as usize].iter().map(|&t| self.is_live(t)).collect();
        VocabMask { allowed, eos: self.dfa.is_accepting(state) }
    }
}
