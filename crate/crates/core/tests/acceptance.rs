//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line; the process exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqlabel::attnmask::{attention, attention_weights, causal_mask, enumerate_configs, unmasked, ConfigOrder};
use seqlabel::corpusio::{plan_mixed_batches, rdrr_counts, CorpusRecord, MixedBatchPlan};
use seqlabel::eval::{evaluate, EvalReport, MatchMode};
use seqlabel::genfsm::{compile, OutputGrammar, TokenGuide, DEAD};
use seqlabel::oie::{filter_and_merge, Part, Triple, MAX_RELATION_TOKENS};
use seqlabel::prompts::{
    build_prompt, loss, render_response, Objective, PromptExample, PromptSpec, Reduction, RegionKind, TokenLogProbs,
};
use seqlabel::respparse::{map_to_tags, parse_response};
use seqlabel::tagging::{decode_tags, encode_tags, DecodeMode, LabeledSequence, Scheme, Span, Tag};

type Check = Result<String, String>;

struct Harness {
    failures: usize,
}

impl Harness {
    fn run(&mut self, name: &str, limit: Option<Duration>, check: impl FnOnce() -> Check) {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let result = match (result, limit) {
            (Ok(_), Some(limit)) if elapsed >= limit => Err(format!("took {elapsed:?}, limit {limit:?}")),
            (r, _) => r,
        };
        let budget = limit.map_or(String::new(), |l| format!(" < {l:?}"));
        match result {
            Ok(detail) => println!("PASS  {name:<26} {detail} [{elapsed:.2?}{budget}]"),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL  {name:<26} {detail} [{elapsed:.2?}{budget}]");
            }
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn tags(strs: &[&str]) -> Vec<Tag> {
    strs.iter().map(|s| s.parse().unwrap()).collect()
}

fn words(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i}")).collect()
}

/// Random disjoint spans over `n` tokens as (start, end, class).
fn random_spans(rng: &mut ChaCha8Rng, n: usize, classes: &[&str]) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if rng.gen_bool(0.5) {
            let len = rng.gen_range(1..=(n - i).min(4));
            out.push((i, i + len, classes[rng.gen_range(0..classes.len())].to_string()));
            i += len;
        } else {
            i += 1;
        }
    }
    out
}

/// Plain IOB2 tag strings for spans, independent of the library encoder.
fn oracle_iob2(n: usize, spans: &[(usize, usize, String)]) -> Vec<String> {
    let mut t = vec!["O".to_string(); n];
    for (s, e, c) in spans {
        t[*s] = format!("B-{c}");
        for x in &mut t[s + 1..*e] {
            *x = format!("I-{c}");
        }
    }
    t
}

// ---------------------------------------------------------------- evaluation

fn worked_example() -> Check {
    let tokens: Vec<&str> = "Paul McCartney performed on the rooftop in United Kingdom with The Beatles".split(' ').collect();
    let refs = ["B-PER", "I-PER", "O", "O", "O", "O", "O", "B-LOC", "I-LOC", "O", "B-ORG", "I-ORG"];
    let preds = ["B-PER", "I-PER", "O", "O", "O", "O", "O", "B-LOC", "B-ORG", "O", "B-ORG", "I-LOC"];
    let r = LabeledSequence::from_strs(&tokens, &refs).unwrap();
    let p = LabeledSequence::from_strs(&tokens, &preds).unwrap();
    let report = evaluate(&[r], &[p], MatchMode::Sc).map_err(|e| e.to_string())?;
    let round = |x: f64| (x * 1e4).round() / 1e4;
    let m = &report.micro;
    ensure(round(m.precision) == 0.25 && round(m.recall) == 0.3333 && round(m.f1) == 0.2857, || format!("micro {m:?}"))?;
    let a = &report.macro_avg;
    ensure([a.precision, a.recall, a.f1].iter().all(|&x| round(x) == 0.3333), || format!("macro {a:?}"))?;
    let per = |c: &str| {
        let s = &report.per_class[c].scores;
        (s.precision, s.recall, s.f1)
    };
    ensure(per("PER") == (1.0, 1.0, 1.0), || format!("PER {:?}", per("PER")))?;
    ensure(per("LOC") == (0.0, 0.0, 0.0) && per("ORG") == (0.0, 0.0, 0.0), || "LOC/ORG not zero".into())?;
    Ok(format!("micro P={:.4} R={:.4} F1={:.4}, macro F1={:.4}", m.precision, m.recall, m.f1, a.f1))
}

type Counts = (u64, u64, u64);

fn oracle_scores(c: Counts) -> (f64, f64, f64) {
    let (tp, pred, gold) = c;
    let p = if pred == 0 { 0.0 } else { tp as f64 / pred as f64 };
    let r = if gold == 0 { 0.0 } else { tp as f64 / gold as f64 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

fn compare_report(report: &EvalReport, per_class: &BTreeMap<String, Counts>) -> Result<(), String> {
    ensure(report.per_class.len() == per_class.len(), || "class sets differ".into())?;
    let mut total = (0, 0, 0);
    let mut sums = (0.0, 0.0, 0.0);
    for (class, &c) in per_class {
        let got = report.per_class.get(class).ok_or_else(|| format!("missing class {class}"))?;
        let got_counts = (got.counts.true_positive, got.counts.predicted_total, got.counts.reference_total);
        ensure(got_counts == c, || format!("{class}: counts {got_counts:?} != {c:?}"))?;
        let (p, r, f) = oracle_scores(c);
        ensure((got.scores.precision, got.scores.recall, got.scores.f1) == (p, r, f), || format!("{class}: scores"))?;
        total = (total.0 + c.0, total.1 + c.1, total.2 + c.2);
        sums = (sums.0 + p, sums.1 + r, sums.2 + f);
    }
    let micro = oracle_scores(total);
    ensure((report.micro.precision, report.micro.recall, report.micro.f1) == micro, || "micro differs".into())?;
    let n = per_class.len().max(1) as f64;
    let macro_ = if per_class.is_empty() { (0.0, 0.0, 0.0) } else { (sums.0 / n, sums.1 / n, sums.2 / n) };
    ensure((report.macro_avg.precision, report.macro_avg.recall, report.macro_avg.f1) == macro_, || "macro differs".into())
}

fn eval_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let classes = ["A", "B", "C"];
    for corpus in 0..1000 {
        let n_classes = rng.gen_range(1..=3);
        let sentences = rng.gen_range(1..=4);
        let mut refs = Vec::new();
        let mut preds = Vec::new();
        let mut gold_set = BTreeSet::new();
        let mut pred_set = BTreeSet::new();
        for k in 0..sentences {
            let n = rng.gen_range(1..=6);
            let g = random_spans(&mut rng, n, &classes[..n_classes]);
            let p = random_spans(&mut rng, n, &classes[..n_classes]);
            refs.push(LabeledSequence::from_strs(&words(n), &oracle_iob2(n, &g)).unwrap());
            preds.push(LabeledSequence::from_strs(&words(n), &oracle_iob2(n, &p)).unwrap());
            gold_set.extend(g.into_iter().map(|(s, e, c)| (k, s, e, c)));
            pred_set.extend(p.into_iter().map(|(s, e, c)| (k, s, e, c)));
        }
        for (mode, erase) in [(MatchMode::Sc, false), (MatchMode::Sd, true)] {
            let key = |c: &String| if erase { "SPAN".to_string() } else { c.clone() };
            let strip = |set: &BTreeSet<(usize, usize, usize, String)>| -> BTreeSet<(usize, usize, usize, String)> {
                set.iter().map(|(k, s, e, c)| (*k, *s, *e, key(c))).collect()
            };
            let (g, p) = (strip(&gold_set), strip(&pred_set));
            let mut per_class: BTreeMap<String, Counts> = BTreeMap::new();
            for x in &g {
                per_class.entry(x.3.clone()).or_default().2 += 1;
            }
            for x in &p {
                let entry = per_class.entry(x.3.clone()).or_default();
                entry.1 += 1;
                entry.0 += u64::from(g.contains(x));
            }
            let report = evaluate(&refs, &preds, mode).map_err(|e| e.to_string())?;
            compare_report(&report, &per_class).map_err(|e| format!("corpus {corpus} {mode}: {e}"))?;
        }
    }
    Ok("1000 corpora x {SC, SD}: counts, per-class, micro and macro identical".into())
}

fn codec_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..10_000 {
        let n = rng.gen_range(0..=12);
        let spans: Vec<Span> = random_spans(&mut rng, n, &["X", "Y"])
            .into_iter()
            .map(|(s, e, c)| Span::new(&c, s, e).unwrap())
            .collect();
        for scheme in [Scheme::Iob2, Scheme::Iob1] {
            let tags = encode_tags(&spans, n, scheme).map_err(|e| e.to_string())?;
            let back = decode_tags(&tags, scheme, DecodeMode::Strict).map_err(|e| format!("case {case}: {e}"))?;
            ensure(back == spans, || format!("case {case} {scheme:?}: {spans:?} -> {back:?}"))?;
        }
    }
    Ok("10000 span sets, IOB2 and IOB1, decode(encode(s)) == s".into())
}

// ----------------------------------------------------------------------- OIE

fn oie_heuristics() -> Check {
    let tokens: Vec<String> =
        "President Biden right now stands really worried about future economic growth .".split(' ').map(String::from).collect();
    let implicit = Triple {
        subject: Some(Part::Tokens(vec![1])),
        relation: Some(Part::Implicit { implicit: "is".into() }),
        object: Some(Part::Tokens(vec![0])),
    };
    let long = Triple::from_tokens(vec![0, 1], (2..8).collect(), vec![8, 9, 10]);
    let biden = filter_and_merge(&tokens, &[implicit, long]).map_err(|e| e.to_string())?;
    ensure(biden.tags().iter().all(Tag::is_outside), || "Biden sentence has relations".into())?;

    let tokens: Vec<String> = "The aircraft broke into two parts , but there was no fire .".split(' ').map(String::from).collect();
    let aircraft = filter_and_merge(&tokens, &[Triple::from_tokens(vec![0, 1], vec![2, 3], vec![4, 5])]).unwrap();
    ensure(
        aircraft.spans.len() == 1 && (aircraft.spans[0].start, aircraft.spans[0].end) == (2, 4),
        || format!("aircraft spans {:?}", aircraft.spans),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 16;
    let tokens = words(n);
    let part = |rng: &mut ChaCha8Rng| {
        let s = rng.gen_range(0..n);
        let len = rng.gen_range(1..=8);
        let mut ix: Vec<usize> = (s..(s + len).min(n)).collect();
        if rng.gen_bool(0.1) && ix.len() > 2 {
            ix.remove(1);
        }
        Part::Tokens(ix)
    };
    for case in 0..100 {
        let triples: Vec<Triple> = (0..rng.gen_range(0..12))
            .map(|_| Triple { subject: Some(part(&mut rng)), relation: Some(part(&mut rng)), object: Some(part(&mut rng)) })
            .collect();
        let out = filter_and_merge(&tokens, &triples).map_err(|e| e.to_string())?;
        for (i, a) in out.spans.iter().enumerate() {
            ensure(a.len() <= MAX_RELATION_TOKENS, || format!("case {case}: span {a:?} too long"))?;
            for b in &out.spans[i + 1..] {
                ensure(a.end <= b.start || b.end <= a.start, || format!("case {case}: {a:?} overlaps {b:?}"))?;
            }
        }
    }
    Ok("Biden all-O, aircraft one 2-token span, 100 random cases short and disjoint".into())
}

// ------------------------------------------------------------------- prompts

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let pool = ["alpha", "beta", "gamma", "delta", "x", "New", "York", "is", "."];
    pool[rng.gen_range(0..pool.len())].to_string()
}

fn random_example(rng: &mut ChaCha8Rng) -> PromptExample {
    let n = rng.gen_range(1..6);
    let sentence: Vec<String> = (0..n).map(|_| random_word(rng)).collect();
    let response = if rng.gen_bool(0.3) { "NA".to_string() } else { format!("{}:x", sentence[0]) };
    PromptExample { sentence: sentence.join(" "), verb: None, response }
}

/// Cuts `len` bytes into random contiguous tokens.
fn random_offsets(rng: &mut ChaCha8Rng, len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < len {
        let step = rng.gen_range(1..=6).min(len - pos);
        out.push((pos, pos + step));
        pos += step;
    }
    out
}

fn loss_nesting() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (mut zero_demo_cases, mut checked) = (0, 0);
    for case in 0..1000 {
        let demos = if case % 4 == 0 { 0 } else { rng.gen_range(0..4) };
        let spec = PromptSpec {
            instruction: rng.gen_bool(0.5).then(|| "find things".to_string()),
            options: vec!["x".into(), "y".into()],
            demonstrations: (0..demos).map(|_| random_example(&mut rng)).collect(),
            query: random_example(&mut rng),
            include_query_response: true,
            verb_field: false,
        };
        let layout = build_prompt(&spec).map_err(|e| e.to_string())?;
        let offsets = random_offsets(&mut rng, layout.text.len());
        let roles = layout.token_layout(&offsets).map_err(|e| e.to_string())?;
        let lps: Vec<f64> = offsets.iter().map(|_| -rng.gen_range(0.0..8.0)).collect();
        let padded = TokenLogProbs::unpadded(lps.clone()).left_padded(rng.gen_range(0..3), -5.0);
        let get = |o| loss(&roles, &padded, o, Reduction::Sum).map(|v| v.value).map_err(|e| e.to_string());
        let (src, mrc, v) = (get(Objective::Src)?, get(Objective::Mrc)?, get(Objective::Vanilla)?);
        ensure(0.0 <= src && src <= mrc && mrc <= v, || format!("case {case}: {src} {mrc} {v}"))?;

        // oracle: the query response starts after the last response header
        let qr_start = layout.text.rfind("### Response:\n").unwrap() + "### Response:\n".len();
        let oracle_src: f64 = offsets
            .iter()
            .zip(&lps)
            .filter(|((_, e), _)| *e > qr_start)
            .fold(0.0, |acc, (_, lp)| acc + -lp);
        ensure(src == oracle_src, || format!("case {case}: SRC {src} != oracle {oracle_src}"))?;
        let oracle_v = lps.iter().fold(0.0, |acc, lp| acc + -lp);
        ensure(v == oracle_v, || format!("case {case}: vanilla {v} != oracle {oracle_v}"))?;
        if demos == 0 {
            zero_demo_cases += 1;
            ensure(src.to_bits() == mrc.to_bits(), || format!("case {case}: MRC {mrc} != SRC {src} with 0 demos"))?;
        }
        checked += 1;
    }
    Ok(format!("{checked} layouts, 0 violations; {zero_demo_cases} zero-shot cases with MRC == SRC bitwise"))
}

fn ner_instruction() -> String {
    [
        "extract named entities and their type from the input sentence, all entity types are in options",
        "if there are no named entities in the sentence the output should just be 'NA'",
        "if there are multiple extractions from the sentence, the extraction format should be entity_1_span:entity_1_class;entity_2_span:entity_2_class;...",
    ]
    .join("\n")
}

fn prompt_fidelity() -> Check {
    let record = |text: &str, t: &[&str]| {
        let tokens: Vec<&str> = text.split(' ').collect();
        CorpusRecord::from_sequence(LabeledSequence::from_strs(&tokens, t).unwrap())
    };
    let demo = record("LOS ANGELES AT MONTREAL", &["B-organization", "I-organization", "O", "B-location"]);
    let query = record(
        "EU rejects German call to boycott British lamb .",
        &["B-organization", "O", "B-miscellaneous", "O", "O", "O", "B-miscellaneous", "O", "O"],
    );
    let mut spec = PromptSpec {
        instruction: Some(ner_instruction()),
        options: ["person", "location", "organization", "miscellaneous"].map(String::from).to_vec(),
        demonstrations: vec![PromptExample::from_record(&demo).unwrap()],
        query: PromptExample::from_record(&query).unwrap(),
        include_query_response: true,
        verb_field: false,
    };
    let expected = format!(
        "### Instruction:\n{}\n### Options:\nperson, location, organization, miscellaneous\n\
         ### Sentence:\nLOS ANGELES AT MONTREAL\n### Response:\nLOS ANGELES:organization;MONTREAL:location\n\
         ### Sentence:\nEU rejects German call to boycott British lamb .\n\
         ### Response:\nEU:organization;German:miscellaneous;British:miscellaneous<eos>",
        ner_instruction()
    );
    let train = build_prompt(&spec).map_err(|e| e.to_string())?;
    ensure(train.text == expected, || format!("training prompt differs:\n{}", train.text))?;

    spec.include_query_response = false;
    let eval = build_prompt(&spec).map_err(|e| e.to_string())?;
    let qr = train.regions.iter().find(|r| r.kind == RegionKind::QueryResponse).ok_or("no QR")?;
    ensure(eval.text == train.text[..qr.start], || "evaluation text is not the training text minus QR".into())?;
    ensure(&train.text[qr.start..] == "EU:organization;German:miscellaneous;British:miscellaneous<eos>", || "QR text".into())?;
    ensure(eval.regions == train.regions[..train.regions.len() - 1], || "regions differ beyond QR".into())?;
    ensure(!eval.text.contains("<eos>") && eval.text.ends_with("### Response:\n"), || "eval tail".into())?;
    Ok(format!("{} bytes identical; eval prompt drops QR and <eos> only", expected.len()))
}

// ------------------------------------------------------------------- grammar

fn is_span_byte(b: u8) -> bool {
    b != b':' && b != b';' && b != b'\n'
}

/// Backtracking matcher for one-or-more `span:class` groups.
fn oracle_groups(s: &[u8], classes: &[&str]) -> bool {
    for end in 1..=s.len() {
        if !is_span_byte(s[end - 1]) {
            break;
        }
        if end < s.len() && s[end] == b':' {
            let rest = &s[end + 1..];
            for c in classes {
                if let Some(after) = rest.strip_prefix(c.as_bytes()) {
                    if after.is_empty() || (after[0] == b';' && oracle_groups(&after[1..], classes)) {
                        return true;
                    }
                }
            }
        }
    }
    false
}

fn oracle_accepts(s: &str, classes: &[&str], na: bool) -> bool {
    (na && s == "NA") || oracle_groups(s.as_bytes(), classes)
}

/// Whether some completion of `p` is in the language.
fn oracle_viable(p: &str, classes: &[&str], na: bool) -> bool {
    if na && "NA".starts_with(p) {
        return true;
    }
    let mut suffixes = vec![String::new()];
    for c in classes {
        for k in 0..=c.len() {
            suffixes.push(c[k..].to_string());
        }
        suffixes.push(format!(":{c}"));
        suffixes.push(format!("x:{c}"));
    }
    suffixes.iter().any(|s| oracle_accepts(&format!("{p}{s}"), classes, na))
}

fn grammar_string(rng: &mut ChaCha8Rng, classes: &[&str]) -> String {
    let alphabet = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ :;";
    let mut s = String::new();
    let len = rng.gen_range(0..=30);
    while s.len() < len {
        match rng.gen_range(0..10) {
            0 => s.push_str(classes[rng.gen_range(0..classes.len())]),
            1 => s.push_str("NA"),
            2 | 3 => s.push(if rng.gen_bool(0.5) { ':' } else { ';' }),
            _ => s.push(alphabet[rng.gen_range(0..alphabet.len())] as char),
        }
    }
    s.truncate(len);
    s
}

fn random_record(rng: &mut ChaCha8Rng, classes: &[&str]) -> CorpusRecord {
    let n = rng.gen_range(1..=8);
    let tokens: Vec<String> = (0..n).map(|_| random_word(rng)).collect();
    let spans = random_spans(rng, n, classes);
    let t: Vec<Tag> = oracle_iob2(n, &spans).iter().map(|s| s.parse().unwrap()).collect();
    CorpusRecord::new(tokens, t)
}

fn check_guide(guide: &TokenGuide, vocab_len: usize) -> Result<usize, String> {
    let dfa = guide.dfa();
    let start = dfa.start();
    if !guide.is_live(start) {
        ensure(guide.mask(start).allowed.iter().all(|&a| !a), || "dead start allows tokens".into())?;
        return Ok(0);
    }
    // every state reachable through allowed tokens
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(s) = queue.pop_front() {
        let mask = guide.mask(s);
        ensure(mask.eos || mask.allowed.iter().any(|&a| a), || format!("state {s} is a dead end"))?;
        for t in (0..vocab_len).filter(|&t| mask.allowed[t]) {
            let next = guide.advance(s, t);
            ensure(next != DEAD, || "allowed token leads to dead state".into())?;
            if seen.insert(next) {
                queue.push_back(next);
            }
        }
    }
    // and from each of them acceptance is reachable through allowed tokens
    for &s in &seen {
        let mut inner = BTreeSet::from([s]);
        let mut q = VecDeque::from([s]);
        let mut ok = false;
        while let Some(x) = q.pop_front() {
            if dfa.is_accepting(x) {
                ok = true;
                break;
            }
            let mask = guide.mask(x);
            for t in (0..vocab_len).filter(|&t| mask.allowed[t]) {
                let y = guide.advance(x, t);
                if inner.insert(y) {
                    q.push_back(y);
                }
            }
        }
        ensure(ok, || format!("state {s} cannot reach acceptance"))?;
    }
    Ok(seen.len())
}

fn grammar_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let classes = ["PER", "LOC", "ORGA", "ORG"];
    let mut accepted = 0;
    for na in [true, false] {
        let dfa = compile(&OutputGrammar::new(classes, na)).map_err(|e| e.to_string())?;
        for _ in 0..5000 {
            let s = grammar_string(&mut rng, &classes);
            let expect = oracle_accepts(&s, &classes, na);
            ensure(dfa.accepts(&s) == expect, || format!("{s:?}: dfa {} oracle {expect}", dfa.accepts(&s)))?;
            accepted += usize::from(expect);
            // byte-level masks agree with prefix viability
            let cut = rng.gen_range(0..=s.len());
            let prefix = &s[..cut];
            let state = dfa.step_str(dfa.start(), prefix);
            ensure((state != DEAD) == oracle_viable(prefix, &classes, na), || format!("liveness of {prefix:?}"))?;
            if state != DEAD {
                let vocab = ["P", "ER", ":", ";", "NA", "x:", "LOC", ":ORG", " "];
                let mask = dfa.allowed_tokens(state, &vocab);
                for (t, tok) in vocab.iter().enumerate() {
                    let viable = oracle_viable(&format!("{prefix}{tok}"), &classes, na);
                    ensure(mask.allowed[t] == viable, || format!("mask for {prefix:?} + {tok:?}"))?;
                }
                ensure(mask.eos == oracle_accepts(prefix, &classes, na), || format!("eos after {prefix:?}"))?;
            }
        }
    }

    let record_classes = ["x", "y", "zz"];
    let dfa = compile(&OutputGrammar::new(record_classes, true)).map_err(|e| e.to_string())?;
    for i in 0..500 {
        let rec = random_record(&mut rng, &record_classes);
        let text = render_response(&rec).map_err(|e| e.to_string())?;
        ensure(dfa.accepts(&text) && oracle_accepts(&text, &record_classes, true), || format!("record {i}: {text:?}"))?;
    }

    let fragments = ["a", "b", " ", "ab", ":", ";", "x", "y", "yx", "N", "A", "NA", ":x", ";a", "a:", "x;", "b:y", "z", "yx;", ":yx", "A:", "xy"];
    let guide_classes = ["x", "yx"];
    let mut vocabularies = 0;
    let mut states = 0;
    for _ in 0..300 {
        let size = rng.gen_range(1..=20);
        let mut vocab: Vec<&str> = fragments.to_vec();
        vocab.shuffle(&mut rng);
        vocab.truncate(size);
        let dfa = compile(&OutputGrammar::new(guide_classes, rng.gen_bool(0.5))).unwrap();
        let guide = TokenGuide::new(dfa, &vocab);
        states += check_guide(&guide, vocab.len())?;
        vocabularies += 1;
    }
    Ok(format!(
        "10000 strings ({accepted} accepted) + prefix masks match oracle; 500 renders accepted; \
         {vocabularies} vocabularies <= 20 tokens, {states} reachable states, no garden paths"
    ))
}

fn response_mapping() -> Check {
    let options = ["person", "location", "organization", "miscellaneous"];
    let tokens = ["LOS", "ANGELES", "AT", "MONTREAL"];
    let parsed = parse_response("LOS ANGELES:organization;MONTREAL:location", &options);
    let got: Vec<String> = map_to_tags(&parsed, &tokens).iter().map(ToString::to_string).collect();
    ensure(got == ["B-organization", "I-organization", "O", "B-location"], || format!("{got:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let classes = ["x", "y"];
    let (mut unique, mut other) = (0, 0);
    for case in 0..1000 {
        let rec = random_record(&mut rng, &classes);
        let spans = decode_tags(&rec.tags, Scheme::Iob2, DecodeMode::Strict).unwrap();
        let text = render_response(&rec).map_err(|e| e.to_string())?;
        let mapped = map_to_tags(&parse_response(&text, &classes), &rec.tokens);
        let recovered = decode_tags(&mapped, Scheme::Iob2, DecodeMode::Strict).map_err(|e| format!("case {case}: {e}"))?;
        let occurrences = |s: &Span| {
            let k = s.len();
            (0..=rec.tokens.len() - k).filter(|&i| rec.tokens[i..i + k] == rec.tokens[s.start..s.end]).count()
        };
        if spans.iter().all(|s| occurrences(s) == 1) {
            unique += 1;
            ensure(recovered == spans, || format!("case {case}: {spans:?} -> {recovered:?}"))?;
        } else {
            other += 1;
            ensure(recovered.len() <= spans.len(), || format!("case {case}: extra spans"))?;
        }
    }
    Ok(format!("example maps exactly; {unique} unique-text round trips exact ({other} with repeated text skipped)"))
}

// ----------------------------------------------------------------- attention

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

fn attention_semantics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (n, d) = (8, 16);
    let mut max_row_err: f64 = 0.0;
    let mut max_causal: f64 = 0.0;
    let mut min_unmasked = f64::INFINITY;
    for _ in 0..20 {
        let (q, k, v) = (random_matrix(&mut rng, n, d), random_matrix(&mut rng, n, d), random_matrix(&mut rng, n, d));
        for mask in [causal_mask(n), unmasked(n)] {
            let w = attention_weights(q.view(), k.view(), mask.view()).map_err(|e| e.to_string())?;
            for row in w.rows() {
                max_row_err = max_row_err.max((row.sum() - 1.0).abs());
            }
        }
        let base_c = attention(q.view(), k.view(), v.view(), causal_mask(n).view()).unwrap();
        let base_u = attention(q.view(), k.view(), v.view(), unmasked(n).view()).unwrap();
        for j in 1..n {
            let (mut k2, mut v2) = (k.clone(), v.clone());
            for c in 0..d {
                k2[[j, c]] += rng.gen_range(-3.0..3.0);
                v2[[j, c]] += rng.gen_range(-3.0..3.0);
            }
            let out_c = attention(q.view(), k2.view(), v2.view(), causal_mask(n).view()).unwrap();
            let out_u = attention(q.view(), k2.view(), v2.view(), unmasked(n).view()).unwrap();
            let row_delta = |a: &Array2<f64>, b: &Array2<f64>, i: usize| {
                a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
            };
            let mut unmasked_change: f64 = 0.0;
            for i in 0..j {
                max_causal = max_causal.max(row_delta(&base_c, &out_c, i));
                unmasked_change = unmasked_change.max(row_delta(&base_u, &out_u, i));
            }
            min_unmasked = min_unmasked.min(unmasked_change);
        }
    }
    ensure(max_row_err <= 1e-12, || format!("row sum error {max_row_err:e}"))?;
    ensure(max_causal < 1e-12, || format!("causal rows moved by {max_causal:e}"))?;
    ensure(min_unmasked > 1e-6, || format!("unmasked change only {min_unmasked:e}"))?;

    let codes: Vec<String> = enumerate_configs(4, 8, ConfigOrder::Gray).iter().map(|c| c.code()).collect();
    ensure(codes.len() == 16 && codes.iter().collect::<BTreeSet<_>>().len() == 16, || "16 distinct codes".into())?;
    ensure(codes[0] == "0000", || "gray order starts masked".into())?;
    for w in codes.windows(2) {
        let dist = w[0].chars().zip(w[1].chars()).filter(|(a, b)| a != b).count();
        ensure(dist == 1, || format!("{} -> {} differ in {dist} digits", w[0], w[1]))?;
    }
    Ok(format!(
        "row sums |1-s| <= {max_row_err:.1e}; causal max|d| = {max_causal:.1e}; unmasked min max|d| = {min_unmasked:.2e}; gray m=4: 16 codes, Hamming 1"
    ))
}

// ------------------------------------------------------------------- corpora

fn rdrr_mirror() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for corpus in 0..100 {
        let mut records = Vec::new();
        let mut mirrored = Vec::new();
        for _ in 0..rng.gen_range(1..6) {
            let n = rng.gen_range(2..10);
            let spans = random_spans(&mut rng, n, &["A", "B"]);
            let heads: Vec<i64> = (0..n)
                .map(|i| loop {
                    let h = rng.gen_range(-1..n as i64);
                    if h != i as i64 {
                        break h;
                    }
                })
                .collect();
            let mut rec = CorpusRecord::new(words(n), tags(&oracle_iob2(n, &spans).iter().map(String::as_str).collect::<Vec<_>>()));
            rec.heads = Some(heads.clone());
            let m_spans: Vec<(usize, usize, String)> = spans.iter().map(|(s, e, c)| (n - e, n - s, c.clone())).collect();
            let mut m_tokens = words(n);
            m_tokens.reverse();
            let mut m = CorpusRecord::new(m_tokens, tags(&oracle_iob2(n, &m_spans).iter().map(String::as_str).collect::<Vec<_>>()));
            m.heads = Some(heads.iter().rev().map(|&h| if h < 0 { h } else { n as i64 - 1 - h }).collect());
            records.push(rec);
            mirrored.push(m);
        }
        let (a, b) = match (rdrr_counts(&records), rdrr_counts(&mirrored)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(_), Err(_)) => continue,
            _ => return Err(format!("corpus {corpus}: only one side has arcs")),
        };
        ensure(a.right == b.left && a.left == b.right, || format!("corpus {corpus}: {a:?} vs {b:?}"))?;
        let (x, y) = (a.value(), b.value());
        ensure((0.0..=1.0).contains(&x) && (x + y - 1.0).abs() <= f64::EPSILON, || format!("corpus {corpus}: {x} + {y}"))?;
    }
    Ok("100 corpora: mirrored right/left counts swap exactly, RDRR' = 1 - RDRR".into())
}

fn mixed_batches() -> Check {
    let plan = MixedBatchPlan::default();
    ensure((plan.batch_size, plan.source_per_batch, plan.target_per_batch) == (32, 27, 5), || "defaults".into())?;
    let source: Vec<u32> = (0..1000).collect();
    let target: Vec<u32> = (5000..5040).collect();
    let epochs = 3;
    let run = || serde_json::to_vec(&plan_mixed_batches(&source, &target, &plan, epochs).unwrap()).unwrap();
    let first = run();
    ensure(first == run(), || "reruns differ".into())?;
    let batches = plan_mixed_batches(&source, &target, &plan, epochs).map_err(|e| e.to_string())?;
    for epoch in 0..epochs {
        let mut seen: Vec<u32> = batches.iter().filter(|b| b.epoch == epoch).flat_map(|b| b.source.clone()).collect();
        seen.sort();
        ensure(seen == source, || format!("epoch {epoch} does not cover each source id once"))?;
    }
    for b in &batches {
        ensure(b.target.len() == 5 && b.source.len() <= 27, || "batch composition".into())?;
        ensure(b.target.iter().collect::<BTreeSet<_>>().len() == 5, || "repeated target in batch".into())?;
    }
    let other = serde_json::to_vec(&plan_mixed_batches(&source, &target, &MixedBatchPlan { seed: 1, ..plan }, epochs).unwrap()).unwrap();
    ensure(other != first, || "seed has no effect".into())?;
    Ok(format!("{} batches over {epochs} epochs byte-identical on rerun ({} bytes); full coverage per epoch", batches.len(), first.len()))
}

fn main() -> ExitCode {
    let mut h = Harness { failures: 0 };
    let ms = Duration::from_millis;
    h.run("worked-example", Some(ms(1)), worked_example);
    h.run("eval-oracle", Some(ms(5000)), eval_oracle);
    h.run("codec-round-trip", Some(ms(2000)), codec_round_trip);
    h.run("oie-heuristics", None, oie_heuristics);
    h.run("loss-nesting", None, loss_nesting);
    h.run("prompt-fidelity", None, prompt_fidelity);
    h.run("grammar-dfa-equivalence", Some(ms(10_000)), grammar_equivalence);
    h.run("response-mapping", None, response_mapping);
    h.run("attention-semantics", None, attention_semantics);
    h.run("rdrr-mirror", None, rdrr_mirror);
    h.run("mixed-batch-determinism", None, mixed_batches);
    if h.failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", h.failures);
        ExitCode::FAILURE
    }
}
