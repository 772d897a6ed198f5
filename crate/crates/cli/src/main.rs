//! `seqlabel` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
//! Data goes to stdout unless `-o` is given; diagnostics go to stderr.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

use seqlabel::attnmask::{enumerate_configs, ConfigOrder, MaskKind, DEFAULT_BLOCKS_PER_GROUP, DEFAULT_GROUPS};
use seqlabel::corpusio::{parse_record, write_record, CorpusRecord, Rdrr};
use seqlabel::eval::{EvalConfig, MatchMode, SpanCounter};
use seqlabel::genfsm::{compile, OutputGrammar};
use seqlabel::oie::{filter_and_merge_with_stats, FilterStats, OieRecord};
use seqlabel::prompts::{
    build_prompt, generic_instruction, loss, sample_demonstrations, sample_external_demonstrations, Objective,
    PromptExample, PromptLayout, PromptSpec, Reduction, TokenLogProbs,
};
use seqlabel::respparse::{parse_and_map, ResponseRecord};
use seqlabel::tagging::{DecodeMode, Scheme};

const DEFAULT_SEED: u64 = 1337;

#[derive(Parser)]
#[command(name = "seqlabel", version, about = "Span labeling corpora, prompts, responses and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Strict span-level precision, recall and F1 of predictions against references.
    ///
    /// Both files are corpus JSONL, one `{"tokens":[...],"tags":[...]}` object
    /// per line, aligned line by line.
    Evaluate(EvaluateArgs),
    /// Right-directed dependency ratio of the tokens inside labelled spans.
    ///
    /// Input is corpus JSONL with a `heads` array (0-based, -1 for the root).
    Rdrr {
        corpus: PathBuf,
        /// Print counts as JSON instead of the bare ratio.
        #[arg(long)]
        json: bool,
    },
    /// Filter OIE triples and merge relations into relation-tagged records.
    ///
    /// Input lines look like `{"tokens":[...],"triples":[{"subject":[0],
    /// "relation":[1,2],"object":[3]}]}`; a part may be `{"implicit":"text"}`.
    OieFilter {
        triples: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Print per-stage filter counts to stderr.
        #[arg(long)]
        stats: bool,
    },
    /// Render training or evaluation prompts, one layout JSON object per line.
    ///
    /// The first line is a `{"_meta":{...}}` header with the seed and settings.
    /// Each following line is `{"text":...,"regions":[{"kind":...,"start":...,
    /// "end":...}],"eos_included":...}` with byte offsets into `text`.
    BuildPrompts(BuildPromptsArgs),
    /// Parse generated responses and map them to predicted tags.
    ///
    /// Input lines are `{"tokens":[...],"response":"...","options":[...]}`;
    /// `options` may instead come from `--options`. Output is corpus JSONL.
    ParseResponses {
        responses: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        options: Vec<String>,
    },
    /// Compile the response grammar to a DFA table
    /// `{"states","start","accepting","transitions":[[{"lo","hi","to"}]]}`.
    CompileGrammar {
        #[arg(long, value_delimiter = ',', required = true)]
        options: Vec<String>,
        /// Accept the literal `NA` response.
        #[arg(long)]
        na: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// List layer-group unmasking configurations as digit codes.
    EnumConfigs {
        #[arg(long, default_value_t = DEFAULT_GROUPS)]
        groups: usize,
        #[arg(long, value_enum, default_value_t = OrderArg::Gray)]
        order: OrderArg,
        /// Also print the per-layer mask kinds (`c` causal, `u` unmasked).
        #[arg(long)]
        layers: bool,
        #[arg(long, default_value_t = DEFAULT_BLOCKS_PER_GROUP)]
        blocks_per_group: usize,
    },
    /// Loss values for prompts given per-token log-probabilities.
    ///
    /// PROMPTS is `build-prompts` output. Each LOGPROBS line is
    /// `{"offsets":[[start,end],...],"logprobs":[...],"pad_mask":[...]}`, where
    /// offsets cover the non-padding tokens and `pad_mask` is optional.
    Loss {
        prompts: PathBuf,
        logprobs: PathBuf,
        #[arg(long, value_enum, default_value_t = ObjectiveArg::Src)]
        objective: ObjectiveArg,
        #[arg(long, value_enum, default_value_t = ReductionArg::Sum)]
        reduction: ReductionArg,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EvaluateArgs {
    refs: PathBuf,
    preds: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Sc)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = SchemeArg::Iob2)]
    scheme: SchemeArg,
    /// How ill-formed tag sequences are read.
    #[arg(long, value_enum, default_value_t = DecodeArg::Discard)]
    decode: DecodeArg,
    #[arg(long, conflicts_with = "table")]
    json: bool,
    /// Fixed-width table (the default).
    #[arg(long)]
    table: bool,
}

#[derive(Args)]
struct BuildPromptsArgs {
    corpus: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Demonstrations per prompt.
    #[arg(long, default_value_t = 0)]
    shots: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Draw demonstrations from this corpus instead of CORPUS itself.
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    no_instruction: bool,
    /// Read the instruction text from a file.
    #[arg(long, conflicts_with = "no_instruction")]
    instruction_file: Option<PathBuf>,
    /// Class names in the options block; defaults to the sorted labels seen.
    #[arg(long, value_delimiter = ',')]
    options: Vec<String>,
    /// Loss objective the prompts are meant for; recorded in the header.
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Src)]
    objective: ObjectiveArg,
    /// Evaluation prompts: no query response, no end marker.
    #[arg(long)]
    eval: bool,
    /// Add a `### Verb:` block from each record's `verb_index`.
    #[arg(long)]
    verb: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sd,
    Sc,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Iob2,
    Iob1,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeArg {
    Strict,
    Repair,
    Discard,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Gray,
    Binary,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Vanilla,
    Src,
    Mrc,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReductionArg {
    Sum,
    Mean,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Vanilla => Objective::Vanilla,
            ObjectiveArg::Src => Objective::Src,
            ObjectiveArg::Mrc => Objective::Mrc,
        }
    }
}

enum Failure {
    Usage(String),
    Data(String),
    Internal(String),
}

type CmdResult = Result<(), Failure>;

fn data(msg: impl ToString) -> Failure {
    Failure::Data(msg.to_string())
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::Usage(format!("cannot open {}: {e}", path.display())))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json(out: &mut dyn Write, value: &impl serde::Serialize) -> CmdResult {
    serde_json::to_writer(&mut *out, value).map_err(|e| Failure::Internal(e.to_string()))?;
    out.write_all(b"\n").map_err(|e| data(format!("write failed: {e}")))
}

/// Non-blank JSONL lines of `path` with their 1-based line numbers.
fn json_lines<T: DeserializeOwned>(path: &Path) -> Result<impl Iterator<Item = Result<(usize, T), Failure>> + '_, Failure> {
    let reader = open(path)?;
    Ok(reader.lines().enumerate().filter_map(move |(i, line)| {
        let line = match line {
            Ok(l) => l,
            Err(e) => return Some(Err(data(format!("{}:{}: {e}", path.display(), i + 1)))),
        };
        if line.trim().is_empty() {
            return None;
        }
        Some(
            serde_json::from_str(&line)
                .map(|v| (i + 1, v))
                .map_err(|e| data(format!("{}:{}: {e}", path.display(), i + 1))),
        )
    }))
}

fn corpus_lines(path: &Path) -> Result<impl Iterator<Item = Result<CorpusRecord, Failure>> + '_, Failure> {
    let reader = open(path)?;
    Ok(reader.lines().enumerate().filter_map(move |(i, line)| match line {
        Err(e) => Some(Err(data(format!("{}:{}: {e}", path.display(), i + 1)))),
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(parse_record(&l, i + 1).map_err(|e| data(format!("{}: {e}", path.display())))),
    }))
}

fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>, Failure> {
    corpus_lines(path)?.collect()
}

fn evaluate(args: EvaluateArgs) -> CmdResult {
    let config = EvalConfig {
        mode: match args.mode {
            ModeArg::Sd => MatchMode::Sd,
            ModeArg::Sc => MatchMode::Sc,
        },
        scheme: match args.scheme {
            SchemeArg::Iob2 => Scheme::Iob2,
            SchemeArg::Iob1 => Scheme::Iob1,
        },
        decode: match args.decode {
            DecodeArg::Strict => DecodeMode::Strict,
            DecodeArg::Repair => DecodeMode::Repair,
            DecodeArg::Discard => DecodeMode::Discard,
        },
    };
    let mut refs = corpus_lines(&args.refs)?;
    let mut preds = corpus_lines(&args.preds)?;
    let mut counter = SpanCounter::new(config);
    let mut index = 0usize;
    loop {
        match (refs.next().transpose()?, preds.next().transpose()?) {
            (None, None) => break,
            (Some(r), Some(p)) => {
                if r.tokens != p.tokens {
                    return Err(data(format!("record {}: reference and predicted tokens differ", index + 1)));
                }
                counter.add(&r.tags, &p.tags).map_err(|e| data(format!("record {}: {e}", index + 1)))?;
            }
            _ => return Err(data("reference and prediction files have different numbers of records")),
        }
        index += 1;
    }
    let report = counter.finish();
    let mut out = output(None)?;
    if args.json {
        write_json(&mut out, &report)?;
    } else {
        out.write_all(report.to_table().as_bytes()).map_err(data)?;
    }
    out.flush().map_err(data)
}

fn rdrr(corpus: &Path, as_json: bool) -> CmdResult {
    let mut counts = Rdrr::default();
    for (index, record) in corpus_lines(corpus)?.enumerate() {
        counts.add_record(&record?, index).map_err(|e| data(format!("{}: {e}", corpus.display())))?;
    }
    if counts.total() == 0 {
        return Err(data("no dependency arcs inside labelled spans"));
    }
    let mut out = output(None)?;
    if as_json {
        write_json(&mut out, &json!({"rdrr": counts.value(), "right": counts.right, "left": counts.left}))?;
    } else {
        writeln!(out, "{}", counts.value()).map_err(data)?;
    }
    out.flush().map_err(data)
}

fn oie_filter(path: &Path, out_path: Option<&Path>, stats: bool) -> CmdResult {
    let mut out = output(out_path)?;
    let mut totals = FilterStats::default();
    let (mut sentences, mut with_relations) = (0usize, 0usize);
    for item in json_lines::<OieRecord>(path)? {
        let (line, rec) = item?;
        let (labeling, s) =
            filter_and_merge_with_stats(&rec.tokens, &rec.triples).map_err(|e| data(format!("{}:{line}: {e}", path.display())))?;
        totals.implicit += s.implicit;
        totals.non_consecutive += s.non_consecutive;
        totals.incomplete += s.incomplete;
        totals.long_relation += s.long_relation;
        totals.out_of_order += s.out_of_order;
        totals.merged += s.merged;
        sentences += 1;
        with_relations += usize::from(labeling.has_relations());
        let mut record = labeling.to_record();
        record.extra = rec.extra;
        write_record(&mut out, &record).map_err(data)?;
    }
    out.flush().map_err(data)?;
    if stats {
        let summary = json!({"sentences": sentences, "with_relations": with_relations, "removed": totals});
        eprintln!("{summary}");
    }
    Ok(())
}

fn record_options(records: &[CorpusRecord]) -> Vec<String> {
    let labels: BTreeSet<String> = records
        .iter()
        .flat_map(|r| r.tags.iter().filter_map(|t| t.label().map(|l| l.as_str().to_string())))
        .collect();
    labels.into_iter().collect()
}

fn example(record: &CorpusRecord, where_: &str) -> Result<PromptExample, Failure> {
    PromptExample::from_record(record).map_err(|e| data(format!("{where_}: {e}")))
}

fn build_prompts(args: BuildPromptsArgs) -> CmdResult {
    let instruction = match (&args.instruction_file, args.no_instruction) {
        (_, true) => None,
        (Some(path), false) => Some(
            std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?
                .trim_end_matches('\n')
                .to_string(),
        ),
        (None, false) => Some(generic_instruction()),
    };

    // demonstrations need random access, so the pool is held in memory
    let external_pool = args.pool.is_some();
    let pool = read_corpus(args.pool.as_deref().unwrap_or(&args.corpus))?;
    let options = if args.options.is_empty() { record_options(&pool) } else { args.options.clone() };
    let objective = Objective::from(args.objective);

    let mut out = output(args.output.as_deref())?;
    let meta = json!({"_meta": {
        "seed": args.seed,
        "shots": args.shots,
        "objective": objective,
        "eval": args.eval,
        "instruction": instruction.is_some(),
        "options": options,
    }});
    write_json(&mut out, &meta)?;

    for (query_id, record) in corpus_lines(&args.corpus)?.enumerate() {
        let record = record?;
        let picks = if external_pool {
            sample_external_demonstrations(args.seed, query_id, pool.len(), args.shots)
        } else {
            sample_demonstrations(args.seed, query_id, pool.len(), args.shots)
        }
        .map_err(|e| data(format!("record {}: {e}", query_id + 1)))?;
        let demonstrations = picks
            .iter()
            .map(|&i| example(&pool[i], &format!("pool record {}", i + 1)))
            .collect::<Result<_, _>>()?;
        let spec = PromptSpec {
            instruction: instruction.clone(),
            options: options.clone(),
            demonstrations,
            query: example(&record, &format!("record {}", query_id + 1))?,
            include_query_response: !args.eval,
            verb_field: args.verb,
        };
        let layout = build_prompt(&spec).map_err(|e| data(format!("record {}: {e}", query_id + 1)))?;
        write_json(&mut out, &layout)?;
    }
    out.flush().map_err(data)
}

fn parse_responses(path: &Path, out_path: Option<&Path>, options: &[String]) -> CmdResult {
    let mut out = output(out_path)?;
    for item in json_lines::<ResponseRecord>(path)? {
        let (line, rec) = item?;
        let opts = match (&rec.options, options.is_empty()) {
            (Some(o), _) => o.clone(),
            (None, false) => options.to_vec(),
            (None, true) => return Err(data(format!("{}:{line}: no options in record or on the command line", path.display()))),
        };
        let tags = parse_and_map(&rec.response, &rec.tokens, &opts);
        let mut record = CorpusRecord::new(rec.tokens, tags);
        record.extra = rec.extra;
        write_record(&mut out, &record).map_err(data)?;
    }
    out.flush().map_err(data)
}

fn compile_grammar(options: Vec<String>, na: bool, out_path: Option<&Path>) -> CmdResult {
    let dfa = compile(&OutputGrammar::new(options, na)).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut out = output(out_path)?;
    write_json(&mut out, &dfa.to_table())?;
    out.flush().map_err(data)
}

fn enum_configs(groups: usize, order: OrderArg, layers: bool, blocks: usize) -> CmdResult {
    if !(1..=16).contains(&groups) || blocks == 0 {
        return Err(Failure::Usage("--groups must be in 1..=16 and --blocks-per-group positive".into()));
    }
    let order = match order {
        OrderArg::Gray => ConfigOrder::Gray,
        OrderArg::Binary => ConfigOrder::Binary,
    };
    let mut out = output(None)?;
    for cfg in enumerate_configs(groups, blocks, order) {
        if layers {
            let kinds: String = cfg
                .layer_masks()
                .iter()
                .map(|k| if *k == MaskKind::Causal { 'c' } else { 'u' })
                .collect();
            writeln!(out, "{}\t{kinds}", cfg.code()).map_err(data)?;
        } else {
            writeln!(out, "{}", cfg.code()).map_err(data)?;
        }
    }
    out.flush().map_err(data)
}

#[derive(Deserialize)]
struct LogProbLine {
    offsets: Vec<(usize, usize)>,
    logprobs: Vec<f64>,
    #[serde(default)]
    pad_mask: Option<Vec<bool>>,
}

fn loss_cmd(prompts: &Path, logprobs: &Path, objective: Objective, reduction: Reduction, out_path: Option<&Path>) -> CmdResult {
    let mut layouts = json_lines::<serde_json::Value>(prompts)?.filter(|item| {
        !matches!(item, Ok((_, v)) if v.get("_meta").is_some())
    });
    let mut lines = json_lines::<LogProbLine>(logprobs)?;
    let mut out = output(out_path)?;
    loop {
        let (layout, lp) = match (layouts.next().transpose()?, lines.next().transpose()?) {
            (None, None) => break,
            (Some(a), Some(b)) => (a, b),
            _ => return Err(data("prompt and log-prob files have different numbers of records")),
        };
        let (line, layout) = layout;
        let layout: PromptLayout =
            serde_json::from_value(layout).map_err(|e| data(format!("{}:{line}: {e}", prompts.display())))?;
        let (lp_line, lp) = lp;
        let where_ = format!("{}:{lp_line}", logprobs.display());
        let tokens = layout.token_layout(&lp.offsets).map_err(|e| data(format!("{where_}: {e}")))?;
        let pad_mask = lp.pad_mask.unwrap_or_else(|| vec![false; lp.logprobs.len()]);
        let value = loss(&tokens, &TokenLogProbs { logprobs: lp.logprobs, pad_mask }, objective, reduction)
            .map_err(|e| data(format!("{where_}: {e}")))?;
        if value.empty_selection {
            eprintln!("warning: {where_}: no tokens selected, loss is 0");
        }
        write_json(&mut out, &value)?;
    }
    out.flush().map_err(data)
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Evaluate(args) => evaluate(args),
        Command::Rdrr { corpus, json } => rdrr(&corpus, json),
        Command::OieFilter { triples, output, stats } => oie_filter(&triples, output.as_deref(), stats),
        Command::BuildPrompts(args) => build_prompts(args),
        Command::ParseResponses { responses, output, options } => parse_responses(&responses, output.as_deref(), &options),
        Command::CompileGrammar { options, na, output } => compile_grammar(options, na, output.as_deref()),
        Command::EnumConfigs { groups, order, layers, blocks_per_group } => {
            enum_configs(groups, order, layers, blocks_per_group)
        }
        Command::Loss { prompts, logprobs, objective, reduction, output } => {
            let reduction = match reduction {
                ReductionArg::Sum => Reduction::Sum,
                ReductionArg::Mean => Reduction::Mean,
            };
            loss_cmd(&prompts, &logprobs, objective.into(), reduction, output.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(3)
        }
    }
}
