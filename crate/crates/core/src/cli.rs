//! Command-line entry point wiring the pipeline stages together.
//!
//! Every command prints one JSON summary line to stdout. Failures print one
//! JSON line to stderr and exit 1; usage errors exit 2.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bertscore::{aggregate, score_pair, EmbeddingTable, ScoreReport};
use crate::checkpoint::{load_parameters, load_pretrained};
use crate::corpus::{
    assign_split, compute_stats, make_record, read_corpus, read_jsonl, write_corpus, write_records, CorpusRecord, Split,
    SplitRatios,
};
use crate::error::{Error, Result};
use crate::generate::{beam_search_hypothesis, greedy_search, GenConfig, GeneratedSummary, ModelScorer};
use crate::normalize::{log_rejection, normalize_document, CleanDocument, NormalizationRules, RawDocument};
use crate::optimizer::OptimConfig;
use crate::params::{ModelConfig, Parameters};
use crate::tokenizer::{train_bpe, EncodeOptions, TokenizerModel};
use crate::trainer::{build_examples, Trainer, TrainingConfig, BEST_FILE, PARAMS_FILE};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub ratios: SplitRatios,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { vocab_size: 8000 }
    }
}

/// Settings for every stage, loadable from a JSON file. Command-line flags
/// override whatever the file says.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub normalization_rules: Option<PathBuf>,
    pub split: SplitConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub optimizer: OptimConfig,
    pub generation: GenConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::invalid("config", e.to_string()))
    }
}

#[derive(Parser)]
#[command(name = "persum", version, about = "Long-document Persian abstractive summarization pipeline")]
struct Cli {
    /// JSON pipeline configuration; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean raw documents and drop non-Persian or empty ones.
    Normalize(NormalizeArgs),
    /// Turn cleaned documents into article/summary records.
    BuildCorpus(InOut),
    /// Hash-partition a corpus into train, validation and test files.
    Split(SplitArgs),
    /// Length statistics of a corpus.
    Stats(StatsArgs),
    /// Learn a BPE vocabulary from a corpus.
    TrainTokenizer(TrainTokenizerArgs),
    /// Fine-tune the summarization model.
    Train(TrainArgs),
    /// Summarize every record of a corpus file.
    Generate(GenerateArgs),
    /// Score candidate summaries against references.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct InOut {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct NormalizeArgs {
    #[command(flatten)]
    io: InOut,
    /// Normalization rule file replacing the built-in tables.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Where to log rejected documents.
    #[arg(long)]
    rejections: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    /// Train, validation and test fractions [default: 0.9,0.05,0.05]
    #[arg(long)]
    ratios: Option<SplitRatios>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct TrainTokenizerArgs {
    #[command(flatten)]
    io: InOut,
    /// [default: 8000]
    #[arg(long)]
    vocab_size: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    validation: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    output: PathBuf,
    /// Start from a parameter file instead of random weights.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// [default: 0.0001]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// [default: 1]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 8192]
    #[arg(long)]
    max_input_len: Option<usize>,
    /// [default: 512]
    #[arg(long)]
    max_output_len: Option<usize>,
    /// [default: 4000]
    #[arg(long)]
    eval_steps: Option<usize>,
    /// Recompute layer activations during backward [default: true]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    gradient_checkpointing: Option<bool>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// [default: 3]
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    io: InOut,
    /// Checkpoint directory or parameter file.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// [default: 2]
    #[arg(long)]
    beam_size: Option<usize>,
    /// [default: 512]
    #[arg(long)]
    max_output_len: Option<usize>,
    /// [default: 8192]
    #[arg(long)]
    max_input_len: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    length_penalty: Option<f64>,
    /// Greedy decoding instead of beam search.
    #[arg(long)]
    greedy: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Records with `id` and `summary` fields.
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    references: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Embed tokens with this checkpoint's encoder.
    #[arg(long, required_unless_present = "embeddings", conflicts_with = "embeddings")]
    checkpoint: Option<PathBuf>,
    /// External embedding file (dimension line, then token<TAB>floats).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Optional per-pair score file.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_command_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_command_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let rendered = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = sink.write_all(rendered.as_bytes());
            return code;
        }
    };
    let result = cli
        .config
        .as_deref()
        .map(PipelineConfig::load)
        .unwrap_or_else(|| Ok(PipelineConfig::default()))
        .and_then(|config| dispatch(cli.command, config));
    match result {
        Ok(summary) => {
            let _ = writeln!(out, "{summary}");
            0
        }
        Err(e) => {
            let _ = writeln!(err, "{}", error_record(&e));
            1
        }
    }
}

fn error_record(e: &Error) -> Value {
    match e {
        Error::InvalidConfig { field, message } => json!({ "error": "invalid_config", "field": field, "message": message }),
        other => json!({ "error": error_kind(other), "message": other.to_string() }),
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidConfig { .. } => "invalid_config",
        Error::Parse { .. } => "parse",
        Error::Io { .. } => "io",
        Error::Shape(_) => "shape",
        Error::TooLong { .. } => "too_long",
        Error::NonFinite { .. } | Error::NonFiniteGradient(_) | Error::TrainingDiverged { .. } => "non_finite",
        Error::UnknownId { .. } => "unknown_id",
        Error::DuplicateId(_) => "duplicate_id",
        Error::Empty(_) => "empty",
        Error::ZeroNorm => "zero_norm",
        Error::MissingEmbedding(_) => "missing_embedding",
        Error::Checkpoint(_) => "checkpoint",
        Error::MissingReference(_) => "missing_reference",
    }
}

fn dispatch(command: Command, config: PipelineConfig) -> Result<Value> {
    match command {
        Command::Normalize(args) => normalize(args, &config),
        Command::BuildCorpus(args) => build_corpus(args),
        Command::Split(args) => split(args, &config),
        Command::Stats(args) => stats(args),
        Command::TrainTokenizer(args) => train_tokenizer(args, &config),
        Command::Train(args) => train(args, config),
        Command::Generate(args) => generate(args, config),
        Command::Evaluate(args) => evaluate(args, &config),
    }
}

fn read_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file), path)
}

fn write_file<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_records(records, &mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn normalize(args: NormalizeArgs, config: &PipelineConfig) -> Result<Value> {
    let rules = match args.rules.as_ref().or(config.normalization_rules.as_ref()) {
        Some(path) => NormalizationRules::load(path)?,
        None => NormalizationRules::default(),
    };
    let docs: Vec<RawDocument> = read_file(&args.io.input)?;
    let results: Vec<_> = docs.par_iter().map(|d| normalize_document(d, &rules)).collect();
    let mut kept: Vec<CleanDocument> = Vec::new();
    let mut rejected = Vec::new();
    let mut stripped = 0;
    for r in results {
        match r {
            Ok(n) => {
                stripped += usize::from(n.front_matter.marker_found);
                kept.push(n.document);
            }
            Err(rej) => rejected.push(rej),
        }
    }
    write_file(&args.io.output, &kept)?;
    if let Some(path) = &args.rejections {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for rej in &rejected {
            log_rejection(&mut w, rej).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(json!({
        "command": "normalize",
        "documents": docs.len(),
        "kept": kept.len(),
        "rejected": rejected.len(),
        "front_matter_stripped": stripped,
        "output": args.io.output,
    }))
}

fn build_corpus(args: InOut) -> Result<Value> {
    let docs: Vec<CleanDocument> = read_file(&args.input)?;
    let mut records = Vec::with_capacity(docs.len());
    let mut skipped = Vec::new();
    for doc in &docs {
        match make_record(doc) {
            Ok(r) => records.push(r),
            Err(_) => skipped.push(doc.id.clone()),
        }
    }
    write_corpus(&records, &args.output)?;
    Ok(json!({
        "command": "build-corpus",
        "records": records.len(),
        "skipped": skipped,
        "output": args.output,
    }))
}

fn split(args: SplitArgs, config: &PipelineConfig) -> Result<Value> {
    let ratios = args.ratios.unwrap_or(config.split.ratios);
    ratios.validate()?;
    let seed = args.seed.unwrap_or(config.split.seed);
    let records = read_corpus(&args.input)?;
    let mut parts: HashMap<Split, Vec<CorpusRecord>> = HashMap::new();
    for r in records {
        parts.entry(assign_split(&r.id, seed, &ratios)).or_default().push(r);
    }
    fs::create_dir_all(&args.output_dir).map_err(|e| Error::io(&args.output_dir, e))?;
    let mut counts = serde_json::Map::new();
    let mut files = serde_json::Map::new();
    for split in Split::ALL {
        let path = args.output_dir.join(format!("{}.jsonl", split.name()));
        let part = parts.remove(&split).unwrap_or_default();
        write_corpus(&part, &path)?;
        counts.insert(split.name().into(), part.len().into());
        files.insert(split.name().into(), json!(path));
    }
    Ok(json!({ "command": "split", "seed": seed, "counts": counts, "files": files }))
}

fn stats(args: StatsArgs) -> Result<Value> {
    let records = read_corpus(&args.input)?;
    let stats = compute_stats(&records)?;
    Ok(json!({ "command": "stats", "input": args.input, "stats": stats }))
}

fn train_tokenizer(args: TrainTokenizerArgs, config: &PipelineConfig) -> Result<Value> {
    let vocab_size = args.vocab_size.unwrap_or(config.tokenizer.vocab_size);
    let records = read_corpus(&args.io.input)?;
    let texts = records.iter().flat_map(|r| [r.article.as_str(), r.summary.as_str()]);
    let model = train_bpe(texts, vocab_size)?;
    model.save(&args.io.output)?;
    Ok(json!({
        "command": "train-tokenizer",
        "vocab_size": model.vocab_size(),
        "merges": model.merges().count(),
        "output": args.io.output,
    }))
}

fn train(args: TrainArgs, config: PipelineConfig) -> Result<Value> {
    let tokenizer = TokenizerModel::load(&args.tokenizer)?;
    let mut tcfg = config.training;
    if let Some(v) = args.learning_rate {
        tcfg.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        tcfg.batch_size = v;
    }
    if let Some(v) = args.max_input_len {
        tcfg.max_input_len = v;
    }
    if let Some(v) = args.max_output_len {
        tcfg.max_output_len = v;
    }
    if let Some(v) = args.eval_steps {
        tcfg.eval_steps = v;
    }
    if let Some(v) = args.gradient_checkpointing {
        tcfg.checkpointing = v;
    }
    if let Some(v) = args.max_steps {
        tcfg.max_steps = v;
    }
    if let Some(v) = args.patience {
        tcfg.patience = v;
    }
    if let Some(v) = args.seed {
        tcfg.seed = v;
    }
    tcfg.validate()?;
    let model = ModelConfig {
        vocab_size: tokenizer.vocab_size(),
        max_enc_len: tcfg.max_input_len,
        max_dec_len: tcfg.max_output_len,
        ..config.model
    };
    model.validate()?;
    let train_records = read_corpus(&args.train)?;
    let val_records = read_corpus(&args.validation)?;
    let train_set = build_examples(&tokenizer, &train_records, &tcfg);
    let val_set = build_examples(&tokenizer, &val_records, &tcfg);

    let mut trainer = if args.resume {
        let mut t = Trainer::resume(&args.output)?;
        if t.model_config().vocab_size != tokenizer.vocab_size() {
            return Err(Error::Checkpoint("checkpoint vocabulary differs from the tokenizer".into()));
        }
        t.set_max_steps(tcfg.max_steps);
        t
    } else {
        let params = match &args.init {
            Some(path) => load_pretrained(path, &model)?,
            None => Parameters::init(&model, tcfg.seed),
        };
        Trainer::new(model, params, tcfg, config.optimizer)?.with_checkpoint_dir(&args.output)?
    };
    trainer.run(&train_set, &val_set)?;
    let step = trainer.step();
    let final_loss = trainer.log().losses.last().copied();
    let (best, log) = trainer.finish();
    Ok(json!({
        "command": "train",
        "steps": step,
        "final_loss": final_loss,
        "evaluations": log.evals,
        "best_step": best.step,
        "best_val_loss": best.val_loss,
        "stop_reason": log.stop,
        "output": args.output,
    }))
}

/// Best parameters in a checkpoint directory, or the file itself.
fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Parameters)> {
    if path.is_dir() {
        let best = path.join(BEST_FILE);
        load_parameters(&if best.exists() { best } else { path.join(PARAMS_FILE) })
    } else {
        load_parameters(path)
    }
}

fn generate(args: GenerateArgs, config: PipelineConfig) -> Result<Value> {
    let tokenizer = TokenizerModel::load(&args.tokenizer)?;
    let (model, params) = load_checkpoint(&args.checkpoint)?;
    if model.vocab_size != tokenizer.vocab_size() {
        return Err(Error::Checkpoint("checkpoint vocabulary differs from the tokenizer".into()));
    }
    let mut gcfg = config.generation;
    if let Some(v) = args.beam_size {
        gcfg.beam_size = v;
    }
    if let Some(v) = args.max_output_len {
        gcfg.max_output_len = v;
    }
    if let Some(v) = args.length_penalty {
        gcfg.length_penalty = v;
    }
    gcfg.validate()?;
    let max_input_len = args.max_input_len.unwrap_or(config.training.max_input_len).min(model.max_enc_len);
    if max_input_len < 2 {
        return Err(Error::invalid("max_input_len", "must leave room for SOS and EOS"));
    }
    let records = read_corpus(&args.io.input)?;
    let options = EncodeOptions::new(max_input_len);
    let max_len = gcfg.max_output_len.min(model.max_dec_len);
    let outputs: Vec<GeneratedSummary> = records
        .par_iter()
        .map(|r| {
            let source = tokenizer.encode(&r.article, &options);
            let hyp = if args.greedy {
                greedy_search(&ModelScorer::new(&params, &model, &source)?, max_len)?
            } else {
                beam_search_hypothesis(&params, &model, &source, &gcfg)?
            };
            Ok(GeneratedSummary {
                id: r.id.clone(),
                summary: tokenizer.decode(&hyp.tokens)?,
                token_count: hyp.tokens.len(),
                score: hyp.score,
            })
        })
        .collect::<Result<_>>()?;
    write_file(&args.io.output, &outputs)?;
    let tokens: usize = outputs.iter().map(|o| o.token_count).sum();
    Ok(json!({
        "command": "generate",
        "documents": outputs.len(),
        "decoder": if args.greedy { "greedy".to_string() } else { format!("beam-{}", gcfg.beam_size) },
        "generated_tokens": tokens,
        "output": args.io.output,
    }))
}

#[derive(Deserialize)]
struct SummaryRecord {
    id: String,
    summary: String,
}

#[derive(Serialize)]
struct PairScore<'a> {
    id: &'a str,
    #[serde(flatten)]
    score: ScoreReport,
}

fn evaluate(args: EvaluateArgs, config: &PipelineConfig) -> Result<Value> {
    let tokenizer = TokenizerModel::load(&args.tokenizer)?;
    let candidates: Vec<SummaryRecord> = read_file(&args.candidates)?;
    let references: Vec<SummaryRecord> = read_file(&args.references)?;
    if candidates.is_empty() {
        return Err(Error::Empty("candidate file"));
    }
    let mut by_id: HashMap<&str, &str> = HashMap::new();
    for r in &references {
        if by_id.insert(&r.id, &r.summary).is_some() {
            return Err(Error::DuplicateId(r.id.clone()));
        }
    }
    let mut texts: Vec<(&str, &str)> = Vec::with_capacity(candidates.len());
    for c in &candidates {
        let reference = by_id
            .get(c.id.as_str())
            .ok_or_else(|| Error::MissingReference(c.id.clone()))?;
        texts.push((&c.summary, reference));
    }

    let (encodings, emb) = match (&args.checkpoint, &args.embeddings) {
        (Some(path), _) => {
            let (model, params) = load_checkpoint(path)?;
            if model.vocab_size != tokenizer.vocab_size() {
                return Err(Error::Checkpoint("checkpoint vocabulary differs from the tokenizer".into()));
            }
            let options = EncodeOptions::new(config.training.max_input_len.min(model.max_enc_len));
            let encodings: Vec<_> = texts
                .iter()
                .map(|(c, r)| (tokenizer.encode(c, &options), tokenizer.encode(r, &options)))
                .collect();
            let docs: Vec<_> = encodings.iter().flat_map(|(c, r)| [c, r]).collect();
            let emb = EmbeddingTable::from_encoder(&params, &model, docs)?;
            (encodings, emb)
        }
        (None, Some(path)) => {
            let emb = EmbeddingTable::load(path, &tokenizer)?;
            let options = EncodeOptions::new(usize::MAX);
            let encodings = texts
                .iter()
                .map(|(c, r)| (tokenizer.encode(c, &options), tokenizer.encode(r, &options)))
                .collect();
            (encodings, emb)
        }
        (None, None) => return Err(Error::invalid("checkpoint", "either --checkpoint or --embeddings is required")),
    };

    // An empty generated summary scores zero rather than failing the run.
    let mut empty = 0;
    let mut reports = Vec::with_capacity(encodings.len());
    for (c, r) in &encodings {
        match score_pair(c.real_ids(), r.real_ids(), &emb) {
            Ok(s) => reports.push(s),
            Err(Error::Empty("candidate")) => {
                empty += 1;
                reports.push(ScoreReport::new(0.0, 0.0));
            }
            Err(e) => return Err(e),
        }
    }
    let corpus = aggregate(&reports)?;
    if let Some(path) = &args.output {
        let rows: Vec<PairScore> = candidates.iter().zip(&reports).map(|(c, s)| PairScore { id: &c.id, score: *s }).collect();
        write_file(path, &rows)?;
    }
    Ok(json!({
        "command": "evaluate",
        "pairs": reports.len(),
        "empty_candidates": empty,
        "embedding_source": emb.source(),
        "precision": corpus.precision,
        "recall": corpus.recall,
        "f1": corpus.f1,
    }))
}
