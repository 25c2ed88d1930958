use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use aeval_core::claims::{assemble_dataset, DatasetOptions, MultipleDependentPolicy, ReversalUnit};
use aeval_core::metric::{
    aggregate, evaluate_sequence, format_tenths, read_traces, write_traces, EvalOptions,
    FirstTokenMode, MetricError, DEFAULT_CUTOFF,
};
use aeval_core::predict::{
    fit_ngram, NgramModel, Predictor, RemoteConfig, RemotePredictor, SamplingConfig,
    ScriptedPredictor, DEFAULT_BACKOFF, PREDICTOR_URL_ENV,
};
use aeval_core::report::{
    dump_inspection, emit_tables, rank_histogram, render_saliency_html, TableFormat,
};
use aeval_core::token::{train_tokenizer, KeystrokeUnit, TokenId, Vocab};
use anyhow::{anyhow, bail, Context};
use clap::{ArgGroup, Args, Parser, Subcommand};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

mod input;

use input::{read_claims, read_text, Sequence};

#[derive(Parser, Debug)]
#[command(
    name = "aeval",
    version,
    about = "Autocomplete-effectiveness evaluation of next-token predictors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a byte-level BPE vocabulary
    TrainTokenizer(TrainTokenizerArgs),
    /// Fit an n-gram model with stupid backoff
    FitNgram(FitNgramArgs),
    /// Turn claim sets into a training dataset
    ExpandClaims(ExpandClaimsArgs),
    /// Rank every token of a text set and write keystroke traces
    Evaluate(EvaluateArgs),
    /// Tables, rank histograms and saliency pages from traces
    Report(ReportArgs),
    /// Per-position inspection JSON for traces captured with --capture-topk
    Dump(DumpArgs),
}

/// Text inputs shared by the training and evaluation commands.
#[derive(Args, Debug)]
struct TextInputs {
    /// Claim file: JSONL dataset or claim documents, or a plain-text claim set (repeatable)
    #[arg(long, value_name = "FILE")]
    claims: Vec<PathBuf>,
    /// Plain text file evaluated as one sequence (repeatable)
    #[arg(long, value_name = "FILE")]
    text: Vec<PathBuf>,
}

impl TextInputs {
    fn paths(&self) -> Vec<&Path> {
        self.claims
            .iter()
            .chain(&self.text)
            .map(PathBuf::as_path)
            .collect()
    }

    fn load(&self) -> anyhow::Result<Vec<Sequence>> {
        if self.claims.is_empty() && self.text.is_empty() {
            bail!("no inputs: give --claims or --text");
        }
        let mut out = Vec::new();
        for p in &self.claims {
            out.extend(read_claims(p)?);
        }
        for p in &self.text {
            out.push(read_text(p)?);
        }
        Ok(out)
    }
}

#[derive(Args, Debug)]
struct TrainTokenizerArgs {
    #[command(flatten)]
    inputs: TextInputs,
    /// Target vocabulary size, including the 256 bytes and the special tags
    #[arg(long, default_value_t = 50_400)]
    vocab_size: usize,
    /// Output vocabulary JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitNgramArgs {
    #[command(flatten)]
    inputs: TextInputs,
    /// Vocabulary JSON [default: byte-level vocabulary]
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// N-gram order
    #[arg(long, default_value_t = 4)]
    order: usize,
    /// Backoff factor
    #[arg(long, default_value_t = DEFAULT_BACKOFF)]
    backoff: f64,
    /// Output model JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExpandClaimsArgs {
    /// Claim document: .jsonl/.json claim documents or a plain-text claim set (repeatable)
    #[arg(long = "in", value_name = "FILE", required = true)]
    inputs: Vec<PathBuf>,
    /// Output dataset (JSON Lines)
    #[arg(long)]
    out: PathBuf,
    /// Manifest path [default: <out>.manifest.json]
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Emit each claim alone instead of parent<|dep|>child pairs
    #[arg(long)]
    no_expand: bool,
    /// Append a reversed copy of every record
    #[arg(long)]
    reverse: bool,
    /// Reversal unit: token or char
    #[arg(long, default_value = "token")]
    reverse_unit: ReversalUnit,
    /// Wrap records in <|start_of_claim|> ... <|end_of_claim|>
    #[arg(long)]
    tags: bool,
    /// Multiple-dependent claims: skip with a warning, or fail the document
    #[arg(long, default_value = "skip")]
    md_policy: MultipleDependentPolicy,
    /// Vocabulary used for token reversal [default: byte-level vocabulary]
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("predictor").args(["ngram", "predictor_url", "scripted"]).multiple(false)))]
struct EvaluateArgs {
    #[command(flatten)]
    inputs: TextInputs,
    /// Vocabulary JSON [default: byte-level vocabulary]
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// N-gram model JSON
    #[arg(long, value_name = "FILE")]
    ngram: Option<PathBuf>,
    /// Remote predictor endpoint [env: AE_PREDICTOR_URL]
    #[arg(long, value_name = "URL")]
    predictor_url: Option<String>,
    /// JSON array of ranks, one per position after the first
    #[arg(long, value_name = "FILE")]
    scripted: Option<PathBuf>,
    /// Remote request timeout in seconds
    #[arg(long, default_value_t = 30)]
    timeout: u64,
    /// Remote retries after transport errors and 5xx replies
    #[arg(long, default_value_t = 2)]
    retries: u32,
    /// Rank cutoff of the autocomplete list
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: u32,
    /// First-token charge: manual (typed) or free
    #[arg(long, default_value = "manual")]
    first_token: FirstTokenMode,
    /// Keystroke unit: char or byte
    #[arg(long, default_value = "char")]
    keystroke_unit: KeystrokeUnit,
    /// Store the top-K list at each position (needed by `dump` and tooltips)
    #[arg(long, value_name = "K")]
    capture_topk: Option<usize>,
    /// Sample a continuation at each position
    #[arg(long)]
    continuations: bool,
    /// Nucleus sampling mass
    #[arg(long, default_value_t = 0.9)]
    top_p: f64,
    /// Sampling temperature
    #[arg(long, default_value_t = 0.75)]
    temperature: f64,
    /// Continuation length limit in tokens
    #[arg(long, default_value_t = 128)]
    max_tokens: usize,
    /// Take the top token instead of sampling
    #[arg(long)]
    greedy: bool,
    /// Sampling seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Output traces (JSON Lines)
    #[arg(long)]
    out: PathBuf,
    /// Write the keystroke breakdown as JSON
    #[arg(long)]
    breakdown: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Trace file; each becomes one table row (repeatable)
    #[arg(long, required = true, value_name = "FILE")]
    traces: Vec<PathBuf>,
    /// Row label per trace file, in order [default: file stem]
    #[arg(long)]
    label: Vec<String>,
    /// Comparison table output
    #[arg(long, value_name = "FILE")]
    tables: Option<PathBuf>,
    /// Table format: csv, json or text [default: from --tables extension, else csv]
    #[arg(long)]
    format: Option<TableFormat>,
    /// Directory for one saliency page per trace
    #[arg(long, value_name = "DIR")]
    html: Option<PathBuf>,
    /// Per-position rank histogram CSV
    #[arg(long, value_name = "FILE")]
    histogram: Option<PathBuf>,
    /// Last position in the histogram [default: all positions]
    #[arg(long)]
    max_position: Option<usize>,
    /// Vocabulary used to label top-k entries without text
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DumpArgs {
    /// Trace file (repeatable)
    #[arg(long, required = true, value_name = "FILE")]
    traces: Vec<PathBuf>,
    /// Output directory, one JSON file per trace
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Vocabulary used to label top-k entries without text
    #[arg(long)]
    vocab: Option<PathBuf>,
}

/// Failure classes, mapped to exit codes 2 and 3. Usage errors (1) come from
/// argument parsing.
enum Failure {
    Data(anyhow::Error),
    Predictor(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    log::info!("aeval {} {:?}", env!("CARGO_PKG_VERSION"), cli.command);

    let result = match cli.command {
        Command::TrainTokenizer(a) => cmd_train_tokenizer(a),
        Command::FitNgram(a) => cmd_fit_ngram(a),
        Command::ExpandClaims(a) => cmd_expand_claims(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
        Command::Dump(a) => cmd_dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Predictor(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

/// Logs the SHA-256 of every input so a run can be matched to its data.
fn log_digests<'a>(paths: impl IntoIterator<Item = &'a Path>) -> anyhow::Result<()> {
    for p in paths {
        let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        log::info!(
            "input {} sha256 {}",
            p.display(),
            hex::encode(Sha256::digest(&bytes))
        );
    }
    Ok(())
}

fn load_vocab(path: Option<&Path>) -> anyhow::Result<Vocab> {
    match path {
        Some(p) => Vocab::load(p).with_context(|| format!("loading vocabulary {}", p.display())),
        None => Ok(Vocab::byte_level()),
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    let mut w = create(path)?;
    w.write_all(contents.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn encode_all(seqs: &[Sequence], vocab: &Vocab) -> anyhow::Result<Vec<Vec<TokenId>>> {
    seqs.iter()
        .map(|s| match &s.tokens {
            Some(t) => {
                if let Some(bad) = t.iter().find(|t| !vocab.contains(**t)) {
                    bail!("{}: token {} is outside the vocabulary", s.id, bad.0);
                }
                Ok(t.clone())
            }
            None => vocab
                .encode(&s.text)
                .with_context(|| format!("encoding {}", s.id)),
        })
        .collect()
}

fn cmd_train_tokenizer(a: TrainTokenizerArgs) -> Outcome {
    log_digests(a.inputs.paths())?;
    let seqs = a.inputs.load()?;
    let vocab = train_tokenizer(seqs.iter().map(|s| s.text.as_str()), a.vocab_size)
        .map_err(anyhow::Error::from)?;
    write_file(&a.out, &vocab.to_json())?;
    println!(
        "vocabulary of {} tokens written to {}",
        vocab.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_fit_ngram(a: FitNgramArgs) -> Outcome {
    log_digests(a.inputs.paths().into_iter().chain(a.vocab.as_deref()))?;
    let vocab = load_vocab(a.vocab.as_deref())?;
    let seqs = encode_all(&a.inputs.load()?, &vocab)?;
    let model = fit_ngram(&seqs, a.order, a.backoff, vocab.len()).map_err(anyhow::Error::from)?;
    write_file(&a.out, &model.to_json())?;
    println!(
        "order-{} model over {} sequences written to {}",
        a.order,
        seqs.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_expand_claims(a: ExpandClaimsArgs) -> Outcome {
    log_digests(
        a.inputs
            .iter()
            .map(PathBuf::as_path)
            .chain(a.vocab.as_deref()),
    )?;
    let vocab = load_vocab(a.vocab.as_deref())?;
    let options = DatasetOptions {
        expand: !a.no_expand,
        reverse: a.reverse,
        reverse_unit: a.reverse_unit,
        tags: a.tags,
        policy: a.md_policy,
    };
    let out = create(&a.out)?;
    let manifest =
        assemble_dataset(&a.inputs, &options, &vocab, out).map_err(anyhow::Error::from)?;
    for e in &manifest.errors {
        log::error!("{}: {}", e.input, e.error);
    }
    let manifest_path = a.manifest.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".manifest.json");
        PathBuf::from(p)
    });
    let mut json = serde_json::to_string_pretty(&manifest).map_err(anyhow::Error::from)?;
    json.push('\n');
    write_file(&manifest_path, &json)?;
    println!(
        "{} records from {} documents ({} multiple-dependent claims skipped, {} errors)",
        manifest.records,
        manifest.documents,
        manifest.skipped_multiple_dependent.len(),
        manifest.errors.len()
    );
    if manifest.all_failed() {
        return Err(anyhow!("no input could be processed").into());
    }
    Ok(())
}

fn build_predictor(a: &EvaluateArgs, vocab: &Vocab) -> Result<Box<dyn Predictor>, Failure> {
    if let Some(path) = &a.ngram {
        let model = NgramModel::load(path)
            .map_err(|e| anyhow!(e).context(format!("loading n-gram model {}", path.display())))?;
        if model.vocab_size() != vocab.len() {
            return Err(anyhow!(
                "n-gram model covers {} tokens but the vocabulary has {}",
                model.vocab_size(),
                vocab.len()
            )
            .into());
        }
        return Ok(Box::new(model));
    }
    if let Some(path) = &a.scripted {
        let raw =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let ranks: Vec<u32> = serde_json::from_str(&raw)
            .with_context(|| format!("{}: expected a JSON array of ranks", path.display()))?;
        let p = ScriptedPredictor::new(ranks, vocab.len()).map_err(anyhow::Error::from)?;
        return Ok(Box::new(p));
    }
    let url = a
        .predictor_url
        .clone()
        .or_else(|| std::env::var(PREDICTOR_URL_ENV).ok().filter(|u| !u.is_empty()))
        .ok_or_else(|| anyhow!("no predictor: give --ngram, --predictor-url (or {PREDICTOR_URL_ENV}) or --scripted"))?;
    let config = RemoteConfig {
        timeout: Duration::from_secs(a.timeout),
        retries: a.retries,
        ..RemoteConfig::new(url)
    };
    log::info!("remote predictor {}", config.endpoint);
    Ok(Box::new(RemotePredictor::new(config, vocab.len())))
}

fn cmd_evaluate(a: EvaluateArgs) -> Outcome {
    let mut inputs = a.inputs.paths();
    inputs.extend(a.vocab.as_deref());
    inputs.extend(a.ngram.as_deref());
    inputs.extend(a.scripted.as_deref());
    log_digests(inputs)?;

    let vocab = load_vocab(a.vocab.as_deref())?;
    let predictor = build_predictor(&a, &vocab)?;
    let seqs = a.inputs.load()?;
    let tokens = encode_all(&seqs, &vocab)?;
    let options = EvalOptions {
        cutoff: a.cutoff,
        first_token: a.first_token,
        keystroke_unit: a.keystroke_unit,
        capture_topk: a.capture_topk,
        continuations: a.continuations.then(|| SamplingConfig {
            max_tokens: a.max_tokens,
            top_p: a.top_p,
            temperature: a.temperature,
            seed: a.seed,
            greedy: a.greedy,
            stop_token: Some(vocab.tags().end_of_claim),
        }),
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.workers.max(1))
        .build()
        .map_err(anyhow::Error::from)?;
    let results: Vec<Result<_, MetricError>> = pool.install(|| {
        seqs.par_iter()
            .zip(tokens.par_iter())
            .map(|(s, t)| evaluate_sequence(predictor.as_ref(), t, &vocab, &s.id, &options))
            .collect()
    });
    let mut traces = Vec::with_capacity(results.len());
    for (s, r) in seqs.iter().zip(results) {
        match r {
            Ok(t) => traces.push(t),
            Err(e @ MetricError::Predictor { .. }) => {
                return Err(Failure::Predictor(
                    anyhow!(e).context(format!("evaluating {}", s.id)),
                ))
            }
            Err(e) => return Err(anyhow!(e).context(format!("evaluating {}", s.id)).into()),
        }
    }

    write_traces(create(&a.out)?, &traces).map_err(anyhow::Error::from)?;
    let b = aggregate(&traces);
    if let Some(path) = &a.breakdown {
        let mut json = serde_json::to_string_pretty(&b).map_err(anyhow::Error::from)?;
        json.push('\n');
        write_file(path, &json)?;
    }
    println!(
        "AE ratio: {} (total w/ {}, w/o {}, MRR {:.4}, {} sequences)",
        format_tenths(b.ae_tenths()),
        b.total_with,
        b.total_without,
        b.mrr,
        b.sequences
    );
    Ok(())
}

fn load_traces(path: &Path) -> anyhow::Result<Vec<aeval_core::SequenceTrace>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_traces(BufReader::new(f)).with_context(|| format!("reading traces {}", path.display()))
}

fn file_name_for(index: usize, id: &str, ext: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .take(80)
        .collect();
    format!("{index:04}_{safe}.{ext}")
}

fn cmd_report(a: ReportArgs) -> Outcome {
    log_digests(
        a.traces
            .iter()
            .map(PathBuf::as_path)
            .chain(a.vocab.as_deref()),
    )?;
    if !a.label.is_empty() && a.label.len() != a.traces.len() {
        return Err(anyhow!(
            "{} labels given for {} trace files",
            a.label.len(),
            a.traces.len()
        )
        .into());
    }
    let vocab = a
        .vocab
        .as_deref()
        .map(|p| load_vocab(Some(p)))
        .transpose()?;
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for (i, path) in a.traces.iter().enumerate() {
        let traces = load_traces(path)?;
        if traces.is_empty() {
            return Err(anyhow!("{} contains no traces", path.display()).into());
        }
        let label = a.label.get(i).cloned().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
        rows.push((label, aggregate(&traces)));
        all.push(traces);
    }

    let format =
        a.format.unwrap_or_else(
            || match a.tables.as_ref().and_then(|p| p.extension()?.to_str()) {
                Some("json") => TableFormat::Json,
                Some("txt") => TableFormat::Text,
                _ if a.tables.is_none() => TableFormat::Text,
                _ => TableFormat::Csv,
            },
        );
    let table = emit_tables(&rows, format).map_err(anyhow::Error::from)?;
    match &a.tables {
        Some(p) => write_file(p, &table)?,
        None => print!("{table}"),
    }

    if let Some(dir) = &a.html {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut n = 0;
        for t in all.iter().flatten() {
            write_file(
                &dir.join(file_name_for(n, &t.source_id, "html")),
                &render_saliency_html(t, vocab.as_ref()),
            )?;
            n += 1;
        }
        log::info!("{n} saliency pages written to {}", dir.display());
    }
    if let Some(path) = &a.histogram {
        let flat: Vec<_> = all.into_iter().flatten().collect();
        write_file(path, &rank_histogram(&flat, a.max_position).to_csv())?;
    }
    Ok(())
}

fn cmd_dump(a: DumpArgs) -> Outcome {
    log_digests(
        a.traces
            .iter()
            .map(PathBuf::as_path)
            .chain(a.vocab.as_deref()),
    )?;
    let vocab = a
        .vocab
        .as_deref()
        .map(|p| load_vocab(Some(p)))
        .transpose()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut n = 0;
    for path in &a.traces {
        for t in load_traces(path)? {
            let dump = dump_inspection(&t, vocab.as_ref()).map_err(anyhow::Error::from)?;
            let mut json = serde_json::to_string_pretty(&dump).map_err(anyhow::Error::from)?;
            json.push('\n');
            write_file(&a.out.join(file_name_for(n, &t.source_id, "json")), &json)?;
            n += 1;
        }
    }
    println!("{n} inspection dumps written to {}", a.out.display());
    Ok(())
}
