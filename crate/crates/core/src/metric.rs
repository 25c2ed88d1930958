//! Keystroke accounting for an emulated top-`cutoff` autocomplete list.
//!
//! For every token after the first, the predictor ranks the true token given
//! the tokens before it. Rank 1 costs one keystroke (tab), ranks
//! `2..=cutoff` cost `min(rank, len)` (down-arrows plus tab, or typing the
//! token when that is shorter) and anything further down is typed by hand.
//! The AE ratio is the fraction of manual keystrokes saved.

use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predict::{
    sample_continuation, Candidate, PredictError, Predictor, PredictorSession, SamplingConfig,
};
use crate::token::{KeystrokeUnit, TokenError, TokenId, Vocab};

pub const DEFAULT_CUTOFF: u32 = 10;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("token sequence is empty")]
    EmptySequence,
    #[error("predictor failed at position {position}: {source}")]
    Predictor {
        position: usize,
        #[source]
        source: PredictError,
    },
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error("keystrokes without autocomplete is zero")]
    ZeroDenominator,
    #[error("keystrokes with autocomplete ({with}) exceed keystrokes without ({without})")]
    InvalidTotals { with: u64, without: u64 },
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bucket {
    #[serde(rename = "FIRST_TOKEN")]
    FirstToken,
    #[serde(rename = "TOP1")]
    Top1,
    #[serde(rename = "TOP2_10")]
    Top2To10,
    #[serde(rename = "OUT")]
    Out,
}

impl Bucket {
    pub fn for_rank(rank: u32, cutoff: u32) -> Self {
        if rank == 1 {
            Bucket::Top1
        } else if rank <= cutoff {
            Bucket::Top2To10
        } else {
            Bucket::Out
        }
    }

    /// CSS class used by the HTML report.
    pub fn css_class(self) -> &'static str {
        match self {
            Bucket::FirstToken => "first",
            Bucket::Top1 => "top1",
            Bucket::Top2To10 => "top2_10",
            Bucket::Out => "out",
        }
    }
}

/// Whether the first token, which has no context to be predicted from, is
/// charged as typed by hand (`manual`) or not charged at all (`free`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FirstTokenMode {
    #[default]
    Manual,
    Free,
}

impl FromStr for FirstTokenMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "manual" => Ok(Self::Manual),
            "free" => Ok(Self::Free),
            other => Err(format!(
                "unknown first-token mode `{other}` (expected manual or free)"
            )),
        }
    }
}

/// Keystrokes needed to produce one token of decoded length `text_len` that
/// the predictor ranked at `rank`.
pub fn keystroke_charge(rank: u32, text_len: usize, cutoff: u32) -> u64 {
    debug_assert!(rank >= 1);
    let len = text_len as u64;
    if rank == 1 {
        1
    } else if rank <= cutoff {
        (rank as u64).min(len)
    } else {
        len
    }
}

/// Manual-typing cost of a token sequence. Special tags are not typed and
/// contribute nothing.
pub fn keystrokes_without(
    tokens: &[TokenId],
    vocab: &Vocab,
    unit: KeystrokeUnit,
) -> Result<u64, MetricError> {
    let mut total = 0u64;
    for &t in tokens {
        if vocab.is_special(t) {
            continue;
        }
        total += vocab.text_len(t, unit)? as u64;
    }
    Ok(total)
}

/// `(without - with) / without`.
pub fn ae_ratio(total_with: u64, total_without: u64) -> Result<f64, MetricError> {
    if total_without == 0 {
        return Err(MetricError::ZeroDenominator);
    }
    if total_with > total_without {
        return Err(MetricError::InvalidTotals {
            with: total_with,
            without: total_without,
        });
    }
    Ok((total_without - total_with) as f64 / total_without as f64)
}

/// AE ratio in tenths of a percent, rounded half up, computed exactly.
pub fn ae_percent_tenths(total_with: u64, total_without: u64) -> Result<u64, MetricError> {
    ae_ratio(total_with, total_without)?;
    let saved = (total_without - total_with) as u128;
    let without = total_without as u128;
    Ok(((saved * 2000 + without) / (2 * without)) as u64)
}

/// Formats tenths of a percent as `"56.8%"`.
pub fn format_tenths(tenths: u64) -> String {
    format!("{}.{}%", tenths / 10, tenths % 10)
}

/// One-decimal percentage of a ratio, rounded half up.
pub fn format_ratio(ratio: f64) -> String {
    // the epsilon absorbs binary representation error at exact halves
    let tenths = (ratio * 1000.0 + 0.5 + 1e-9).floor().max(0.0) as u64;
    format_tenths(tenths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenOutcome {
    /// Index into the evaluated token sequence.
    pub position: usize,
    pub token: TokenId,
    pub text: String,
    pub text_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob: Option<f64>,
    pub bucket: Bucket,
    pub keystrokes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Continuation {
    pub tokens: Vec<TokenId>,
    pub text: String,
}

/// Per-token replay of one evaluated text.
///
/// `stored_topk` and `continuations`, when captured, are aligned with
/// `outcomes`; the first-token slot holds an empty entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceTrace {
    pub source_id: String,
    pub cutoff: u32,
    pub first_token: FirstTokenMode,
    pub keystroke_unit: KeystrokeUnit,
    pub outcomes: Vec<TokenOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stored_topk: Option<Vec<Vec<Candidate>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuations: Option<Vec<Continuation>>,
}

impl SequenceTrace {
    pub fn total_with(&self) -> u64 {
        self.outcomes.iter().map(|o| o.keystrokes).sum()
    }

    pub fn total_without(&self) -> u64 {
        self.outcomes.iter().map(|o| o.text_len as u64).sum()
    }

    /// Concatenated text of all charged tokens.
    pub fn text(&self) -> String {
        self.outcomes.iter().map(|o| o.text.as_str()).collect()
    }

    /// Checks the per-outcome bucket and charge invariants.
    pub fn check(&self) -> Result<(), MetricError> {
        let bad = |msg: String| {
            Err(MetricError::MalformedTrace(format!(
                "{}: {msg}",
                self.source_id
            )))
        };
        if self.cutoff == 0 {
            return bad("cutoff must be >= 1".into());
        }
        for w in self.outcomes.windows(2) {
            if w[1].position <= w[0].position {
                return bad(format!("positions not increasing at {}", w[1].position));
            }
        }
        for o in &self.outcomes {
            if o.text_len == 0 {
                return bad(format!("empty token text at position {}", o.position));
            }
            let ok = match (o.bucket, o.rank) {
                (Bucket::FirstToken, None) => {
                    let expected = match self.first_token {
                        FirstTokenMode::Manual => o.text_len as u64,
                        FirstTokenMode::Free => 0,
                    };
                    o.position == 0 && o.keystrokes == expected
                }
                (b, Some(r)) if r >= 1 => {
                    b == Bucket::for_rank(r, self.cutoff)
                        && o.keystrokes == keystroke_charge(r, o.text_len, self.cutoff)
                }
                _ => false,
            };
            if !ok {
                return bad(format!(
                    "outcome at position {} violates bucket invariants",
                    o.position
                ));
            }
        }
        for (name, len) in [
            ("stored_topk", self.stored_topk.as_ref().map(Vec::len)),
            ("continuations", self.continuations.as_ref().map(Vec::len)),
        ] {
            if let Some(n) = len {
                if n != self.outcomes.len() {
                    return bad(format!(
                        "{name} has {n} entries for {} outcomes",
                        self.outcomes.len()
                    ));
                }
            }
        }
        Ok(())
    }
}

/// What to record while replaying a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub cutoff: u32,
    pub first_token: FirstTokenMode,
    pub keystroke_unit: KeystrokeUnit,
    /// Store the top-`k` list at every ranked position.
    pub capture_topk: Option<usize>,
    /// Sample and store a continuation at every ranked position. The seed is
    /// mixed with the position so positions draw independent streams.
    pub continuations: Option<SamplingConfig>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            cutoff: DEFAULT_CUTOFF,
            first_token: FirstTokenMode::Manual,
            keystroke_unit: KeystrokeUnit::Char,
            capture_topk: None,
            continuations: None,
        }
    }
}

fn position_seed(seed: u64, position: usize) -> u64 {
    seed ^ (position as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Replays `tokens` through `predictor`, charging every non-special token.
pub fn evaluate_sequence<P: Predictor + ?Sized>(
    predictor: &P,
    tokens: &[TokenId],
    vocab: &Vocab,
    source_id: &str,
    options: &EvalOptions,
) -> Result<SequenceTrace, MetricError> {
    if tokens.is_empty() {
        return Err(MetricError::EmptySequence);
    }
    if options.cutoff == 0 {
        return Err(MetricError::MalformedTrace("cutoff must be >= 1".into()));
    }
    let k = options.capture_topk.unwrap_or(1).max(1);
    let mut session = PredictorSession::new(predictor);
    let mut outcomes = Vec::new();
    let mut stored: Vec<Vec<Candidate>> = Vec::new();
    let mut continuations: Vec<Continuation> = Vec::new();

    for (position, &token) in tokens.iter().enumerate() {
        if !vocab.is_special(token) {
            let text = vocab.decode(token)?.into_owned();
            let text_len = vocab.text_len(token, options.keystroke_unit)?;
            if position == 0 {
                let keystrokes = match options.first_token {
                    FirstTokenMode::Manual => text_len as u64,
                    FirstTokenMode::Free => 0,
                };
                outcomes.push(TokenOutcome {
                    position,
                    token,
                    text,
                    text_len,
                    rank: None,
                    prob: None,
                    bucket: Bucket::FirstToken,
                    keystrokes,
                });
                stored.push(Vec::new());
                continuations.push(Continuation {
                    tokens: Vec::new(),
                    text: String::new(),
                });
            } else {
                let result = session
                    .rank_and_topk(token, k)
                    .map_err(|source| MetricError::Predictor { position, source })?;
                let rank = result.target_rank;
                outcomes.push(TokenOutcome {
                    position,
                    token,
                    text,
                    text_len,
                    rank: Some(rank),
                    prob: Some(result.target_prob),
                    bucket: Bucket::for_rank(rank, options.cutoff),
                    keystrokes: keystroke_charge(rank, text_len, options.cutoff),
                });
                if options.capture_topk.is_some() {
                    let mut topk = result.topk;
                    for c in &mut topk {
                        if c.text.is_none() {
                            c.text = Some(vocab.decode(c.id)?.into_owned());
                        }
                    }
                    stored.push(topk);
                }
                if let Some(cfg) = &options.continuations {
                    let cfg = SamplingConfig {
                        seed: position_seed(cfg.seed, position),
                        stop_token: cfg.stop_token.or(Some(vocab.tags().end_of_claim)),
                        ..cfg.clone()
                    };
                    let sampled = sample_continuation(predictor, &tokens[..position], &cfg)
                        .map_err(|source| MetricError::Predictor { position, source })?;
                    let text = vocab.decode_all(&sampled)?;
                    continuations.push(Continuation {
                        tokens: sampled,
                        text,
                    });
                }
            }
        }
        session.append(token);
    }

    Ok(SequenceTrace {
        source_id: source_id.to_owned(),
        cutoff: options.cutoff,
        first_token: options.first_token,
        keystroke_unit: options.keystroke_unit,
        outcomes,
        stored_topk: options.capture_topk.map(|_| stored),
        continuations: options.continuations.as_ref().map(|_| continuations),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketCounts {
    pub first_token: u64,
    pub top1: u64,
    pub top2_10: u64,
    pub out: u64,
}

impl BucketCounts {
    pub fn add(&mut self, bucket: Bucket) {
        match bucket {
            Bucket::FirstToken => self.first_token += 1,
            Bucket::Top1 => self.top1 += 1,
            Bucket::Top2To10 => self.top2_10 += 1,
            Bucket::Out => self.out += 1,
        }
    }

    pub fn ranked(&self) -> u64 {
        self.top1 + self.top2_10 + self.out
    }
}

/// Totals over a set of traces, in the column structure of the evaluation
/// tables: `total_with = keys_top10 + keys_out + keys_first`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeystrokeBreakdown {
    pub total_with: u64,
    pub total_without: u64,
    /// Keystrokes spent on tokens ranked within the cutoff.
    pub keys_top10: u64,
    /// Keystrokes spent on tokens ranked beyond the cutoff.
    pub keys_out: u64,
    /// Keystrokes spent on rank-1 tokens (a subset of `keys_top10`).
    pub keys_top1: u64,
    /// Keystrokes charged to first tokens.
    pub keys_first: u64,
    pub ae_ratio: f64,
    pub mrr: f64,
    pub bucket_counts: BucketCounts,
    pub sequences: u64,
}

impl KeystrokeBreakdown {
    /// AE percentage in tenths, from the integer totals.
    pub fn ae_tenths(&self) -> u64 {
        ae_percent_tenths(self.total_with, self.total_without).unwrap_or(0)
    }
}

/// Sums per-token charges. An evaluation with no typed characters reports an
/// AE ratio of 0.
pub fn aggregate(traces: &[SequenceTrace]) -> KeystrokeBreakdown {
    let mut b = KeystrokeBreakdown {
        total_with: 0,
        total_without: 0,
        keys_top10: 0,
        keys_out: 0,
        keys_top1: 0,
        keys_first: 0,
        ae_ratio: 0.0,
        mrr: 0.0,
        bucket_counts: BucketCounts::default(),
        sequences: traces.len() as u64,
    };
    let mut rr_sum = 0.0;
    for trace in traces {
        for o in &trace.outcomes {
            b.total_with += o.keystrokes;
            b.total_without += o.text_len as u64;
            b.bucket_counts.add(o.bucket);
            match o.bucket {
                Bucket::FirstToken => b.keys_first += o.keystrokes,
                Bucket::Top1 => {
                    b.keys_top1 += o.keystrokes;
                    b.keys_top10 += o.keystrokes;
                }
                Bucket::Top2To10 => b.keys_top10 += o.keystrokes,
                Bucket::Out => b.keys_out += o.keystrokes,
            }
            rr_sum += reciprocal_rank(o, trace.cutoff);
        }
    }
    b.ae_ratio = ae_ratio(b.total_with, b.total_without).unwrap_or(0.0);
    let ranked = b.bucket_counts.ranked();
    if ranked > 0 {
        b.mrr = rr_sum / ranked as f64;
    }
    b
}

fn reciprocal_rank(o: &TokenOutcome, cutoff: u32) -> f64 {
    match o.rank {
        Some(r) if r <= cutoff => 1.0 / r as f64,
        _ => 0.0,
    }
}

/// Mean reciprocal rank over all ranked positions, counting ranks beyond
/// `cutoff` as 0. First tokens are excluded.
pub fn mrr(traces: &[SequenceTrace], cutoff: u32) -> f64 {
    let (sum, n) = traces
        .iter()
        .flat_map(|t| t.outcomes.iter())
        .filter(|o| o.rank.is_some())
        .fold((0.0, 0u64), |(s, n), o| {
            (s + reciprocal_rank(o, cutoff), n + 1)
        });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Writes one JSON trace per line.
pub fn write_traces<W: Write>(mut out: W, traces: &[SequenceTrace]) -> Result<(), MetricError> {
    for t in traces {
        serde_json::to_writer(&mut out, t)
            .map_err(|e| MetricError::MalformedTrace(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads and checks a JSON Lines trace file.
pub fn read_traces<R: BufRead>(input: R) -> Result<Vec<SequenceTrace>, MetricError> {
    let mut traces = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let trace: SequenceTrace = serde_json::from_str(&line)
            .map_err(|e| MetricError::MalformedTrace(format!("line {}: {e}", n + 1)))?;
        trace.check()?;
        traces.push(trace);
    }
    Ok(traces)
}
