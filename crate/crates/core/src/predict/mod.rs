//! Next-token predictors.
//!
//! Every backend answers the same question: given a context, where does a
//! target token land in the predictor's full-vocabulary ordering, and what are
//! the first `k` entries of that ordering. Equal probabilities are ordered by
//! ascending token id, so ranks are reproducible.

mod ngram;
mod oracle;
mod remote;
mod sample;

pub use ngram::{fit_ngram, NgramModel, DEFAULT_BACKOFF};
pub use oracle::{MemorizingPredictor, ScriptedPredictor, UniformPredictor};
pub use remote::{RemoteConfig, RemotePredictor, PREDICTOR_URL_ENV};
pub use sample::{sample_continuation, SamplingConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::token::TokenId;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("predictor transport: {0}")]
    Transport(String),
    #[error("predictor returned http status {0}")]
    Status(u16),
    #[error("predictor reply violates schema: {0}")]
    Schema(String),
    #[error("predictor reply is inconsistent: {0}")]
    Inconsistent(String),
    #[error("model: {0}")]
    Model(String),
}

/// One entry of a ranked prediction list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: TokenId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub prob: f64,
}

impl Candidate {
    pub fn new(id: TokenId, prob: f64) -> Self {
        Self {
            id,
            text: None,
            prob,
        }
    }
}

/// Answer to a single `(context, target)` query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    /// 1-based position of the target in the full ordering.
    pub target_rank: u32,
    pub target_prob: f64,
    pub topk: Vec<Candidate>,
}

impl PredictionResult {
    /// Checks the cross-field invariants of a reply for `target` with `k`
    /// requested entries over a vocabulary of `vocab_size`.
    pub fn validate(
        &self,
        target: TokenId,
        k: usize,
        vocab_size: usize,
    ) -> Result<(), PredictError> {
        if self.target_rank == 0 {
            return Err(PredictError::Schema("target_rank must be >= 1".into()));
        }
        if self.target_rank as usize > vocab_size {
            return Err(PredictError::Inconsistent(format!(
                "target_rank {} exceeds vocabulary size {vocab_size}",
                self.target_rank
            )));
        }
        if !(0.0..=1.0).contains(&self.target_prob) {
            return Err(PredictError::Schema(format!(
                "target_prob {} outside [0, 1]",
                self.target_prob
            )));
        }
        let expected_len = k.min(vocab_size);
        if self.topk.len() != expected_len {
            return Err(PredictError::Schema(format!(
                "topk has {} entries, expected {expected_len}",
                self.topk.len()
            )));
        }
        for (i, c) in self.topk.iter().enumerate() {
            if !(0.0..=1.0).contains(&c.prob) {
                return Err(PredictError::Schema(format!(
                    "topk[{i}] prob {} outside [0, 1]",
                    c.prob
                )));
            }
            if c.id.index() >= vocab_size {
                return Err(PredictError::Schema(format!(
                    "topk[{i}] id {} outside vocabulary",
                    c.id
                )));
            }
        }
        for (i, w) in self.topk.windows(2).enumerate() {
            if w[1].prob > w[0].prob {
                return Err(PredictError::Schema(format!(
                    "topk probabilities increase at position {}",
                    i + 1
                )));
            }
            if w[1].prob == w[0].prob && w[1].id < w[0].id {
                return Err(PredictError::Inconsistent(format!(
                    "tied entries at position {} not ordered by ascending id",
                    i + 1
                )));
            }
        }
        let mut seen: Vec<TokenId> = self.topk.iter().map(|c| c.id).collect();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(PredictError::Schema("topk contains duplicate ids".into()));
        }
        let rank = self.target_rank as usize;
        match self.topk.iter().position(|c| c.id == target) {
            Some(pos) if pos + 1 != rank => Err(PredictError::Inconsistent(format!(
                "target appears at topk position {} but target_rank is {rank}",
                pos + 1
            ))),
            None if rank <= self.topk.len() => Err(PredictError::Inconsistent(format!(
                "target_rank {rank} but topk[{}] is token {}, not the target {target}",
                rank - 1,
                self.topk[rank - 1].id
            ))),
            Some(pos) if (self.topk[pos].prob - self.target_prob).abs() > 1e-9 => {
                Err(PredictError::Inconsistent(format!(
                    "target_prob {} differs from its topk entry {}",
                    self.target_prob, self.topk[pos].prob
                )))
            }
            _ => Ok(()),
        }
    }
}

/// A next-token predictor over a vocabulary of fixed size.
pub trait Predictor: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Longest context suffix the predictor reads, when bounded. Sessions
    /// keep only this much history.
    fn context_window(&self) -> Option<usize> {
        None
    }

    fn rank_and_topk(
        &self,
        context: &[TokenId],
        target: TokenId,
        k: usize,
    ) -> Result<PredictionResult, PredictError>;

    /// The first `limit` entries of the ranked next-token distribution.
    fn next_distribution(
        &self,
        context: &[TokenId],
        limit: usize,
    ) -> Result<Vec<Candidate>, PredictError>;

    fn session(&self) -> PredictorSession<'_, Self>
    where
        Self: Sized,
    {
        PredictorSession::new(self)
    }
}

pub(crate) fn check_query(
    context: &[TokenId],
    target: TokenId,
    k: usize,
    vocab_size: usize,
) -> Result<(), PredictError> {
    if context.is_empty() {
        return Err(PredictError::InvalidQuery("context is empty".into()));
    }
    if k == 0 {
        return Err(PredictError::InvalidQuery("k must be >= 1".into()));
    }
    if target.index() >= vocab_size {
        return Err(PredictError::InvalidQuery(format!(
            "target {target} outside vocabulary of size {vocab_size}"
        )));
    }
    Ok(())
}

/// Ranks `target` in a dense probability vector under the ascending-id
/// tie-break and returns the first `k` entries of the ordering.
pub(crate) fn rank_dense(probs: &[f64], target: TokenId, k: usize) -> PredictionResult {
    let t = target.index();
    let pt = probs[t];
    let ahead = probs
        .iter()
        .enumerate()
        .filter(|&(j, &p)| p > pt || (p == pt && j < t))
        .count();
    PredictionResult {
        target_rank: ahead as u32 + 1,
        target_prob: pt,
        topk: top_dense(probs, k),
    }
}

pub(crate) fn top_dense(probs: &[f64], k: usize) -> Vec<Candidate> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    let by_rank = |a: &usize, b: &usize| probs[*b].total_cmp(&probs[*a]).then(a.cmp(b));
    let k = k.min(order.len());
    if k < order.len() {
        order.select_nth_unstable_by(k, by_rank);
        order.truncate(k);
    }
    order.sort_by(by_rank);
    order
        .into_iter()
        .map(|j| Candidate::new(TokenId(j as u32), probs[j]))
        .collect()
}

/// Incremental context handle. Appending is O(1) amortized and the stored
/// history is trimmed to the predictor's context window, so a session that
/// appended `t1..tk` answers exactly as a fresh query on `t1..tk`.
pub struct PredictorSession<'a, P: Predictor + ?Sized> {
    predictor: &'a P,
    context: Vec<TokenId>,
    window: Option<usize>,
    appended: usize,
}

impl<'a, P: Predictor + ?Sized> PredictorSession<'a, P> {
    pub fn new(predictor: &'a P) -> Self {
        Self {
            predictor,
            context: Vec::new(),
            window: predictor.context_window(),
            appended: 0,
        }
    }

    pub fn with_prompt(predictor: &'a P, prompt: &[TokenId]) -> Self {
        let mut s = Self::new(predictor);
        for &t in prompt {
            s.append(t);
        }
        s
    }

    pub fn append(&mut self, token: TokenId) {
        self.context.push(token);
        self.appended += 1;
        if let Some(w) = self.window {
            let cap = w.max(1);
            if self.context.len() > 2 * cap {
                let excess = self.context.len() - cap;
                self.context.drain(..excess);
            }
        }
    }

    /// Number of tokens appended so far.
    pub fn len(&self) -> usize {
        self.appended
    }

    pub fn is_empty(&self) -> bool {
        self.appended == 0
    }

    fn visible(&self) -> &[TokenId] {
        match self.window {
            Some(w) if self.context.len() > w && w > 0 => &self.context[self.context.len() - w..],
            _ => &self.context,
        }
    }

    pub fn rank_and_topk(
        &self,
        target: TokenId,
        k: usize,
    ) -> Result<PredictionResult, PredictError> {
        if self.appended == 0 {
            return Err(PredictError::InvalidQuery("context is empty".into()));
        }
        self.predictor.rank_and_topk(self.visible(), target, k)
    }

    pub fn next_distribution(&self, limit: usize) -> Result<Vec<Candidate>, PredictError> {
        if self.appended == 0 {
            return Err(PredictError::InvalidQuery("context is empty".into()));
        }
        self.predictor.next_distribution(self.visible(), limit)
    }
}
