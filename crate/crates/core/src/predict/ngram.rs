//! Count-based n-gram predictor with stupid backoff.
//!
//! The score of token `w` after history `h` is `c(h w) / c(h)` when `h w` was
//! observed, otherwise `backoff * score(w | h')` with `h'` the history minus
//! its oldest token. The recursion bottoms out at add-one smoothed unigrams,
//! so every token has a positive score. Scores are normalized over the full
//! vocabulary before being reported as probabilities.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_query, Candidate, PredictError, PredictionResult, Predictor};
use crate::token::TokenId;

pub const DEFAULT_BACKOFF: f64 = 0.4;

#[derive(Debug, Clone)]
struct Continuations {
    total: u64,
    /// Sorted by token id.
    counts: Vec<(TokenId, u64)>,
}

#[derive(Debug, Clone)]
pub struct NgramModel {
    order: usize,
    backoff: f64,
    vocab_size: usize,
    histories: HashMap<Vec<TokenId>, Continuations>,
    unigram: Vec<u64>,
    total: u64,
    /// All ids by descending unigram count, ascending id on ties.
    floor_order: Vec<TokenId>,
}

/// Fits an n-gram model on token sequences.
pub fn fit_ngram(
    sequences: &[Vec<TokenId>],
    order: usize,
    backoff: f64,
    vocab_size: usize,
) -> Result<NgramModel, PredictError> {
    if order == 0 {
        return Err(PredictError::Model("order must be >= 1".into()));
    }
    if !(backoff > 0.0 && backoff < 1.0) {
        return Err(PredictError::Model(format!(
            "backoff factor {backoff} outside (0, 1)"
        )));
    }
    if vocab_size == 0 {
        return Err(PredictError::Model("vocabulary must be non-empty".into()));
    }
    if sequences.iter().all(Vec::is_empty) {
        return Err(PredictError::Model("training set has no tokens".into()));
    }

    let mut unigram = vec![0u64; vocab_size];
    let mut raw: HashMap<Vec<TokenId>, HashMap<TokenId, u64>> = HashMap::new();
    let mut total = 0u64;
    for seq in sequences {
        for (i, &w) in seq.iter().enumerate() {
            if w.index() >= vocab_size {
                return Err(PredictError::Model(format!(
                    "token {w} outside vocabulary of size {vocab_size}"
                )));
            }
            unigram[w.index()] += 1;
            total += 1;
            for n in 1..order.min(i + 1) {
                *raw.entry(seq[i - n..i].to_vec())
                    .or_default()
                    .entry(w)
                    .or_default() += 1;
            }
        }
    }
    let histories = raw
        .into_iter()
        .map(|(h, next)| {
            let mut counts: Vec<(TokenId, u64)> = next.into_iter().collect();
            counts.sort_unstable();
            let total = counts.iter().map(|c| c.1).sum();
            (h, Continuations { total, counts })
        })
        .collect();
    Ok(NgramModel::assemble(
        order, backoff, vocab_size, histories, unigram, total,
    ))
}

impl NgramModel {
    fn assemble(
        order: usize,
        backoff: f64,
        vocab_size: usize,
        histories: HashMap<Vec<TokenId>, Continuations>,
        unigram: Vec<u64>,
        total: u64,
    ) -> Self {
        let mut floor_order: Vec<TokenId> = (0..vocab_size as u32).map(TokenId).collect();
        floor_order.sort_by(|a, b| unigram[b.index()].cmp(&unigram[a.index()]).then(a.cmp(b)));
        Self {
            order,
            backoff,
            vocab_size,
            histories,
            unigram,
            total,
            floor_order,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn backoff(&self) -> f64 {
        self.backoff
    }

    fn floor_score(&self, w: TokenId, factor: f64) -> f64 {
        factor * (self.unigram[w.index()] + 1) as f64 / (self.total + self.vocab_size as u64) as f64
    }

    /// Scores of tokens observed after some suffix of the context, and the
    /// factor applied to the unigram floor for everything else.
    fn scored(&self, context: &[TokenId]) -> (Vec<(TokenId, f64)>, f64) {
        let m = (self.order - 1).min(context.len());
        let mut assigned: Vec<(TokenId, f64)> = Vec::new();
        // ids already scored at a longer history, kept sorted
        let mut seen: Vec<TokenId> = Vec::new();
        let mut factor = 1.0;
        for len in (1..=m).rev() {
            let h = &context[context.len() - len..];
            if let Some(cont) = self.histories.get(h) {
                let before = seen.len();
                for &(w, c) in &cont.counts {
                    if seen[..before].binary_search(&w).is_err() {
                        assigned.push((w, factor * c as f64 / cont.total as f64));
                        seen.push(w);
                    }
                }
                seen.sort_unstable();
            }
            factor *= self.backoff;
        }
        (assigned, factor)
    }

    fn beats(a: (TokenId, f64), b: (TokenId, f64)) -> bool {
        a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
    }

    fn normalizer(&self, assigned: &[(TokenId, f64)], floor: f64) -> f64 {
        let denom = (self.total + self.vocab_size as u64) as f64;
        let floor_units: u64 = assigned.iter().map(|a| self.unigram[a.0.index()] + 1).sum();
        let floor_mass =
            floor * ((self.total + self.vocab_size as u64 - floor_units) as f64 / denom);
        assigned.iter().map(|a| a.1).sum::<f64>() + floor_mass
    }

    /// First `limit` entries of the ordering, with unnormalized scores.
    fn ranked_prefix(
        &self,
        assigned: &mut [(TokenId, f64)],
        floor: f64,
        limit: usize,
    ) -> Vec<(TokenId, f64)> {
        assigned.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut in_assigned = assigned.iter().map(|a| a.0).collect::<Vec<_>>();
        in_assigned.sort_unstable();
        let mut fl = self
            .floor_order
            .iter()
            .filter(|w| in_assigned.binary_search(w).is_err())
            .map(|&w| (w, self.floor_score(w, floor)))
            .peekable();
        let mut hi = assigned.iter().copied().peekable();
        let mut out = Vec::with_capacity(limit.min(self.vocab_size));
        while out.len() < limit {
            let next = match (hi.peek(), fl.peek()) {
                (Some(&a), Some(&b)) => {
                    if Self::beats(a, b) {
                        hi.next()
                    } else {
                        fl.next()
                    }
                }
                (Some(_), None) => hi.next(),
                (None, Some(_)) => fl.next(),
                (None, None) => None,
            };
            match next {
                Some(x) => out.push(x),
                None => break,
            }
        }
        out
    }

    /// Normalized probability of every token, by id. Used for brute-force
    /// checks and sampling over small vocabularies.
    pub fn full_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        let (assigned, floor) = self.scored(context);
        let z = self.normalizer(&assigned, floor);
        let mut probs: Vec<f64> = (0..self.vocab_size as u32)
            .map(|i| self.floor_score(TokenId(i), floor) / z)
            .collect();
        for (w, s) in assigned {
            probs[w.index()] = s / z;
        }
        probs
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PredictError> {
        std::fs::write(path, self.to_json()).map_err(|e| PredictError::Model(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PredictError> {
        let raw = std::fs::read_to_string(path).map_err(|e| PredictError::Model(e.to_string()))?;
        Self::from_json(&raw)
    }

    pub fn to_json(&self) -> String {
        let mut histories: Vec<HistoryEntry> = self
            .histories
            .iter()
            .map(|(h, c)| HistoryEntry {
                history: h.clone(),
                next: c.counts.clone(),
            })
            .collect();
        histories.sort_by(|a, b| {
            a.history
                .len()
                .cmp(&b.history.len())
                .then_with(|| a.history.cmp(&b.history))
        });
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            order: self.order,
            backoff: self.backoff,
            vocab_size: self.vocab_size,
            unigram: self.unigram.clone(),
            histories,
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(raw: &str) -> Result<Self, PredictError> {
        let file: ModelFile =
            serde_json::from_str(raw).map_err(|e| PredictError::Model(e.to_string()))?;
        if file.format != MODEL_FORMAT {
            return Err(PredictError::Model(format!(
                "unsupported model format `{}`",
                file.format
            )));
        }
        if file.unigram.len() != file.vocab_size || file.order == 0 {
            return Err(PredictError::Model("malformed model header".into()));
        }
        let total = file.unigram.iter().sum();
        let mut histories = HashMap::with_capacity(file.histories.len());
        for entry in file.histories {
            if entry.history.is_empty() || entry.history.len() >= file.order {
                return Err(PredictError::Model(
                    "history length outside 1..order".into(),
                ));
            }
            if entry
                .history
                .iter()
                .chain(entry.next.iter().map(|n| &n.0))
                .any(|t| t.index() >= file.vocab_size)
            {
                return Err(PredictError::Model("token id outside vocabulary".into()));
            }
            let mut counts = entry.next;
            counts.sort_unstable();
            let total = counts.iter().map(|c| c.1).sum();
            histories.insert(entry.history, Continuations { total, counts });
        }
        Ok(Self::assemble(
            file.order,
            file.backoff,
            file.vocab_size,
            histories,
            file.unigram,
            total,
        ))
    }
}

const MODEL_FORMAT: &str = "aeval-ngram-v1";

#[derive(Serialize, Deserialize)]
struct HistoryEntry {
    history: Vec<TokenId>,
    next: Vec<(TokenId, u64)>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    order: usize,
    backoff: f64,
    vocab_size: usize,
    unigram: Vec<u64>,
    histories: Vec<HistoryEntry>,
}

impl Predictor for NgramModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn context_window(&self) -> Option<usize> {
        Some(self.order - 1)
    }

    fn rank_and_topk(
        &self,
        context: &[TokenId],
        target: TokenId,
        k: usize,
    ) -> Result<PredictionResult, PredictError> {
        check_query(context, target, k, self.vocab_size)?;
        let (mut assigned, floor) = self.scored(context);
        let z = self.normalizer(&assigned, floor);

        let target_score = assigned
            .iter()
            .find(|a| a.0 == target)
            .map_or_else(|| self.floor_score(target, floor), |a| a.1);
        let t = (target, target_score);

        // floor tokens beating the target form a prefix of floor_order
        let floor_prefix = self
            .floor_order
            .partition_point(|&w| Self::beats((w, self.floor_score(w, floor)), t));
        let assigned_in_prefix = assigned
            .iter()
            .filter(|a| Self::beats((a.0, self.floor_score(a.0, floor)), t))
            .count();
        let assigned_ahead = assigned.iter().filter(|&&a| Self::beats(a, t)).count();
        let rank = 1 + assigned_ahead + floor_prefix - assigned_in_prefix;

        let topk = self
            .ranked_prefix(&mut assigned, floor, k)
            .into_iter()
            .map(|(w, s)| Candidate::new(w, s / z))
            .collect();
        Ok(PredictionResult {
            target_rank: rank as u32,
            target_prob: target_score / z,
            topk,
        })
    }

    fn next_distribution(
        &self,
        context: &[TokenId],
        limit: usize,
    ) -> Result<Vec<Candidate>, PredictError> {
        let (mut assigned, floor) = self.scored(context);
        let z = self.normalizer(&assigned, floor);
        Ok(self
            .ranked_prefix(&mut assigned, floor, limit)
            .into_iter()
            .map(|(w, s)| Candidate::new(w, s / z))
            .collect())
    }
}
