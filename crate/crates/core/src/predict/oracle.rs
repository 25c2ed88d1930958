//! Deterministic test backends with known answers.

use super::{
    check_query, rank_dense, top_dense, Candidate, PredictError, PredictionResult, Predictor,
};
use crate::token::TokenId;

/// Every token equally likely; ranks reduce to ascending id order.
#[derive(Debug, Clone)]
pub struct UniformPredictor {
    vocab_size: usize,
}

impl UniformPredictor {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > 0, "vocabulary must be non-empty");
        Self { vocab_size }
    }
}

impl Predictor for UniformPredictor {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn rank_and_topk(
        &self,
        context: &[TokenId],
        target: TokenId,
        k: usize,
    ) -> Result<PredictionResult, PredictError> {
        check_query(context, target, k, self.vocab_size)?;
        let p = 1.0 / self.vocab_size as f64;
        Ok(PredictionResult {
            target_rank: target.0 + 1,
            target_prob: p,
            topk: self.next_distribution(context, k)?,
        })
    }

    fn next_distribution(
        &self,
        _context: &[TokenId],
        limit: usize,
    ) -> Result<Vec<Candidate>, PredictError> {
        let p = 1.0 / self.vocab_size as f64;
        Ok((0..limit.min(self.vocab_size) as u32)
            .map(|i| Candidate::new(TokenId(i), p))
            .collect())
    }
}

/// Knows exactly one sequence. When the context is a prefix of it, the next
/// token of that sequence gets probability 1; otherwise the answer is uniform.
#[derive(Debug, Clone)]
pub struct MemorizingPredictor {
    sequence: Vec<TokenId>,
    vocab_size: usize,
}

impl MemorizingPredictor {
    pub fn new(sequence: Vec<TokenId>, vocab_size: usize) -> Self {
        assert!(vocab_size > 0, "vocabulary must be non-empty");
        Self {
            sequence,
            vocab_size,
        }
    }

    fn probs(&self, context: &[TokenId]) -> Vec<f64> {
        let n = self.vocab_size;
        let follows = context.len() < self.sequence.len() && self.sequence.starts_with(context);
        if follows {
            let mut probs = vec![0.0; n];
            probs[self.sequence[context.len()].index()] = 1.0;
            probs
        } else {
            vec![1.0 / n as f64; n]
        }
    }
}

impl Predictor for MemorizingPredictor {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn rank_and_topk(
        &self,
        context: &[TokenId],
        target: TokenId,
        k: usize,
    ) -> Result<PredictionResult, PredictError> {
        check_query(context, target, k, self.vocab_size)?;
        Ok(rank_dense(&self.probs(context), target, k))
    }

    fn next_distribution(
        &self,
        context: &[TokenId],
        limit: usize,
    ) -> Result<Vec<Candidate>, PredictError> {
        Ok(top_dense(&self.probs(context), limit))
    }
}

/// Replays a fixed per-position rank list: the query whose context holds `n`
/// tokens places its target at `ranks[n - 1]`.
///
/// The remaining tokens fill the other slots in ascending id order, and slot
/// `j` (0-based) carries probability `1 / (j + 1)` normalized over the
/// vocabulary, so the ordering is strict.
#[derive(Debug, Clone)]
pub struct ScriptedPredictor {
    ranks: Vec<u32>,
    vocab_size: usize,
    norm: f64,
}

impl ScriptedPredictor {
    pub fn new(ranks: Vec<u32>, vocab_size: usize) -> Result<Self, PredictError> {
        if vocab_size == 0 {
            return Err(PredictError::InvalidQuery(
                "vocabulary must be non-empty".into(),
            ));
        }
        if let Some((i, &r)) = ranks
            .iter()
            .enumerate()
            .find(|&(_, &r)| r == 0 || r as usize > vocab_size)
        {
            return Err(PredictError::InvalidQuery(format!(
                "scripted rank {r} at position {} outside 1..={vocab_size}",
                i + 1
            )));
        }
        let norm = (1..=vocab_size).map(|j| 1.0 / j as f64).sum();
        Ok(Self {
            ranks,
            vocab_size,
            norm,
        })
    }

    fn slot_prob(&self, slot: usize) -> f64 {
        1.0 / ((slot + 1) as f64 * self.norm)
    }

    /// Token occupying 0-based `slot` when `target` sits at `rank`.
    fn slot_token(slot: usize, target: usize, rank: usize) -> usize {
        let t_slot = rank - 1;
        if slot == t_slot {
            return target;
        }
        // slot-th smallest id among the non-target ids, with one slot taken by the target
        let j = if slot < t_slot { slot } else { slot - 1 };
        if j < target {
            j
        } else {
            j + 1
        }
    }
}

impl Predictor for ScriptedPredictor {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn rank_and_topk(
        &self,
        context: &[TokenId],
        target: TokenId,
        k: usize,
    ) -> Result<PredictionResult, PredictError> {
        check_query(context, target, k, self.vocab_size)?;
        let rank = *self.ranks.get(context.len() - 1).ok_or_else(|| {
            PredictError::InvalidQuery(format!(
                "no scripted rank for context length {} ({} scripted)",
                context.len(),
                self.ranks.len()
            ))
        })? as usize;
        let topk = (0..k.min(self.vocab_size))
            .map(|slot| {
                let id = Self::slot_token(slot, target.index(), rank);
                Candidate::new(TokenId(id as u32), self.slot_prob(slot))
            })
            .collect();
        Ok(PredictionResult {
            target_rank: rank as u32,
            target_prob: self.slot_prob(rank - 1),
            topk,
        })
    }

    fn next_distribution(
        &self,
        _context: &[TokenId],
        limit: usize,
    ) -> Result<Vec<Candidate>, PredictError> {
        Ok((0..limit.min(self.vocab_size))
            .map(|slot| Candidate::new(TokenId(slot as u32), self.slot_prob(slot)))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_rank_is_id_plus_one() {
        let p = UniformPredictor::new(100);
        for t in [0u32, 1, 42, 99] {
            let r = p.rank_and_topk(&[TokenId(3)], TokenId(t), 10).unwrap();
            assert_eq!(r.target_rank, t + 1);
            r.validate(TokenId(t), 10, 100).unwrap();
        }
    }

    #[test]
    fn memorizing_prefix_is_certain() {
        let seq: Vec<TokenId> = [5u32, 2, 9, 2].map(TokenId).to_vec();
        let p = MemorizingPredictor::new(seq.clone(), 12);
        for i in 1..seq.len() {
            let r = p.rank_and_topk(&seq[..i], seq[i], 10).unwrap();
            assert_eq!(r.target_rank, 1);
            assert_eq!(r.target_prob, 1.0);
            r.validate(seq[i], 10, 12).unwrap();
        }
    }

    #[test]
    fn scripted_places_target_at_rank() {
        let p = ScriptedPredictor::new(vec![1, 3, 50], 50).unwrap();
        for (n, &rank) in [1u32, 3, 50].iter().enumerate() {
            let ctx = vec![TokenId(0); n + 1];
            for target in [0u32, 7, 49] {
                let r = p.rank_and_topk(&ctx, TokenId(target), 10).unwrap();
                assert_eq!(r.target_rank, rank);
                r.validate(TokenId(target), 10, 50).unwrap();
            }
        }
        assert!(p.rank_and_topk(&[TokenId(0); 4], TokenId(1), 10).is_err());
        assert!(ScriptedPredictor::new(vec![51], 50).is_err());
    }

    #[test]
    fn scripted_full_ordering_is_a_permutation() {
        let p = ScriptedPredictor::new(vec![4], 9).unwrap();
        let r = p.rank_and_topk(&[TokenId(0)], TokenId(6), 9).unwrap();
        let mut ids: Vec<u32> = r.topk.iter().map(|c| c.id.0).collect();
        assert_eq!(ids[3], 6);
        ids.sort_unstable();
        assert_eq!(ids, (0..9).collect::<Vec<_>>());
    }
}
