use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PredictError, Predictor, PredictorSession};
use crate::token::TokenId;

/// Nucleus sampling parameters. Defaults: 128 tokens, top-p 0.9,
/// temperature 0.75.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub max_tokens: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Take the top-ranked token at every step (the zero-temperature limit).
    pub greedy: bool,
    /// Generation halts before emitting this token.
    pub stop_token: Option<TokenId>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            max_tokens: 128,
            top_p: 0.9,
            temperature: 0.75,
            seed: 0,
            greedy: false,
            stop_token: None,
        }
    }
}

/// Samples a continuation of `prompt`. Deterministic for a fixed seed.
pub fn sample_continuation<P: Predictor + ?Sized>(
    predictor: &P,
    prompt: &[TokenId],
    config: &SamplingConfig,
) -> Result<Vec<TokenId>, PredictError> {
    if prompt.is_empty() {
        return Err(PredictError::InvalidQuery("prompt is empty".into()));
    }
    if !(config.top_p > 0.0 && config.top_p <= 1.0) {
        return Err(PredictError::InvalidQuery(format!(
            "top_p {} outside (0, 1]",
            config.top_p
        )));
    }
    if !config.greedy && !(config.temperature > 0.0 && config.temperature.is_finite()) {
        return Err(PredictError::InvalidQuery(format!(
            "temperature {} must be positive",
            config.temperature
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut session = PredictorSession::with_prompt(predictor, prompt);
    let mut out = Vec::new();
    while out.len() < config.max_tokens {
        let candidates = session.next_distribution(predictor.vocab_size())?;
        let Some(first) = candidates.first() else {
            break;
        };
        let next = if config.greedy {
            first.id
        } else {
            let logs: Vec<f64> = candidates
                .iter()
                .map(|c| {
                    if c.prob > 0.0 {
                        c.prob.ln() / config.temperature
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            // candidates are already in rank order, and tempering keeps that order
            let mut kept = 0;
            let mut mass = 0.0;
            for w in &weights {
                kept += 1;
                mass += w / total;
                if mass >= config.top_p {
                    break;
                }
            }
            let nucleus: f64 = weights[..kept].iter().sum();
            let mut u = rng.random::<f64>() * nucleus;
            let mut pick = kept - 1;
            for (i, w) in weights[..kept].iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            candidates[pick].id
        };
        if Some(next) == config.stop_token {
            break;
        }
        out.push(next);
        session.append(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predict::{fit_ngram, MemorizingPredictor};

    fn ids(v: &[u32]) -> Vec<TokenId> {
        v.iter().copied().map(TokenId).collect()
    }

    #[test]
    fn greedy_follows_memorized_suffix() {
        let seq = ids(&[3, 1, 4, 1, 5, 9, 2, 6]);
        let p = MemorizingPredictor::new(seq.clone(), 10);
        let cfg = SamplingConfig {
            greedy: true,
            ..Default::default()
        };
        let out = sample_continuation(&p, &seq[..3], &cfg).unwrap();
        // past the end of the memorized sequence the answer turns uniform
        assert_eq!(&out[..5], &seq[3..]);
    }

    #[test]
    fn zero_budget_is_empty() {
        let p = MemorizingPredictor::new(ids(&[1, 2]), 4);
        let cfg = SamplingConfig {
            max_tokens: 0,
            ..Default::default()
        };
        assert!(sample_continuation(&p, &ids(&[1]), &cfg)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn seeded_runs_repeat() {
        let data = vec![ids(&[0, 1, 2, 3, 1, 2, 4, 2, 1, 0, 3, 3, 2, 1, 4])];
        let m = fit_ngram(&data, 3, 0.4, 6).unwrap();
        let cfg = SamplingConfig {
            seed: 42,
            max_tokens: 40,
            ..Default::default()
        };
        let a = sample_continuation(&m, &ids(&[0]), &cfg).unwrap();
        let b = sample_continuation(&m, &ids(&[0]), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
    }

    #[test]
    fn stops_at_stop_token() {
        let seq = ids(&[1, 2, 3, 7, 4]);
        let p = MemorizingPredictor::new(seq.clone(), 8);
        let cfg = SamplingConfig {
            greedy: true,
            stop_token: Some(TokenId(7)),
            ..Default::default()
        };
        assert_eq!(
            sample_continuation(&p, &seq[..1], &cfg).unwrap(),
            ids(&[2, 3])
        );
    }

    #[test]
    fn parameter_errors() {
        let p = MemorizingPredictor::new(ids(&[1, 2]), 4);
        let bad_p = SamplingConfig {
            top_p: 0.0,
            ..Default::default()
        };
        assert!(sample_continuation(&p, &ids(&[1]), &bad_p).is_err());
        assert!(sample_continuation(&p, &[], &SamplingConfig::default()).is_err());
        let bad_t = SamplingConfig {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(sample_continuation(&p, &ids(&[1]), &bad_t).is_err());
    }
}
