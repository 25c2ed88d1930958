//! HTTP adapter for external language-model servers.
//!
//! Protocol: `POST <endpoint>/v1/rank` with body
//! `{"context":[int...],"target":int,"k":int}`; the reply is
//! `{"target_rank":int,"target_prob":float,"topk":[{"id":int,"text":str,"prob":float}...]}`.
//! Replies are validated and never corrected: any inconsistency is an error.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{check_query, Candidate, PredictError, PredictionResult, Predictor};
use crate::token::TokenId;

/// Environment variable consulted when no endpoint flag is given.
pub const PREDICTOR_URL_ENV: &str = "AE_PREDICTOR_URL";

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout: Duration,
    /// Extra attempts after a transport failure or 5xx status.
    pub retries: u32,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(30),
            retries: 2,
        }
    }
}

#[derive(Serialize)]
struct RankRequest<'a> {
    context: &'a [TokenId],
    target: TokenId,
    k: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RankReply {
    target_rank: i64,
    target_prob: f64,
    topk: Vec<ReplyEntry>,
}

#[derive(Deserialize)]
struct ReplyEntry {
    id: i64,
    text: String,
    prob: f64,
}

pub struct RemotePredictor {
    agent: ureq::Agent,
    url: String,
    retries: u32,
    vocab_size: usize,
}

impl RemotePredictor {
    pub fn new(config: RemoteConfig, vocab_size: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let url = format!("{}/v1/rank", config.endpoint.trim_end_matches('/'));
        Self {
            agent,
            url,
            retries: config.retries,
            vocab_size,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn post(&self, request: &RankRequest<'_>) -> Result<String, PredictError> {
        let mut last = PredictError::Transport("no attempt made".into());
        for _ in 0..=self.retries {
            match self.agent.post(&self.url).send_json(request) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status == 200 {
                        return resp
                            .body_mut()
                            .read_to_string()
                            .map_err(|e| PredictError::Transport(e.to_string()));
                    }
                    last = PredictError::Status(status);
                    if status < 500 {
                        break;
                    }
                }
                Err(e) => last = PredictError::Transport(e.to_string()),
            }
        }
        Err(last)
    }

    fn query(
        &self,
        context: &[TokenId],
        target: TokenId,
        k: usize,
    ) -> Result<PredictionResult, PredictError> {
        let body = self.post(&RankRequest { context, target, k })?;
        parse_reply(&body, target, k, self.vocab_size)
    }
}

/// Decodes and validates one reply body.
pub(crate) fn parse_reply(
    body: &str,
    target: TokenId,
    k: usize,
    vocab_size: usize,
) -> Result<PredictionResult, PredictError> {
    let reply: RankReply =
        serde_json::from_str(body).map_err(|e| PredictError::Schema(e.to_string()))?;
    let as_id = |v: i64, what: &str| -> Result<u32, PredictError> {
        u32::try_from(v)
            .map_err(|_| PredictError::Schema(format!("{what} {v} is not a valid integer index")))
    };
    let topk = reply
        .topk
        .into_iter()
        .map(|e| {
            Ok(Candidate {
                id: TokenId(as_id(e.id, "topk id")?),
                text: Some(e.text),
                prob: e.prob,
            })
        })
        .collect::<Result<Vec<_>, PredictError>>()?;
    let result = PredictionResult {
        target_rank: as_id(reply.target_rank, "target_rank")?,
        target_prob: reply.target_prob,
        topk,
    };
    result.validate(target, k, vocab_size)?;
    Ok(result)
}

impl Predictor for RemotePredictor {
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
        self.query(context, target, k)
    }

    /// The protocol has no pure distribution call; the top-`limit` list of a
    /// rank query for token 0 is used instead.
    fn next_distribution(
        &self,
        context: &[TokenId],
        limit: usize,
    ) -> Result<Vec<Candidate>, PredictError> {
        let limit = limit.clamp(1, self.vocab_size);
        Ok(self.rank_and_topk(context, TokenId(0), limit)?.topk)
    }
}
