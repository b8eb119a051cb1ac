//! HTTP client for a remote text-completion endpoint.
//!
//! Wire format: POST a JSON body
//! `{prompt, temperature, max_tokens, n, stop, options?}`; the endpoint
//! answers `{completions: [...]}` and, for scoring requests,
//! `{option_logprobs: {option: log_likelihood}}`. The bearer token comes
//! from configuration or the environment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UspError};
use crate::gateway::{Backend, BackendResponse, DecodeParams};
use crate::model::ClassDistribution;

/// How per-option log-likelihoods are normalized before the softmax.
///
/// The raw sum over the option's tokens is the default; per-token mean
/// divides by the option's whitespace token count for length insensitivity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNorm {
    #[default]
    RawSum,
    PerTokenMean,
}

pub struct HttpBackend {
    url: String,
    token: Option<String>,
    score_norm: ScoreNorm,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
    temperature: f64,
    max_tokens: usize,
    n: usize,
    stop: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    options: Option<&'a [String]>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    #[serde(default)]
    completions: Vec<String>,
    #[serde(default)]
    option_logprobs: Option<BTreeMap<String, f64>>,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>, token: Option<String>, score_norm: ScoreNorm) -> Self {
        let client = reqwest::blocking::Client::builder()
            .connect_timeout(std::time::Duration::from_secs(10))
            .timeout(std::time::Duration::from_secs(300))
            .build()
            .expect("client construction cannot fail with static settings");
        HttpBackend {
            url: url.into(),
            token,
            score_norm,
            client,
        }
    }

    fn post(&self, request: &CompletionRequest<'_>) -> Result<CompletionResponse> {
        let mut builder = self.client.post(&self.url).json(request);
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token);
        }
        let response = builder
            .send()
            .map_err(|e| UspError::BackendUnreachable(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(UspError::BackendRejected {
                status: status.as_u16(),
                body: response.text().unwrap_or_default(),
            });
        }
        response.json().map_err(|e| UspError::BackendRejected {
            status: status.as_u16(),
            body: format!("unparseable payload: {e}"),
        })
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}", self.url)
    }

    fn generate(&self, prompt: &str, params: &DecodeParams) -> Result<BackendResponse> {
        params.validate()?;
        if prompt.is_empty() {
            return Err(UspError::InvalidField {
                field: "prompt".into(),
                reason: "empty prompt".into(),
            });
        }
        let response = self.post(&CompletionRequest {
            prompt,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            n: params.num_samples,
            stop: &params.stop_sequences,
            options: None,
        })?;
        if response.completions.len() != params.num_samples {
            return Err(UspError::BackendRejected {
                status: 200,
                body: format!(
                    "requested {} completions, endpoint returned {}",
                    params.num_samples,
                    response.completions.len()
                ),
            });
        }
        Ok(BackendResponse {
            completions: response.completions,
            option_logprobs: response.option_logprobs,
        })
    }

    fn score_options(&self, prompt: &str, options: &[String]) -> Result<ClassDistribution> {
        if options.len() < 2 {
            return Err(UspError::InvalidField {
                field: "options".into(),
                reason: "need >= 2 options".into(),
            });
        }
        let response = self.post(&CompletionRequest {
            prompt,
            temperature: 0.0,
            max_tokens: 0,
            n: 1,
            stop: &[],
            options: Some(options),
        })?;
        let Some(logprobs) = response.option_logprobs else {
            return Err(UspError::BackendNoScoringSupport);
        };
        let mut normalized = BTreeMap::new();
        for option in options {
            let label = option.trim();
            let ll = logprobs
                .get(option)
                .or_else(|| logprobs.get(label))
                .copied()
                .ok_or_else(|| UspError::BackendRejected {
                    status: 200,
                    body: format!("missing log-likelihood for option `{label}`"),
                })?;
            let value = match self.score_norm {
                ScoreNorm::RawSum => ll,
                ScoreNorm::PerTokenMean => {
                    ll / label.split_whitespace().count().max(1) as f64
                }
            };
            normalized.insert(label.to_string(), value);
        }
        ClassDistribution::from_log_likelihoods(&normalized)
    }
}
