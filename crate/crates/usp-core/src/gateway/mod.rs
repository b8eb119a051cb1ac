//! The black-box LLM boundary: a generation/scoring abstraction with a
//! remote-endpoint client, a deterministic synthetic oracle for tests, and a
//! persistent response cache.

mod cache;
mod http;
mod synthetic;

pub use cache::{CachedBackend, FileStore};
pub use http::{HttpBackend, ScoreNorm};
pub use synthetic::{synthetic_task, OracleEntry, SyntheticBackend, SyntheticOracleSpec};

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UspError};
use crate::model::ClassDistribution;

/// Decode settings for one generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: usize,
    pub num_samples: usize,
    pub stop_sequences: Vec<String>,
}

impl DecodeParams {
    /// Greedy decoding: temperature 0 is deterministic, so one sample.
    pub fn greedy(max_tokens: usize) -> Self {
        DecodeParams {
            temperature: 0.0,
            max_tokens,
            num_samples: 1,
            stop_sequences: Vec::new(),
        }
    }

    /// Stochastic decoding with `num_samples` repetitions.
    pub fn sampled(temperature: f64, num_samples: usize, max_tokens: usize) -> Self {
        DecodeParams {
            temperature,
            max_tokens,
            num_samples,
            stop_sequences: Vec::new(),
        }
    }

    pub fn with_stops(mut self, stops: Vec<String>) -> Self {
        self.stop_sequences = stops;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(UspError::InvalidField {
                field: "temperature".into(),
                reason: format!("must be >= 0, got {}", self.temperature),
            });
        }
        if self.num_samples < 1 {
            return Err(UspError::InvalidField {
                field: "num_samples".into(),
                reason: "must be >= 1".into(),
            });
        }
        if self.temperature == 0.0 && self.num_samples != 1 {
            return Err(UspError::InvalidField {
                field: "num_samples".into(),
                reason: "greedy decoding is deterministic; num_samples must be 1".into(),
            });
        }
        if self.max_tokens == 0 {
            return Err(UspError::InvalidField {
                field: "max_tokens".into(),
                reason: "must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// Completions returned by a backend, plus per-option log-likelihoods when
/// the request was a scoring request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub completions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option_logprobs: Option<std::collections::BTreeMap<String, f64>>,
}

impl BackendResponse {
    pub fn completions(completions: Vec<String>) -> Self {
        BackendResponse {
            completions,
            option_logprobs: None,
        }
    }
}

/// A text-completion backend. Implementations must be deterministic given
/// (prompt, params) wherever they claim to be (the synthetic oracle always
/// is; remote endpoints are as deterministic as the service behind them).
pub trait Backend: Send + Sync {
    /// Stable identifier mixed into cache keys.
    fn id(&self) -> String;

    /// Returns exactly `params.num_samples` completions.
    fn generate(&self, prompt: &str, params: &DecodeParams) -> Result<BackendResponse>;

    /// Normalized distribution over the options as continuations of the
    /// prompt (softmax over per-option log-likelihoods).
    fn score_options(&self, prompt: &str, options: &[String]) -> Result<ClassDistribution>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn id(&self) -> String {
        (**self).id()
    }
    fn generate(&self, prompt: &str, params: &DecodeParams) -> Result<BackendResponse> {
        (**self).generate(prompt, params)
    }
    fn score_options(&self, prompt: &str, options: &[String]) -> Result<ClassDistribution> {
        (**self).score_options(prompt, options)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn generate(&self, prompt: &str, params: &DecodeParams) -> Result<BackendResponse> {
        (**self).generate(prompt, params)
    }
    fn score_options(&self, prompt: &str, options: &[String]) -> Result<ClassDistribution> {
        (**self).score_options(prompt, options)
    }
}

/// Wrapper that counts the decode and scoring operations reaching the
/// wrapped backend. One generation request with n samples counts as n decode
/// operations, matching how model-query cost is accounted.
pub struct CountingBackend<B> {
    inner: B,
    decode_ops: AtomicU64,
    scoring_ops: AtomicU64,
}

impl<B: Backend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        CountingBackend {
            inner,
            decode_ops: AtomicU64::new(0),
            scoring_ops: AtomicU64::new(0),
        }
    }

    pub fn decode_ops(&self) -> u64 {
        self.decode_ops.load(Ordering::Relaxed)
    }

    pub fn scoring_ops(&self) -> u64 {
        self.scoring_ops.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.decode_ops.store(0, Ordering::Relaxed);
        self.scoring_ops.store(0, Ordering::Relaxed);
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn generate(&self, prompt: &str, params: &DecodeParams) -> Result<BackendResponse> {
        self.decode_ops
            .fetch_add(params.num_samples as u64, Ordering::Relaxed);
        self.inner.generate(prompt, params)
    }

    fn score_options(&self, prompt: &str, options: &[String]) -> Result<ClassDistribution> {
        self.scoring_ops.fetch_add(1, Ordering::Relaxed);
        self.inner.score_options(prompt, options)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_with_multiple_samples_is_rejected() {
        let mut params = DecodeParams::greedy(16);
        params.num_samples = 3;
        assert!(params.validate().is_err());
        assert!(DecodeParams::sampled(0.7, 6, 16).validate().is_ok());
    }
}
