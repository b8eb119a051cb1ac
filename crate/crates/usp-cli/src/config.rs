//! Run configuration file: every pipeline knob plus the backend, embedder
//! and cache wiring. CLI flags mirror the file one-to-one and win over it;
//! only the backend credential token comes from the environment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use usp_core::gateway::ScoreNorm;
use usp_core::model::{DemoPair, RunConfig, TaskType};
use usp_core::{Result, UspError};

/// Environment variable holding the backend bearer token.
pub const TOKEN_ENV: &str = "USP_BACKEND_TOKEN";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    /// Remote text-completion endpoint.
    Http {
        url: String,
        #[serde(default)]
        score_norm: ScoreNorm,
    },
    /// Deterministic oracle whose truth table is read from the datasets'
    /// reference fields.
    Synthetic {
        #[serde(default)]
        calibration: Option<f64>,
        #[serde(default)]
        noise_seed: Option<u64>,
        #[serde(default)]
        difficulty: Option<f64>,
        #[serde(default)]
        icl_gain: Option<f64>,
    },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Synthetic {
            calibration: None,
            noise_seed: None,
            difficulty: None,
            icl_gain: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    /// Built-in hashed character n-gram embedder (no network).
    #[default]
    Ngram,
    /// Remote embedding endpoint.
    Http { url: String },
}

/// On-disk configuration document. Every field is optional; a file of `{}`
/// plus a task type resolves to the standard defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub task_type: Option<TaskType>,
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub lambda: Option<f64>,
    pub stage1_temperature: Option<f64>,
    pub stage2_temperature: Option<f64>,
    pub max_decode_tokens: Option<usize>,
    pub rng_seed: Option<u64>,
    pub unlabeled_cap: Option<usize>,
    pub template_id: Option<String>,
    pub normalization_profile: Option<String>,
    pub cot_mode: Option<bool>,
    pub golden_demos: Option<Vec<DemoPair>>,
    pub exclude_self_demos: Option<bool>,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    pub cache_dir: Option<PathBuf>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| UspError::InvalidField {
            field: "config".into(),
            reason: format!("{}: {e}", path.display()),
        })?;
        serde_json::from_slice(&bytes).map_err(|e| UspError::InvalidField {
            field: "config".into(),
            reason: format!("{}: {e}", path.display()),
        })
    }

    /// Merge with the task type resolved from the file, flags or dataset.
    pub fn resolve(&self, task_type: TaskType) -> RunConfig {
        let mut config = RunConfig::new(task_type);
        config.k = self.k;
        if let Some(m) = self.m {
            config.m = m;
        }
        if let Some(lambda) = self.lambda {
            config.lambda = lambda;
        }
        if let Some(t) = self.stage1_temperature {
            config.stage1_temperature = t;
        }
        if let Some(t) = self.stage2_temperature {
            config.stage2_temperature = t;
        }
        if let Some(n) = self.max_decode_tokens {
            config.max_decode_tokens = n;
        }
        if let Some(seed) = self.rng_seed {
            config.rng_seed = seed;
        }
        if let Some(cap) = self.unlabeled_cap {
            config.unlabeled_cap = cap;
        }
        if let Some(template) = &self.template_id {
            config.template_id = template.clone();
        }
        if let Some(profile) = &self.normalization_profile {
            config.normalization_profile = profile.clone();
        }
        if let Some(cot) = self.cot_mode {
            config.cot_mode = cot;
        }
        config.golden_demos = self.golden_demos.clone();
        if let Some(flag) = self.exclude_self_demos {
            config.exclude_self_demos = flag;
        }
        config
    }
}
