//! Domain types shared by every other module.
//!
//! All types here are immutable value objects: they validate on construction
//! and carry no behavior beyond that, so they are safe to share across
//! concurrent workers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Result, UspError};
use crate::hashing::sha_hex;

/// Probability-sum slack tolerated by [`ClassDistribution`].
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

/// Task taxonomy driving the choice of confidence scorer and selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    /// Classification: few options, per-option likelihoods available.
    Cls,
    /// Short-form generation: many possible responses, one to a few correct.
    Sfg,
    /// Long-form generation: many plausible responses (e.g. summarization).
    Lfg,
}

impl TaskType {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskType::Cls => "cls",
            TaskType::Sfg => "sfg",
            TaskType::Lfg => "lfg",
        }
    }
}

impl std::fmt::Display for TaskType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One unlabeled input query.
///
/// `references` hold gold answers for evaluation only; Stage-1/Stage-2 logic
/// never reads them (the zero-shot guarantee).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskQuery {
    pub id: String,
    pub text: String,
    /// Label space for classification tasks; absent otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    /// Gold answer(s), evaluation only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<String>,
}

impl TaskQuery {
    /// Query with a caller-supplied id.
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        TaskQuery {
            id: id.into(),
            text: text.into(),
            options: None,
            references: Vec::new(),
        }
    }

    /// Query whose id is a content hash of its text, for stable cache keys
    /// and demo dedup when the caller supplies none.
    pub fn from_text(text: impl Into<String>) -> Self {
        let text = text.into();
        let id = sha_hex(&[&text])[..16].to_string();
        TaskQuery {
            id,
            text,
            options: None,
            references: Vec::new(),
        }
    }

    pub fn with_options(mut self, options: Vec<String>) -> Self {
        self.options = Some(options);
        self
    }

    pub fn with_references(mut self, references: Vec<String>) -> Self {
        self.references = references;
        self
    }

    /// Check the per-task invariants: non-empty text, options present iff the
    /// task is classification, and at least two distinct options then.
    pub fn validate(&self, task: TaskType) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(UspError::InvalidField {
                field: "text".into(),
                reason: format!("query `{}` has empty text", self.id),
            });
        }
        match (task, &self.options) {
            (TaskType::Cls, None) => Err(UspError::ClsWithoutOptions(self.id.clone())),
            (TaskType::Cls, Some(options)) => {
                let mut distinct: Vec<&str> = options.iter().map(|o| o.trim()).collect();
                distinct.sort_unstable();
                distinct.dedup();
                if distinct.len() < 2 {
                    return Err(UspError::InvalidField {
                        field: "options".into(),
                        reason: format!("query `{}` needs >= 2 distinct options", self.id),
                    });
                }
                Ok(())
            }
            (_, Some(_)) => Err(UspError::InvalidField {
                field: "options".into(),
                reason: format!(
                    "query `{}` carries options but the task is {task}",
                    self.id
                ),
            }),
            (_, None) => Ok(()),
        }
    }
}

/// Normalized probabilities over a label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    probs: BTreeMap<String, f64>,
}

impl ClassDistribution {
    /// Validates non-negativity and unit mass (within 1e-9).
    pub fn new(probs: BTreeMap<String, f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(UspError::InvalidDistribution("no classes".into()));
        }
        let mut sum = 0.0;
        for (label, p) in &probs {
            if !p.is_finite() || *p < 0.0 {
                return Err(UspError::InvalidDistribution(format!(
                    "probability of `{label}` is {p}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(UspError::InvalidDistribution(format!(
                "probabilities sum to {sum}"
            )));
        }
        Ok(ClassDistribution { probs })
    }

    /// Softmax over per-option log-likelihoods.
    pub fn from_log_likelihoods(lls: &BTreeMap<String, f64>) -> Result<Self> {
        if lls.is_empty() {
            return Err(UspError::InvalidDistribution("no log-likelihoods".into()));
        }
        for (label, ll) in lls {
            if !ll.is_finite() {
                return Err(UspError::InvalidDistribution(format!(
                    "log-likelihood of `{label}` is {ll}"
                )));
            }
        }
        let max = lls.values().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: BTreeMap<String, f64> = lls
            .iter()
            .map(|(label, ll)| (label.clone(), (ll - max).exp()))
            .collect();
        let total: f64 = exps.values().sum();
        let probs = exps
            .into_iter()
            .map(|(label, e)| (label, e / total))
            .collect();
        Ok(ClassDistribution { probs })
    }

    pub fn probs(&self) -> &BTreeMap<String, f64> {
        &self.probs
    }

    pub fn prob(&self, label: &str) -> f64 {
        self.probs.get(label).copied().unwrap_or(0.0)
    }

    /// The key set must equal the query's options.
    pub fn matches_labels(&self, options: &[String]) -> bool {
        self.probs.len() == options.len()
            && options.iter().all(|o| self.probs.contains_key(o.trim()))
    }

    /// Argmax label, ties broken by earliest position in `order`.
    pub fn argmax<'a>(&self, order: &'a [String]) -> &'a str {
        let mut best: Option<(&'a str, f64)> = None;
        for label in order {
            let p = self.prob(label.trim());
            match best {
                Some((_, bp)) if p <= bp => {}
                _ => best = Some((label, p)),
            }
        }
        best.map(|(l, _)| l).unwrap_or("")
    }
}

/// The m stochastic generations drawn for one query (post-truncation,
/// pre-normalization, in generation order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub samples: Vec<String>,
    pub decode_temperature: f64,
}

impl SampleSet {
    pub fn new(samples: Vec<String>, decode_temperature: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(UspError::DegenerateM(samples.len()));
        }
        Ok(SampleSet {
            samples,
            decode_temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Raw Stage-1 evidence backing a candidate: a class distribution (CLS) or a
/// sample set (SFG/LFG).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Evidence {
    Distribution(ClassDistribution),
    Samples(SampleSet),
}

/// A query paired with a model-generated response, its raw evidence, and the
/// confidence score / embedding attached during the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDemo {
    pub query: TaskQuery,
    pub response: String,
    pub evidence: Evidence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Embedding>,
}

/// One rendered demo: query text plus response text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoPair {
    pub query_id: String,
    pub query: String,
    pub response: String,
}

impl DemoPair {
    pub fn new(
        query_id: impl Into<String>,
        query: impl Into<String>,
        response: impl Into<String>,
    ) -> Self {
        DemoPair {
            query_id: query_id.into(),
            query: query.into(),
            response: response.into(),
        }
    }
}

/// The ordered selected pseudo-demos, with per-class sublists for CLS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSet {
    /// Selection order (class-interleaved for CLS).
    pub demos: Vec<DemoPair>,
    /// Per-class sublists, present for classification demo sets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<BTreeMap<String, Vec<DemoPair>>>,
    pub k_effective: usize,
}

impl DemoSet {
    pub fn empty() -> Self {
        DemoSet {
            demos: Vec::new(),
            per_class: None,
            k_effective: 0,
        }
    }

    /// No two demos may share a query id.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for demo in &self.demos {
            if !seen.insert(demo.query_id.as_str()) {
                return Err(UspError::InvalidField {
                    field: "demos".into(),
                    reason: format!("query id `{}` selected twice", demo.query_id),
                });
            }
        }
        Ok(())
    }
}

fn default_m() -> usize {
    6
}
fn default_lambda() -> f64 {
    0.2
}
fn default_stage1_temperature() -> f64 {
    0.7
}
fn default_max_decode_tokens() -> usize {
    128
}
fn default_unlabeled_cap() -> usize {
    64
}

/// Full run configuration. Every field has a serde default, so an empty
/// document plus a task type is a valid starting point; `validate_config`
/// fills the task-dependent defaults and rejects inconsistent settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task_type: TaskType,
    /// Demo budget K. `None` means the task default: 5 for CLS/SFG, 1 for
    /// LFG, 3 in chain-of-thought mode.
    #[serde(default)]
    pub k: Option<usize>,
    /// Stochastic decode repetitions per query in Stage 1.
    #[serde(default = "default_m")]
    pub m: usize,
    /// Diversity trade-off weight in the greedy selector.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_stage1_temperature")]
    pub stage1_temperature: f64,
    /// 0 = greedy decoding, the default for final inference.
    #[serde(default)]
    pub stage2_temperature: f64,
    #[serde(default = "default_max_decode_tokens")]
    pub max_decode_tokens: usize,
    #[serde(default)]
    pub rng_seed: u64,
    /// Cap on the unlabeled demo-generation set; larger sets are subsampled.
    #[serde(default = "default_unlabeled_cap")]
    pub unlabeled_cap: usize,
    /// Prompt template name; empty means the task default.
    #[serde(default)]
    pub template_id: String,
    /// Answer-normalization profile name; empty means the task default.
    #[serde(default)]
    pub normalization_profile: String,
    /// Two-step zero-shot chain-of-thought prompting in Stage 1 and
    /// rationale-carrying demos in Stage 2.
    #[serde(default)]
    pub cot_mode: bool,
    /// Golden demonstrations for the few-shot variants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub golden_demos: Option<Vec<DemoPair>>,
    /// Drop a test query's own pseudo-demo from its Stage-2 prompt.
    #[serde(default)]
    pub exclude_self_demos: bool,
}

impl RunConfig {
    pub fn new(task_type: TaskType) -> Self {
        RunConfig {
            task_type,
            k: None,
            m: default_m(),
            lambda: default_lambda(),
            stage1_temperature: default_stage1_temperature(),
            stage2_temperature: 0.0,
            max_decode_tokens: default_max_decode_tokens(),
            rng_seed: 0,
            unlabeled_cap: default_unlabeled_cap(),
            template_id: String::new(),
            normalization_profile: String::new(),
            cot_mode: false,
            golden_demos: None,
            exclude_self_demos: false,
        }
    }

    fn default_k(&self) -> usize {
        if self.cot_mode {
            3
        } else {
            match self.task_type {
                TaskType::Cls | TaskType::Sfg => 5,
                TaskType::Lfg => 1,
            }
        }
    }

    /// Demo budget with the task default applied.
    pub fn demo_count(&self) -> usize {
        self.k.unwrap_or_else(|| self.default_k())
    }

    fn default_template(&self) -> &'static str {
        if self.cot_mode {
            "cot"
        } else {
            match self.task_type {
                TaskType::Cls | TaskType::Sfg => "qa",
                TaskType::Lfg => "summary",
            }
        }
    }

    fn default_profile(&self) -> &'static str {
        match self.task_type {
            TaskType::Cls | TaskType::Sfg => "default",
            TaskType::Lfg => "summary",
        }
    }
}

/// Fill defaults and reject invalid settings.
pub fn validate_config(mut config: RunConfig) -> Result<RunConfig> {
    let invalid = |field: &str, reason: String| UspError::InvalidField {
        field: field.into(),
        reason,
    };

    let k = config.demo_count();
    if k < 1 {
        return Err(invalid("k", "demo budget must be >= 1".into()));
    }
    config.k = Some(k);

    if config.task_type != TaskType::Cls && config.m < 2 {
        return Err(invalid(
            "m",
            format!("need >= 2 samples for {} scoring, got {}", config.task_type, config.m),
        ));
    }
    if config.lambda.is_nan() || config.lambda < 0.0 {
        return Err(invalid("lambda", format!("must be >= 0, got {}", config.lambda)));
    }
    if config.stage1_temperature.is_nan() || config.stage1_temperature < 0.0 {
        return Err(invalid(
            "stage1_temperature",
            format!("must be >= 0, got {}", config.stage1_temperature),
        ));
    }
    if config.task_type != TaskType::Cls && config.stage1_temperature == 0.0 {
        return Err(invalid(
            "stage1_temperature",
            "generative Stage 1 samples with non-zero temperature".into(),
        ));
    }
    if config.cot_mode && config.task_type == TaskType::Lfg {
        return Err(invalid(
            "cot_mode",
            "chain-of-thought prompting applies to classification and short-form tasks".into(),
        ));
    }
    if config.stage2_temperature.is_nan() || config.stage2_temperature < 0.0 {
        return Err(invalid(
            "stage2_temperature",
            format!("must be >= 0, got {}", config.stage2_temperature),
        ));
    }
    if config.max_decode_tokens == 0 {
        return Err(invalid("max_decode_tokens", "must be >= 1".into()));
    }
    if config.unlabeled_cap < k {
        return Err(invalid(
            "unlabeled_cap",
            format!("must be >= k ({k}), got {}", config.unlabeled_cap),
        ));
    }
    if config.template_id.is_empty() {
        config.template_id = config.default_template().to_string();
    }
    if config.normalization_profile.is_empty() {
        config.normalization_profile = config.default_profile().to_string();
    }
    crate::metrics::profile(&config.normalization_profile)?;
    crate::pipeline::PromptTemplate::by_id(&config.template_id)?;
    if let Some(golden) = &config.golden_demos {
        for demo in golden {
            if demo.query.trim().is_empty() || demo.response.trim().is_empty() {
                return Err(invalid("golden_demos", "golden demos need non-empty query and response".into()));
            }
        }
    }
    Ok(config)
}
