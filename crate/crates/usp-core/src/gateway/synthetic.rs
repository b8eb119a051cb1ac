//! Deterministic synthetic oracle.
//!
//! A stand-in model with a hidden truth table and a tunable link between its
//! reported confidence and its actual correctness. It is a pure function of
//! (spec, seed, prompt), which makes every pipeline property testable with
//! no network:
//!
//! - per query, a latent difficulty draws the probability that the oracle's
//!   believed answer matches the truth; `calibration` scales how much the
//!   reported confidence tracks that probability (1.0 = always correct and
//!   fully confident, 0.0 = confidence is independent noise);
//! - demonstrations found in the prompt raise the per-query accuracy in
//!   proportion to the fraction of them whose response contains the truth
//!   for their own query, so in-context learning helps exactly when the
//!   demos are good.
//!
//! The oracle locates queries by scanning the prompt for known query texts;
//! the last occurrence is the test query, earlier ones are demos.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UspError};
use crate::gateway::{Backend, BackendResponse, DecodeParams};
use crate::hashing::{derive_seed, sha_hex};
use crate::model::{ClassDistribution, TaskQuery, TaskType};

/// One row of the hidden truth table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub id: String,
    pub text: String,
    pub answer: String,
}

fn default_difficulty() -> f64 {
    2.0
}
fn default_icl_gain() -> f64 {
    0.7
}

/// Specification of a synthetic oracle. Same spec + seed + inputs always
/// produce identical outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOracleSpec {
    pub entries: Vec<OracleEntry>,
    /// In [0, 1]: how strongly reported confidence tracks correctness.
    pub calibration: f64,
    pub noise_seed: u64,
    /// Error-rate scale; larger means a harder task.
    #[serde(default = "default_difficulty")]
    pub difficulty: f64,
    /// How much correct in-context demos lift per-query accuracy.
    #[serde(default = "default_icl_gain")]
    pub icl_gain: f64,
}

impl SyntheticOracleSpec {
    pub fn new(entries: Vec<OracleEntry>, calibration: f64, noise_seed: u64) -> Self {
        SyntheticOracleSpec {
            entries,
            calibration,
            noise_seed,
            difficulty: default_difficulty(),
            icl_gain: default_icl_gain(),
        }
    }
}

pub struct SyntheticBackend {
    spec: SyntheticOracleSpec,
    id: String,
}

/// Rationale trigger recognized in chain-of-thought prompts.
const RATIONALE_TRIGGER: &str = "Let's think step by step.";
/// Answer trigger recognized in chain-of-thought prompts.
const ANSWER_TRIGGER: &str = "So the answer is";

impl SyntheticBackend {
    pub fn new(spec: SyntheticOracleSpec) -> Self {
        let mut parts: Vec<&str> = vec!["oracle"];
        let strings: Vec<String> = spec
            .entries
            .iter()
            .map(|e| format!("{}\u{1}{}\u{1}{}", e.id, e.text, e.answer))
            .collect();
        parts.extend(strings.iter().map(|s| s.as_str()));
        let seed = spec.noise_seed.to_string();
        let cal = format!("{:x}", spec.calibration.to_bits());
        let diff = format!("{:x}", spec.difficulty.to_bits());
        let gain = format!("{:x}", spec.icl_gain.to_bits());
        parts.push(&seed);
        parts.push(&cal);
        parts.push(&diff);
        parts.push(&gain);
        let id = format!("synthetic:{}", &sha_hex(&parts)[..16]);
        SyntheticBackend { spec, id }
    }

    pub fn spec(&self) -> &SyntheticOracleSpec {
        &self.spec
    }

    fn rng(&self, parts: &[&str]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.spec.noise_seed, parts))
    }

    fn uniform(&self, parts: &[&str]) -> f64 {
        self.rng(parts).gen::<f64>()
    }

    /// All occurrences of known query texts in the prompt, sorted by
    /// position. The last one is the test query; earlier ones are demos.
    fn occurrences(&self, prompt: &str) -> Vec<(usize, usize)> {
        let mut found = Vec::new();
        for (idx, entry) in self.spec.entries.iter().enumerate() {
            let mut start = 0;
            while let Some(pos) = prompt[start..].find(&entry.text) {
                found.push((start + pos, idx));
                start += pos + entry.text.len();
            }
        }
        found.sort_unstable();
        found
    }

    /// Fraction of prompt demos whose span contains the truth of their own
    /// query.
    fn correct_demo_fraction(&self, prompt: &str, occurrences: &[(usize, usize)]) -> f64 {
        if occurrences.len() < 2 {
            return 0.0;
        }
        let demos = &occurrences[..occurrences.len() - 1];
        let mut correct = 0usize;
        for (i, (pos, entry_idx)) in demos.iter().enumerate() {
            let entry = &self.spec.entries[*entry_idx];
            let span_start = pos + entry.text.len();
            let span_end = occurrences[i + 1].0;
            if prompt[span_start..span_end].contains(&entry.answer) {
                correct += 1;
            }
        }
        correct as f64 / demos.len() as f64
    }

    /// Zero-shot per-query accuracy: 1 at calibration 1, degrading with the
    /// query's latent difficulty otherwise.
    fn base_accuracy(&self, qid: &str) -> f64 {
        let r = self.uniform(&[qid, "difficulty"]);
        let error = (1.0 - self.spec.calibration) * self.spec.difficulty * r;
        (1.0 - error).clamp(0.02, 1.0)
    }

    fn boosted_accuracy(&self, qid: &str, demo_fraction: f64) -> f64 {
        let base = self.base_accuracy(qid);
        base + self.spec.icl_gain * demo_fraction * (1.0 - base)
    }

    fn stable_tag(id: &str) -> String {
        sha_hex(&["tag", id])[..6].to_string()
    }

    /// Three mutually dissimilar wrong answers per query, so sample
    /// agreement tracks correctness rather than shared error wording.
    fn wrong_answer(&self, entry: &OracleEntry, variant: usize) -> String {
        let tag = Self::stable_tag(&entry.id);
        match variant % 3 {
            0 => format!("an unrelated aside about {tag} drifting far from this topic"),
            1 => format!("speculative commentary on {tag} lacking grounding or supporting material"),
            _ => format!("several details stay unclear for {tag} pending extra verification work"),
        }
    }

    /// Believed answer under a fixed per-query coin and accuracy `a`.
    fn greedy_answer(&self, entry: &OracleEntry, accuracy: f64) -> String {
        let coin = self.uniform(&[&entry.id, "greedy"]);
        if coin < accuracy {
            entry.answer.clone()
        } else {
            let pick = self.rng(&[&entry.id, "greedy-wrong"]).gen_range(0..3);
            self.wrong_answer(entry, pick)
        }
    }

    fn sampled_answer(&self, entry: &OracleEntry, accuracy: f64, stream: &str) -> String {
        let mut rng = self.rng(&[&entry.id, "sample", stream]);
        if rng.gen::<f64>() < accuracy {
            // Long answers vary in surface form across samples even when
            // they agree in substance, as sampled long-form text does.
            // Calibration 1.0 disables sampling noise entirely.
            if self.spec.calibration < 1.0 && entry.answer.split_whitespace().count() >= 5 {
                const OPENERS: [&str; 4] = ["overall", "broadly", "in summary", "put plainly"];
                let opener = OPENERS[rng.gen_range(0..OPENERS.len())];
                return format!("{opener} {}", entry.answer);
            }
            entry.answer.clone()
        } else {
            let pick = rng.gen_range(0..3);
            self.wrong_answer(entry, pick)
        }
    }

    fn rationale(&self, entry: &OracleEntry, stream: &str) -> String {
        let tag = Self::stable_tag(&entry.id);
        format!("first restate the question then weigh the evidence for case {tag} along path {stream}")
    }

    fn entry_for_prompt<'a>(&'a self, prompt: &str) -> Option<(&'a OracleEntry, f64)> {
        let occurrences = self.occurrences(prompt);
        let (_, idx) = *occurrences.last()?;
        let entry = &self.spec.entries[idx];
        let fraction = self.correct_demo_fraction(prompt, &occurrences);
        let accuracy = self.boosted_accuracy(&entry.id, fraction);
        Some((entry, accuracy))
    }
}

impl Backend for SyntheticBackend {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn generate(&self, prompt: &str, params: &DecodeParams) -> Result<BackendResponse> {
        params.validate()?;
        if prompt.is_empty() {
            return Err(UspError::InvalidField {
                field: "prompt".into(),
                reason: "empty prompt".into(),
            });
        }
        let Some((entry, accuracy)) = self.entry_for_prompt(prompt) else {
            // Unknown query: a real model would still answer something.
            let filler = vec!["unknown".to_string(); params.num_samples];
            return Ok(BackendResponse::completions(filler));
        };

        let trimmed = prompt.trim_end();
        let mut completions = Vec::with_capacity(params.num_samples);

        if trimmed.ends_with(ANSWER_TRIGGER) {
            // Second step of the two-step chain-of-thought protocol: the
            // answer is keyed to the rationale text carried by the prompt,
            // so distinct reasoning paths stay distinct.
            let rationale_span = trimmed
                .rfind(RATIONALE_TRIGGER)
                .map(|p| &trimmed[p + RATIONALE_TRIGGER.len()..trimmed.len() - ANSWER_TRIGGER.len()])
                .unwrap_or("");
            let path_key = sha_hex(&["path", rationale_span]);
            for sample in 0..params.num_samples {
                let stream = format!("{path_key}:{sample}");
                let answer = if params.temperature == 0.0 && rationale_span.is_empty() {
                    self.greedy_answer(entry, accuracy)
                } else {
                    self.sampled_answer(entry, accuracy, &stream)
                };
                completions.push(format!(" {answer}"));
            }
        } else if trimmed.ends_with(RATIONALE_TRIGGER) {
            // Chain-of-thought continuation: rationale plus an inline answer.
            for sample in 0..params.num_samples {
                let stream = sample.to_string();
                let rationale = self.rationale(entry, &stream);
                let answer = if params.temperature == 0.0 {
                    self.greedy_answer(entry, accuracy)
                } else {
                    self.sampled_answer(entry, accuracy, &stream)
                };
                completions.push(format!(" {rationale} {ANSWER_TRIGGER} {answer}."));
            }
        } else {
            for sample in 0..params.num_samples {
                let answer = if params.temperature == 0.0 {
                    self.greedy_answer(entry, accuracy)
                } else {
                    self.sampled_answer(entry, accuracy, &sample.to_string())
                };
                completions.push(format!(" {answer}"));
            }
        }
        Ok(BackendResponse::completions(completions))
    }

    fn score_options(&self, prompt: &str, options: &[String]) -> Result<ClassDistribution> {
        if options.len() < 2 {
            return Err(UspError::InvalidField {
                field: "options".into(),
                reason: "need >= 2 options".into(),
            });
        }
        let labels: Vec<String> = options.iter().map(|o| o.trim().to_string()).collect();
        let uniform = 1.0 / labels.len() as f64;

        let Some((entry, accuracy)) = self.entry_for_prompt(prompt) else {
            let probs: BTreeMap<String, f64> =
                labels.iter().map(|l| (l.clone(), uniform)).collect();
            return ClassDistribution::new(probs);
        };

        let truth = entry.answer.trim();
        let believed = if labels.iter().any(|l| l == truth) {
            let coin = self.uniform(&[&entry.id, "greedy"]);
            if coin < accuracy {
                truth.to_string()
            } else {
                let wrong: Vec<&String> = labels.iter().filter(|l| *l != truth).collect();
                let pick = self.rng(&[&entry.id, "greedy-wrong"]).gen_range(0..wrong.len());
                wrong[pick].clone()
            }
        } else {
            // Truth not among the options: pick a stable arbitrary option.
            labels[0].clone()
        };

        // Reported peak confidence blends independent noise with the true
        // per-query accuracy, weighted by the calibration knob.
        let noise = uniform + (1.0 - uniform) * self.uniform(&[&entry.id, "confidence"]);
        let peak = ((1.0 - self.spec.calibration) * noise + self.spec.calibration * accuracy)
            .clamp(uniform, 1.0);
        let rest = (1.0 - peak) / (labels.len() - 1) as f64;
        let mut probs = BTreeMap::new();
        for label in &labels {
            let p = if *label == believed { peak } else { rest };
            probs.insert(label.clone(), p);
        }
        ClassDistribution::new(probs)
    }
}

/// Bundled synthetic task family: queries with hidden truths for a given
/// task type. Query texts are mutually non-containing so prompt scanning is
/// unambiguous, and generative answers stay within summary word bounds.
pub fn synthetic_task(
    task: TaskType,
    n_queries: usize,
    n_classes: usize,
    seed: u64,
) -> (Vec<TaskQuery>, Vec<OracleEntry>) {
    const LABELS: [&str; 6] = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"];
    const TOPICS: [&str; 8] = [
        "shipment", "ledger", "reservoir", "turbine", "orchard", "archive", "antenna", "foundry",
    ];
    const WORDS: [&str; 10] = [
        "amber", "copper", "velvet", "granite", "maple", "cobalt", "ivory", "russet", "slate",
        "pearl",
    ];
    assert!(
        (2..=LABELS.len()).contains(&n_classes) || task != TaskType::Cls,
        "classification needs 2..=6 classes"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["synthetic-task"]));
    let mut queries = Vec::with_capacity(n_queries);
    let mut entries = Vec::with_capacity(n_queries);
    for i in 0..n_queries {
        let id = format!("q{i:04}");
        let topic = TOPICS[rng.gen_range(0..TOPICS.len())];
        let text = format!(
            "record {i:04}: the {topic} inspection on day {} noted code {}",
            rng.gen_range(1..29),
            rng.gen_range(100..999),
        );
        let (query, answer) = match task {
            TaskType::Cls => {
                let options: Vec<String> =
                    LABELS[..n_classes].iter().map(|l| l.to_string()).collect();
                let answer = options[rng.gen_range(0..n_classes)].clone();
                (
                    TaskQuery::new(&id, &text)
                        .with_options(options)
                        .with_references(vec![answer.clone()]),
                    answer,
                )
            }
            TaskType::Sfg => {
                let answer = format!(
                    "{} {}",
                    WORDS[rng.gen_range(0..WORDS.len())],
                    TOPICS[rng.gen_range(0..TOPICS.len())]
                );
                (
                    TaskQuery::new(&id, &text).with_references(vec![answer.clone()]),
                    answer,
                )
            }
            TaskType::Lfg => {
                let answer = format!(
                    "the {} {} review covered {} findings about the {} site",
                    WORDS[rng.gen_range(0..WORDS.len())],
                    TOPICS[rng.gen_range(0..TOPICS.len())],
                    rng.gen_range(2..9),
                    WORDS[rng.gen_range(0..WORDS.len())],
                );
                (
                    TaskQuery::new(&id, &text).with_references(vec![answer.clone()]),
                    answer,
                )
            }
        };
        queries.push(query);
        entries.push(OracleEntry { id, text, answer });
    }
    (queries, entries)
}
