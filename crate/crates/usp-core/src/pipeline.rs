//! Two-stage orchestration.
//!
//! Stage 1 prompts the backend zero-shot over the unlabeled set to build a
//! scored candidate pool (one scoring call per query for classification, m
//! temperature samples otherwise). A task-specific selector turns the pool
//! into the pseudo-demo set. Stage 2 prepends the demos to every test query
//! and decodes once, greedily, for the final predictions; there is no
//! majority vote at inference time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, Embedding};
use crate::error::{Result, UspError};
use crate::gateway::{Backend, CountingBackend, DecodeParams};
use crate::hashing::derive_seed;
use crate::metrics::{
    default_stop_sequences, majority_vote, normalize_answer, profile, truncate_at_stop,
    NormalizationProfile,
};
use crate::model::{
    validate_config, CandidateDemo, DemoPair, DemoSet, Evidence, RunConfig, SampleSet, TaskQuery,
    TaskType,
};
use crate::scoring::{score_cls, score_lfg, score_sfg, tukey_upper_filter, ScoredPool};
use crate::selection::{
    build_cls_demoset, draw_demos_for_query, select_greedy_seeded, select_random_baseline,
    SelectionTrace,
};

/// Trigger strings for chain-of-thought prompting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotTriggers {
    pub rationale_trigger: String,
    pub answer_trigger: String,
}

/// A prompt template: demos render first in selection order, then the bare
/// query, joined by the separator. Golden and pseudo demos share the same
/// renderer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub demo_format: String,
    pub query_format: String,
    pub separator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction_prefix: Option<String>,
    pub stop_sequences: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot: Option<CotTriggers>,
}

impl PromptTemplate {
    /// Built-in templates: `qa`, `cot`, `summary`.
    pub fn by_id(id: &str) -> Result<Self> {
        match id {
            "qa" => Ok(PromptTemplate {
                id: id.into(),
                demo_format: "Q: {query}\nA: {response}".into(),
                query_format: "Q: {query}\nA:".into(),
                separator: "\n\n".into(),
                instruction_prefix: None,
                stop_sequences: default_stop_sequences(),
                cot: None,
            }),
            "cot" => Ok(PromptTemplate {
                id: id.into(),
                demo_format: "Q: {query}\nA: Let's think step by step. {response}".into(),
                query_format: "Q: {query}\nA: Let's think step by step.".into(),
                separator: "\n\n".into(),
                instruction_prefix: None,
                stop_sequences: default_stop_sequences(),
                cot: Some(CotTriggers {
                    rationale_trigger: "Let's think step by step.".into(),
                    answer_trigger: "So the answer is".into(),
                }),
            }),
            "summary" => {
                let mut stops = default_stop_sequences();
                stops.push("Article:".into());
                Ok(PromptTemplate {
                    id: id.into(),
                    demo_format: "Article: {query}\n\ntl;dr: {response}".into(),
                    query_format: "Article: {query}\n\ntl;dr:".into(),
                    separator: "\n\n".into(),
                    instruction_prefix: None,
                    stop_sequences: stops,
                    cot: None,
                })
            }
            other => Err(UspError::TemplateRenderFailure(format!(
                "unknown template `{other}`"
            ))),
        }
    }

    fn render_demo(&self, demo: &DemoPair) -> Result<String> {
        if !self.demo_format.contains("{query}") || !self.demo_format.contains("{response}") {
            return Err(UspError::TemplateRenderFailure(format!(
                "demo format of `{}` is missing a placeholder",
                self.id
            )));
        }
        Ok(self
            .demo_format
            .replace("{query}", &demo.query)
            .replace("{response}", &demo.response))
    }

    /// Concatenate demos and the test query into one prompt,
    /// byte-deterministically.
    pub fn render(&self, demos: &[DemoPair], query_text: &str) -> Result<String> {
        if !self.query_format.contains("{query}") {
            return Err(UspError::TemplateRenderFailure(format!(
                "query format of `{}` is missing {{query}}",
                self.id
            )));
        }
        let mut blocks = Vec::with_capacity(demos.len() + 2);
        if let Some(prefix) = &self.instruction_prefix {
            blocks.push(prefix.clone());
        }
        for demo in demos {
            blocks.push(self.render_demo(demo)?);
        }
        blocks.push(self.query_format.replace("{query}", query_text));
        Ok(blocks.join(&self.separator))
    }
}

/// Render demos followed by the query, in that concatenation order.
pub fn assemble_prompt(
    demos: &[DemoPair],
    query: &TaskQuery,
    template: &PromptTemplate,
) -> Result<String> {
    template.render(demos, &query.text)
}

/// The comparison strategies the operator surface exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Usp,
    RandomDemo,
    ZeroShot,
    FewShot,
    UspFs,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Usp => "usp",
            Strategy::RandomDemo => "random-demo",
            Strategy::ZeroShot => "zero-shot",
            Strategy::FewShot => "few-shot",
            Strategy::UspFs => "usp-fs",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "usp" => Ok(Strategy::Usp),
            "random-demo" => Ok(Strategy::RandomDemo),
            "zero-shot" => Ok(Strategy::ZeroShot),
            "few-shot" => Ok(Strategy::FewShot),
            "usp-fs" => Ok(Strategy::UspFs),
            other => Err(UspError::InvalidField {
                field: "mode".into(),
                reason: format!("unknown mode `{other}`"),
            }),
        }
    }
}

/// A query dropped with its reason; the run continues without it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedQuery {
    pub query_id: String,
    pub reason: String,
}

/// A final prediction linked to the exact prompt that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query_id: String,
    pub prompt: String,
    pub raw_completion: String,
    pub prediction: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<String>,
}

/// Counts and notes accumulated across a run. Call counts are the operations
/// the pipeline requested, so they replay identically from a warm cache.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    /// Mean confidence score over the non-outlier pool: the zero-shot
    /// forecast of how much in-context demos will help.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub average_score: Option<f64>,
    pub stage1_decode_ops: u64,
    pub stage1_scoring_ops: u64,
    pub stage2_decode_ops: u64,
    pub stage2_scoring_ops: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stage1_dropped: Vec<DroppedQuery>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stage2_failed: Vec<DroppedQuery>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Everything a run produces; a snapshot sufficient to replay it from a
/// warm cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub strategy: Strategy,
    pub config: RunConfig,
    pub pool: Vec<PoolRecord>,
    pub demoset: DemoSet,
    pub traces: Vec<SelectionTrace>,
    pub predictions: Vec<PredictionRecord>,
    pub diagnostics: RunDiagnostics,
}

/// Flattened pool candidate for artifact files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub query_id: String,
    pub query_text: String,
    pub response: String,
    pub evidence: Evidence,
    pub score: f64,
    pub outlier: bool,
}

fn pool_records(pool: &ScoredPool) -> Vec<PoolRecord> {
    pool.candidates
        .iter()
        .enumerate()
        .map(|(i, candidate)| PoolRecord {
            query_id: candidate.query.id.clone(),
            query_text: candidate.query.text.clone(),
            response: candidate.response.clone(),
            evidence: candidate.evidence.clone(),
            score: candidate.score.unwrap_or(f64::NAN),
            outlier: pool.is_outlier(i),
        })
        .collect()
}

/// Deterministic seeded subsample keeping the original query order.
fn cap_unlabeled(unlabeled: &[TaskQuery], cap: usize, seed: u64) -> Vec<&TaskQuery> {
    if unlabeled.len() <= cap {
        return unlabeled.iter().collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["unlabeled-cap"]));
    let mut picks = rand::seq::index::sample(&mut rng, unlabeled.len(), cap).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| &unlabeled[i]).collect()
}

fn all_failed(stage: &str, dropped: &[DroppedQuery]) -> UspError {
    let first = dropped
        .first()
        .map(|d| format!("{}: {}", d.query_id, d.reason))
        .unwrap_or_else(|| "no queries".into());
    UspError::AllQueriesFailed {
        stage: stage.into(),
        detail: format!("{} queries dropped; first: {first}", dropped.len()),
    }
}

/// Stage 1 for classification: one scoring call per unlabeled query; the
/// candidate response is the argmax class and the score its negative entropy.
pub fn stage1_cls<B: Backend>(
    unlabeled: &[TaskQuery],
    backend: &B,
    template: &PromptTemplate,
    config: &RunConfig,
) -> Result<(ScoredPool, Vec<DroppedQuery>)> {
    let mut candidates = Vec::new();
    let mut dropped = Vec::new();
    for query in cap_unlabeled(unlabeled, config.unlabeled_cap, config.rng_seed) {
        query.validate(TaskType::Cls)?;
        let options = query.options.as_ref().expect("validated above");
        let prompt = template.render(&[], &query.text)?;
        let outcome = backend
            .score_options(&prompt, options)
            .and_then(|dist| score_cls(&dist).map(|score| (dist, score)));
        match outcome {
            Ok((dist, score)) => {
                let response = dist.argmax(options).trim().to_string();
                candidates.push(CandidateDemo {
                    query: query.clone(),
                    response,
                    evidence: Evidence::Distribution(dist),
                    score: Some(score),
                    embedding: None,
                });
            }
            Err(e) => dropped.push(DroppedQuery {
                query_id: query.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    if candidates.is_empty() {
        return Err(all_failed("stage1", &dropped));
    }
    Ok((ScoredPool::new(candidates, TaskType::Cls, None)?, dropped))
}

/// One query's worth of Stage-1 sampling; chain-of-thought mode follows the
/// two-step protocol (sample rationales, then extract an answer per path).
struct SampledQuery {
    answers: Vec<String>,
    rationales: Option<Vec<String>>,
}

fn sample_stage1<B: Backend>(
    query: &TaskQuery,
    backend: &B,
    template: &PromptTemplate,
    config: &RunConfig,
) -> Result<SampledQuery> {
    let prompt = template.render(&[], &query.text)?;
    let params = DecodeParams::sampled(config.stage1_temperature, config.m, config.max_decode_tokens)
        .with_stops(template.stop_sequences.clone());
    let response = backend.generate(&prompt, &params)?;

    let Some(cot) = &template.cot else {
        let answers = response
            .completions
            .iter()
            .map(|c| truncate_at_stop(c, &template.stop_sequences).trim().to_string())
            .collect();
        return Ok(SampledQuery {
            answers,
            rationales: None,
        });
    };

    // Two-step zero-shot chain of thought: the sampled continuation up to
    // the answer trigger is the rationale; a second greedy call conditioned
    // on it yields that path's answer.
    let mut answers = Vec::with_capacity(config.m);
    let mut rationales = Vec::with_capacity(config.m);
    for completion in &response.completions {
        let truncated = truncate_at_stop(completion, &template.stop_sequences);
        let rationale = match truncated.find(cot.answer_trigger.as_str()) {
            Some(pos) => truncated[..pos].trim().to_string(),
            None => truncated.trim().to_string(),
        };
        let answer_prompt = format!("{prompt} {rationale}\n{}", cot.answer_trigger);
        let answer_params = DecodeParams::greedy(config.max_decode_tokens)
            .with_stops(template.stop_sequences.clone());
        let answer_response = backend.generate(&answer_prompt, &answer_params)?;
        let answer = truncate_at_stop(&answer_response.completions[0], &template.stop_sequences)
            .trim()
            .to_string();
        answers.push(answer);
        rationales.push(rationale);
    }
    Ok(SampledQuery {
        answers,
        rationales: Some(rationales),
    })
}

/// Stage 1 for generative tasks: m temperature samples per query. Short-form
/// candidates carry their majority answer; long-form candidates are scored
/// by mean pairwise overlap, fenced for degenerate over-confidence, and the
/// survivors' responses are regenerated greedily.
pub fn stage1_generative<B: Backend>(
    unlabeled: &[TaskQuery],
    backend: &B,
    template: &PromptTemplate,
    config: &RunConfig,
) -> Result<(ScoredPool, Vec<DroppedQuery>)> {
    let profile = profile(&config.normalization_profile)?;
    let mut dropped = Vec::new();
    let capped = cap_unlabeled(unlabeled, config.unlabeled_cap, config.rng_seed);

    match config.task_type {
        TaskType::Cls => Err(UspError::InvalidField {
            field: "task_type".into(),
            reason: "classification Stage 1 scores options instead of sampling".into(),
        }),
        TaskType::Sfg => {
            let mut candidates = Vec::new();
            for query in capped {
                query.validate(TaskType::Sfg)?;
                match sfg_candidate(query, backend, template, config, &profile) {
                    Ok(Some(candidate)) => candidates.push(candidate),
                    Ok(None) => dropped.push(DroppedQuery {
                        query_id: query.id.clone(),
                        reason: "empty majority answer".into(),
                    }),
                    Err(e) => dropped.push(DroppedQuery {
                        query_id: query.id.clone(),
                        reason: e.to_string(),
                    }),
                }
            }
            if candidates.is_empty() {
                return Err(all_failed("stage1", &dropped));
            }
            Ok((ScoredPool::new(candidates, TaskType::Sfg, None)?, dropped))
        }
        TaskType::Lfg => {
            let mut interim = Vec::new();
            for query in capped {
                query.validate(TaskType::Lfg)?;
                match sample_stage1(query, backend, template, config) {
                    Ok(sampled) => {
                        let in_bounds: Vec<String> = sampled
                            .answers
                            .iter()
                            .filter(|a| !a.trim().is_empty() && profile.within_word_bounds(a))
                            .cloned()
                            .collect();
                        if in_bounds.len() < 2 {
                            dropped.push(DroppedQuery {
                                query_id: query.id.clone(),
                                reason: "fewer than 2 samples within word bounds".into(),
                            });
                            continue;
                        }
                        let score =
                            score_lfg(&SampleSet::new(in_bounds.clone(), config.stage1_temperature)?)?;
                        interim.push((query.clone(), sampled.answers, in_bounds, score));
                    }
                    Err(e) => dropped.push(DroppedQuery {
                        query_id: query.id.clone(),
                        reason: e.to_string(),
                    }),
                }
            }
            if interim.is_empty() {
                return Err(all_failed("stage1", &dropped));
            }

            let scores: Vec<f64> = interim.iter().map(|(_, _, _, s)| *s).collect();
            let keep = tukey_upper_filter(&scores);
            let mut candidates = Vec::new();
            let mut mask = Vec::new();
            for ((query, samples, in_bounds, score), kept) in interim.into_iter().zip(keep) {
                let evidence = Evidence::Samples(SampleSet::new(
                    samples,
                    config.stage1_temperature,
                )?);
                if !kept {
                    // fenced out: kept in the pool for the audit trail only
                    candidates.push(CandidateDemo {
                        query,
                        response: in_bounds[0].clone(),
                        evidence,
                        score: Some(score),
                        embedding: None,
                    });
                    mask.push(true);
                    continue;
                }
                let prompt = template.render(&[], &query.text)?;
                let params = DecodeParams::greedy(config.max_decode_tokens)
                    .with_stops(template.stop_sequences.clone());
                match backend.generate(&prompt, &params) {
                    Ok(response) => {
                        let greedy =
                            truncate_at_stop(&response.completions[0], &template.stop_sequences)
                                .trim()
                                .to_string();
                        if greedy.is_empty() || !profile.within_word_bounds(&greedy) {
                            dropped.push(DroppedQuery {
                                query_id: query.id.clone(),
                                reason: "greedy regeneration out of word bounds".into(),
                            });
                            continue;
                        }
                        candidates.push(CandidateDemo {
                            query,
                            response: greedy,
                            evidence,
                            score: Some(score),
                            embedding: None,
                        });
                        mask.push(false);
                    }
                    Err(e) => dropped.push(DroppedQuery {
                        query_id: query.id.clone(),
                        reason: e.to_string(),
                    }),
                }
            }
            if candidates.iter().zip(&mask).all(|(_, m)| *m) {
                return Err(all_failed("stage1", &dropped));
            }
            Ok((
                ScoredPool::new(candidates, TaskType::Lfg, Some(mask))?,
                dropped,
            ))
        }
    }
}

fn sfg_candidate<B: Backend>(
    query: &TaskQuery,
    backend: &B,
    template: &PromptTemplate,
    config: &RunConfig,
    profile: &NormalizationProfile,
) -> Result<Option<CandidateDemo>> {
    let sampled = sample_stage1(query, backend, template, config)?;
    let vote = majority_vote(&sampled.answers, profile)?;
    if vote.winner.trim().is_empty() {
        return Ok(None);
    }
    let samples = SampleSet::new(sampled.answers.clone(), config.stage1_temperature)?;
    let score = score_sfg(&samples, profile)?;
    let response = match &sampled.rationales {
        None => vote.winner_raw.clone(),
        Some(rationales) => {
            // store the first sampled path whose answer agrees with the
            // majority winner, rationale included
            let path = sampled
                .answers
                .iter()
                .position(|a| normalize_answer(a, profile) == vote.winner)
                .expect("winner comes from these answers");
            let trigger = template
                .cot
                .as_ref()
                .map(|c| c.answer_trigger.as_str())
                .unwrap_or("So the answer is");
            format!(
                "{} {trigger} {}.",
                rationales[path], sampled.answers[path]
            )
        }
    };
    Ok(Some(CandidateDemo {
        query: query.clone(),
        response,
        evidence: Evidence::Samples(samples),
        score: Some(score),
        embedding: None,
    }))
}

fn embed_demo_text(embedder: &dyn Embedder, query: &str, response: &str) -> Result<Embedding> {
    embedder.embed(&format!("{query}\n{response}"))
}

fn shared_label_space(pool: &ScoredPool) -> Result<Vec<String>> {
    let mut labels: Option<Vec<String>> = None;
    for candidate in &pool.candidates {
        let options = candidate.query.options.as_ref().ok_or_else(|| {
            UspError::ClsWithoutOptions(candidate.query.id.clone())
        })?;
        match &labels {
            None => labels = Some(options.clone()),
            Some(existing) if existing == options => {}
            Some(_) => {
                return Err(UspError::InvalidField {
                    field: "options".into(),
                    reason: format!(
                        "query `{}` has a different label space",
                        candidate.query.id
                    ),
                })
            }
        }
    }
    labels.ok_or(UspError::EmptyPool)
}

/// Embed the pool and dispatch to the task-specific selector. Golden demos,
/// when given, are pre-selected members of the demo set: they exert the
/// diversity penalty and shrink the pseudo-demo budget.
pub fn build_demo_set(
    pool: &ScoredPool,
    config: &RunConfig,
    embedder: &dyn Embedder,
    golden: Option<&[DemoPair]>,
) -> Result<(DemoSet, Vec<SelectionTrace>)> {
    let embeddings: Vec<Embedding> = pool
        .candidates
        .iter()
        .map(|c| embed_demo_text(embedder, &c.query.text, &c.response))
        .collect::<Result<_>>()?;
    let golden_seeds: Vec<Embedding> = golden
        .unwrap_or(&[])
        .iter()
        .map(|g| embed_demo_text(embedder, &g.query, &g.response))
        .collect::<Result<_>>()?;
    let k = config
        .demo_count()
        .saturating_sub(golden.map_or(0, <[DemoPair]>::len));
    if k == 0 {
        return Ok((DemoSet::empty(), Vec::new()));
    }

    match pool.task_type {
        TaskType::Cls => {
            let labels = shared_label_space(pool)?;
            build_cls_demoset(pool, &embeddings, &labels, k, config.lambda, &golden_seeds)
        }
        TaskType::Sfg | TaskType::Lfg => {
            let (set, mut trace) =
                select_greedy_seeded(pool, &embeddings, k, config.lambda, &golden_seeds)?;
            trace.rng_seed = Some(config.rng_seed);
            Ok((set, vec![trace]))
        }
    }
}

/// Mean confidence over the non-outlier pool.
pub fn average_usp_score(pool: &ScoredPool) -> Result<f64> {
    let eligible = pool.eligible_indices();
    if eligible.is_empty() {
        return Err(UspError::EmptyPool);
    }
    let sum: f64 = eligible
        .iter()
        .map(|&i| pool.candidates[i].score.unwrap_or(f64::NAN))
        .sum();
    Ok(sum / eligible.len() as f64)
}

fn demos_for_query(
    query: &TaskQuery,
    demoset: &DemoSet,
    pool: Option<&ScoredPool>,
    config: &RunConfig,
    strategy: Strategy,
) -> Result<Vec<DemoPair>> {
    let mut demos = if demoset.per_class.is_some() {
        draw_demos_for_query(demoset, demoset.k_effective, &query.id, config.rng_seed)?
    } else if strategy == Strategy::RandomDemo {
        let pool = pool.ok_or(UspError::EmptyPool)?;
        let per_query_seed = derive_seed(config.rng_seed, &["random-draw", &query.id]);
        select_random_baseline(pool, config.demo_count(), per_query_seed, None)?.demos
    } else {
        demoset.demos.clone()
    };
    if config.exclude_self_demos {
        demos.retain(|d| d.query_id != query.id);
    }
    Ok(demos)
}

#[allow(clippy::too_many_arguments)]
fn stage2_inner<B: Backend>(
    test: &[TaskQuery],
    demoset: &DemoSet,
    pool: Option<&ScoredPool>,
    backend: &B,
    config: &RunConfig,
    template: &PromptTemplate,
    strategy: Strategy,
    golden: Option<&[DemoPair]>,
) -> Result<(Vec<PredictionRecord>, Vec<DroppedQuery>)> {
    let profile = profile(&config.normalization_profile)?;
    let mut predictions = Vec::new();
    let mut failed = Vec::new();
    for query in test {
        query.validate(config.task_type)?;
        let mut demos = golden.map(<[DemoPair]>::to_vec).unwrap_or_default();
        demos.extend(demos_for_query(query, demoset, pool, config, strategy)?);
        let prompt = template.render(&demos, &query.text)?;

        let outcome: Result<(String, String)> = match config.task_type {
            TaskType::Cls => {
                let options = query.options.as_ref().expect("validated above");
                backend.score_options(&prompt, options).map(|dist| {
                    let label = dist.argmax(options).trim().to_string();
                    (label.clone(), label)
                })
            }
            TaskType::Sfg | TaskType::Lfg => {
                let params = DecodeParams {
                    temperature: config.stage2_temperature,
                    max_tokens: config.max_decode_tokens,
                    num_samples: 1,
                    stop_sequences: template.stop_sequences.clone(),
                };
                backend.generate(&prompt, &params).map(|response| {
                    let raw = response.completions[0].clone();
                    let truncated = truncate_at_stop(&raw, &template.stop_sequences);
                    let answer_text = match &template.cot {
                        Some(cot) => match truncated.rfind(cot.answer_trigger.as_str()) {
                            Some(pos) => truncated[pos + cot.answer_trigger.len()..].to_string(),
                            None => truncated,
                        },
                        None => truncated,
                    };
                    (raw, normalize_answer(&answer_text, &profile))
                })
            }
        };
        match outcome {
            Ok((raw, prediction)) => predictions.push(PredictionRecord {
                query_id: query.id.clone(),
                prompt,
                raw_completion: raw,
                prediction,
                references: query.references.clone(),
            }),
            Err(e) => failed.push(DroppedQuery {
                query_id: query.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    if predictions.is_empty() {
        return Err(all_failed("stage2", &failed));
    }
    Ok((predictions, failed))
}

/// Final inference: per test query, draw its demos, assemble the prompt and
/// decode once (option scoring for classification, greedy decoding plus
/// truncation and normalization otherwise).
pub fn stage2<B: Backend>(
    test: &[TaskQuery],
    demoset: &DemoSet,
    backend: &B,
    config: &RunConfig,
) -> Result<(Vec<PredictionRecord>, Vec<DroppedQuery>)> {
    let template = PromptTemplate::by_id(&config.template_id)?;
    stage2_inner(
        test,
        demoset,
        None,
        backend,
        config,
        &template,
        Strategy::Usp,
        None,
    )
}

/// Full run under a given strategy.
pub fn run_strategy(
    strategy: Strategy,
    config: &RunConfig,
    unlabeled: &[TaskQuery],
    test: &[TaskQuery],
    backend: &dyn Backend,
    embedder: &dyn Embedder,
) -> Result<RunArtifacts> {
    let config = validate_config(config.clone())?;
    if test.is_empty() {
        return Err(UspError::InvalidField {
            field: "test".into(),
            reason: "test set is empty".into(),
        });
    }
    let template = PromptTemplate::by_id(&config.template_id)?;
    let counted = CountingBackend::new(backend);
    let mut warnings = Vec::new();

    let needs_stage1 = matches!(
        strategy,
        Strategy::Usp | Strategy::RandomDemo | Strategy::UspFs
    );
    let golden: Option<Vec<DemoPair>> = match strategy {
        Strategy::FewShot | Strategy::UspFs => {
            let golden = config.golden_demos.clone().filter(|g| !g.is_empty());
            Some(golden.ok_or_else(|| UspError::InvalidField {
                field: "golden_demos".into(),
                reason: format!("{} mode needs golden demos", strategy.as_str()),
            })?)
        }
        _ => None,
    };

    let (pool, demoset, traces, stage1_dropped) = if needs_stage1 {
        if unlabeled.is_empty() {
            return Err(UspError::InvalidField {
                field: "unlabeled".into(),
                reason: "demo generation needs an unlabeled set".into(),
            });
        }
        let (pool, dropped) = match config.task_type {
            TaskType::Cls => stage1_cls(unlabeled, &counted, &template, &config)?,
            TaskType::Sfg | TaskType::Lfg => {
                stage1_generative(unlabeled, &counted, &template, &config)?
            }
        };
        let (demoset, traces) = match strategy {
            Strategy::Usp => build_demo_set(&pool, &config, embedder, None)?,
            Strategy::UspFs => {
                let golden = golden.as_deref().expect("checked above");
                if golden.len() >= config.demo_count() {
                    warnings.push(format!(
                        "{} golden demos fill the budget k={}; no pseudo-demos selected",
                        golden.len(),
                        config.demo_count()
                    ));
                }
                build_demo_set(&pool, &config, embedder, Some(golden))?
            }
            Strategy::RandomDemo => match config.task_type {
                TaskType::Cls => {
                    let labels = shared_label_space(&pool)?;
                    let set = select_random_baseline(
                        &pool,
                        config.demo_count(),
                        config.rng_seed,
                        Some(&labels),
                    )?;
                    (set, Vec::new())
                }
                // generative random demos are drawn per test query
                _ => (DemoSet::empty(), Vec::new()),
            },
            _ => unreachable!(),
        };
        (pool, demoset, traces, dropped)
    } else {
        (
            ScoredPool::new(Vec::new(), config.task_type, None)?,
            DemoSet::empty(),
            Vec::new(),
            Vec::new(),
        )
    };

    let stage1_decode_ops = counted.decode_ops();
    let stage1_scoring_ops = counted.scoring_ops();

    let average_score = if pool.candidates.is_empty() {
        None
    } else {
        Some(average_usp_score(&pool)?)
    };

    let (predictions, stage2_failed) = stage2_inner(
        test,
        &demoset,
        Some(&pool),
        &counted,
        &config,
        &template,
        strategy,
        golden.as_deref(),
    )?;

    Ok(RunArtifacts {
        strategy,
        config,
        pool: pool_records(&pool),
        demoset,
        traces,
        predictions,
        diagnostics: RunDiagnostics {
            average_score,
            stage1_decode_ops,
            stage1_scoring_ops,
            stage2_decode_ops: counted.decode_ops() - stage1_decode_ops,
            stage2_scoring_ops: counted.scoring_ops() - stage1_scoring_ops,
            stage1_dropped,
            stage2_failed,
            warnings,
        },
    })
}

/// The zero-shot pipeline end to end.
pub fn run_usp(
    config: &RunConfig,
    unlabeled: &[TaskQuery],
    test: &[TaskQuery],
    backend: &dyn Backend,
    embedder: &dyn Embedder,
) -> Result<RunArtifacts> {
    run_strategy(Strategy::Usp, config, unlabeled, test, backend, embedder)
}

/// The few-shot variant: golden demos come first, pseudo-demos fill the
/// remaining budget, and the goldens participate in the diversity penalty.
pub fn run_usp_fewshot(
    config: &RunConfig,
    unlabeled: &[TaskQuery],
    test: &[TaskQuery],
    backend: &dyn Backend,
    embedder: &dyn Embedder,
) -> Result<RunArtifacts> {
    run_strategy(Strategy::UspFs, config, unlabeled, test, backend, embedder)
}
