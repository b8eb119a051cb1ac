//! From-scratch text kernels: stop-token truncation, answer normalization,
//! majority vote, ROUGE-1 / ROUGE-L / ROUGE-Lsum, exact match and token F1.
//!
//! Tokenization for the overlap metrics splits on non-alphanumeric runs and
//! lowercases, so all fixtures are reproducible without an external
//! tokenizer. Empty-vs-empty overlap is defined as 1.0 (identical texts),
//! empty-vs-nonempty as 0.0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UspError};

/// How punctuation is handled during answer normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PunctuationMode {
    Remove,
    SpaceReplace,
    Keep,
}

/// A frozen, named normalization recipe. Steps run in a fixed order:
/// truncation at the profile's stops, lowercasing, punctuation handling,
/// article removal, whitespace collapse, optional first-word retention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationProfile {
    pub name: String,
    pub stop_sequences: Vec<String>,
    pub strip_articles: bool,
    pub punctuation: PunctuationMode,
    pub keep_first_word_only: bool,
    pub lowercase: bool,
    /// Inclusive word-count eligibility bounds (summaries use 5..=90).
    pub word_count_bounds: Option<(usize, usize)>,
}

impl NormalizationProfile {
    /// Word-count eligibility check; profiles without bounds accept anything.
    pub fn within_word_bounds(&self, text: &str) -> bool {
        match self.word_count_bounds {
            None => true,
            Some((lo, hi)) => {
                let words = text.split_whitespace().count();
                words >= lo && words <= hi
            }
        }
    }
}

/// Look up a frozen profile by name. Unknown names are rejected.
pub fn profile(name: &str) -> Result<NormalizationProfile> {
    let make = |stops: &[&str],
                strip_articles: bool,
                punctuation: PunctuationMode,
                keep_first_word_only: bool,
                lowercase: bool,
                bounds: Option<(usize, usize)>| {
        NormalizationProfile {
            name: name.to_string(),
            stop_sequences: stops.iter().map(|s| s.to_string()).collect(),
            strip_articles,
            punctuation,
            keep_first_word_only,
            lowercase,
            word_count_bounds: bounds,
        }
    };
    match name {
        // Standard EM/F1 normalization: lowercase, drop punctuation and articles.
        "default" => Ok(make(&[], true, PunctuationMode::Remove, false, true, None)),
        // Word-completion cloze: keep only the first output word.
        "lambada" => Ok(make(&[], false, PunctuationMode::Remove, true, true, None)),
        // Reading-comprehension QA: answer ends at the first newline.
        "squad" => Ok(make(&["\n"], true, PunctuationMode::Remove, false, true, None)),
        // Open-domain QA: punctuation becomes whitespace instead of vanishing.
        "web_questions" | "natural_questions" => Ok(make(
            &["\n"],
            true,
            PunctuationMode::SpaceReplace,
            false,
            true,
            None,
        )),
        // Summaries keep their punctuation; eligibility is 5..=90 words.
        "summary" => Ok(make(&[], false, PunctuationMode::Keep, false, true, Some((5, 90)))),
        // No-op profile (whitespace trim only).
        "raw" => Ok(make(&[], false, PunctuationMode::Keep, false, false, None)),
        other => Err(UspError::UnknownProfile(other.to_string())),
    }
}

/// Stop sequences shared by all tasks: further output after any of these is
/// discarded, the stop included.
pub fn default_stop_sequences() -> Vec<String> {
    vec!["Q:".to_string(), "A:".to_string(), "\n\n".to_string()]
}

/// Prefix of `text` before the earliest occurrence of any stop sequence.
pub fn truncate_at_stop(text: &str, stop_sequences: &[String]) -> String {
    let mut cut = text.len();
    for stop in stop_sequences {
        if stop.is_empty() {
            continue;
        }
        if let Some(pos) = text.find(stop.as_str()) {
            cut = cut.min(pos);
        }
    }
    text[..cut].to_string()
}

fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Apply a normalization profile to an answer string.
pub fn normalize_answer(text: &str, profile: &NormalizationProfile) -> String {
    let mut out = if profile.stop_sequences.is_empty() {
        text.to_string()
    } else {
        truncate_at_stop(text, &profile.stop_sequences)
    };
    if profile.lowercase {
        out = out.to_lowercase();
    }
    out = match profile.punctuation {
        PunctuationMode::Keep => out,
        PunctuationMode::Remove => out.chars().filter(|c| !is_punctuation(*c)).collect(),
        PunctuationMode::SpaceReplace => out
            .chars()
            .map(|c| if is_punctuation(c) { ' ' } else { c })
            .collect(),
    };
    let mut words: Vec<&str> = out.split_whitespace().collect();
    if profile.strip_articles {
        words.retain(|w| !matches!(*w, "a" | "an" | "the" | "A" | "An" | "The"));
    }
    if profile.keep_first_word_only {
        words.truncate(1);
    }
    words.join(" ")
}

/// Result of grouping sampled answers by normalized form.
#[derive(Debug, Clone, PartialEq)]
pub struct MajorityVote {
    /// Winning normalized form.
    pub winner: String,
    /// First raw answer whose normalized form is the winner; used verbatim
    /// as demo text so prompts stay natural.
    pub winner_raw: String,
    /// Count per normalized form: the empirical answer frequencies.
    pub counts: BTreeMap<String, usize>,
}

/// Group answers by normalized form and pick the plurality winner, ties
/// broken by earliest first occurrence in the list.
pub fn majority_vote(answers: &[String], profile: &NormalizationProfile) -> Result<MajorityVote> {
    if answers.is_empty() {
        return Err(UspError::EmptyInput);
    }
    // (normalized, first raw, count) in first-occurrence order.
    let mut groups: Vec<(String, &str, usize)> = Vec::new();
    for raw in answers {
        let norm = normalize_answer(raw, profile);
        match groups.iter_mut().find(|(n, _, _)| *n == norm) {
            Some((_, _, count)) => *count += 1,
            None => groups.push((norm, raw.as_str(), 1)),
        }
    }
    let mut best = 0;
    for (i, group) in groups.iter().enumerate() {
        if group.2 > groups[best].2 {
            best = i;
        }
    }
    let counts = groups
        .iter()
        .map(|(n, _, c)| (n.clone(), *c))
        .collect();
    Ok(MajorityVote {
        winner: groups[best].0.clone(),
        winner_raw: groups[best].1.to_string(),
        counts,
    })
}

/// Lowercased alphanumeric tokens.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn empty_case(hyp_empty: bool, ref_empty: bool) -> Option<f64> {
    match (hyp_empty, ref_empty) {
        (true, true) => Some(1.0),
        (true, false) | (false, true) => Some(0.0),
        (false, false) => None,
    }
}

/// Unigram-overlap F1 with clipped counts.
pub fn rouge1_f(hypothesis: &str, reference: &str) -> f64 {
    let hyp = rouge_tokens(hypothesis);
    let rf = rouge_tokens(reference);
    if let Some(v) = empty_case(hyp.is_empty(), rf.is_empty()) {
        return v;
    }
    let mut ref_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &rf {
        *ref_counts.entry(t.as_str()).or_default() += 1;
    }
    let mut matched = 0usize;
    for t in &hyp {
        if let Some(c) = ref_counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                matched += 1;
            }
        }
    }
    f1(matched as f64 / hyp.len() as f64, matched as f64 / rf.len() as f64)
}

fn lcs_table(a: &[String], b: &[String]) -> Vec<Vec<usize>> {
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 0..a.len() {
        for j in 0..b.len() {
            dp[i + 1][j + 1] = if a[i] == b[j] {
                dp[i][j] + 1
            } else {
                dp[i + 1][j].max(dp[i][j + 1])
            };
        }
    }
    dp
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    lcs_table(a, b)[a.len()][b.len()]
}

/// Indices within `a` of one longest common subsequence of `a` and `b`.
fn lcs_indices(a: &[String], b: &[String]) -> Vec<usize> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let dp = lcs_table(a, b);
    let mut out = Vec::new();
    let (mut i, mut j) = (a.len(), b.len());
    while i > 0 && j > 0 {
        if a[i - 1] == b[j - 1] {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if dp[i][j - 1] > dp[i - 1][j] {
            j -= 1;
        } else {
            i -= 1;
        }
    }
    out.reverse();
    out
}

/// LCS-based F1 over whole token sequences.
pub fn rouge_l_f(hypothesis: &str, reference: &str) -> f64 {
    let hyp = rouge_tokens(hypothesis);
    let rf = rouge_tokens(reference);
    if let Some(v) = empty_case(hyp.is_empty(), rf.is_empty()) {
        return v;
    }
    let lcs = lcs_len(&hyp, &rf) as f64;
    f1(lcs / hyp.len() as f64, lcs / rf.len() as f64)
}

fn split_sentences(text: &str) -> Vec<Vec<String>> {
    text.split(['.', '!', '?', '\n'])
        .map(rouge_tokens)
        .filter(|s| !s.is_empty())
        .collect()
}

/// Summary-level ROUGE-L: union-LCS over sentence splits.
///
/// For every reference sentence, the indices matched by an LCS against each
/// candidate sentence are unioned; the total hit count drives precision and
/// recall over the full token counts.
pub fn rouge_lsum_f(hypothesis: &str, reference: &str) -> f64 {
    let hyp_sents = split_sentences(hypothesis);
    let ref_sents = split_sentences(reference);
    if let Some(v) = empty_case(hyp_sents.is_empty(), ref_sents.is_empty()) {
        return v;
    }
    let hyp_total: usize = hyp_sents.iter().map(Vec::len).sum();
    let ref_total: usize = ref_sents.iter().map(Vec::len).sum();
    let mut hits = 0usize;
    for ref_sent in &ref_sents {
        let mut union = vec![false; ref_sent.len()];
        for hyp_sent in &hyp_sents {
            for idx in lcs_indices(ref_sent, hyp_sent) {
                union[idx] = true;
            }
        }
        hits += union.iter().filter(|b| **b).count();
    }
    f1(hits as f64 / hyp_total as f64, hits as f64 / ref_total as f64)
}

/// 1 when the normalized prediction exactly matches any normalized reference.
pub fn exact_match(
    prediction: &str,
    references: &[String],
    profile: &NormalizationProfile,
) -> Result<u8> {
    if references.is_empty() {
        return Err(UspError::NoReferences);
    }
    let pred = normalize_answer(prediction, profile);
    Ok(references
        .iter()
        .any(|r| normalize_answer(r, profile) == pred) as u8)
}

fn bag_f1(pred: &[&str], rf: &[&str]) -> f64 {
    if pred.is_empty() && rf.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || rf.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in rf {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    f1(common as f64 / pred.len() as f64, common as f64 / rf.len() as f64)
}

/// Bag-of-tokens F1 over normalized forms, max over references.
pub fn token_f1(
    prediction: &str,
    references: &[String],
    profile: &NormalizationProfile,
) -> Result<f64> {
    if references.is_empty() {
        return Err(UspError::NoReferences);
    }
    let pred_norm = normalize_answer(prediction, profile);
    let pred_tokens: Vec<&str> = pred_norm.split_whitespace().collect();
    let mut best = 0.0_f64;
    for reference in references {
        let ref_norm = normalize_answer(reference, profile);
        let ref_tokens: Vec<&str> = ref_norm.split_whitespace().collect();
        best = best.max(bag_f1(&pred_tokens, &ref_tokens));
    }
    Ok(best)
}
