//! Task-specific confidence scores, z-score standardization and the upper
//! Tukey fence.
//!
//! All three scorers use the natural logarithm and share one convention:
//! higher means more confident, so argmax selection always prefers
//! agreement/sharpness. Classification scores live in [-ln|C|, 0], agreement
//! scores in [-1, 0] and pairwise-overlap scores in [0, 1].

use serde::{Deserialize, Serialize};

use crate::error::{Result, UspError};
use crate::metrics::{majority_vote, rouge1_f, NormalizationProfile};
use crate::model::{CandidateDemo, ClassDistribution, SampleSet, TaskType};

/// A candidate pool with scores attached, plus the optional outlier mask
/// produced by the fence (true = removed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredPool {
    pub candidates: Vec<CandidateDemo>,
    pub task_type: TaskType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outlier_mask: Option<Vec<bool>>,
}

impl ScoredPool {
    pub fn new(
        candidates: Vec<CandidateDemo>,
        task_type: TaskType,
        outlier_mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        for candidate in &candidates {
            match candidate.score {
                Some(s) if s.is_finite() => {}
                Some(s) => {
                    return Err(UspError::InvalidField {
                        field: "score".into(),
                        reason: format!("candidate `{}` has score {s}", candidate.query.id),
                    })
                }
                None => {
                    return Err(UspError::InvalidField {
                        field: "score".into(),
                        reason: format!("candidate `{}` is unscored", candidate.query.id),
                    })
                }
            }
        }
        if let Some(mask) = &outlier_mask {
            if mask.len() != candidates.len() {
                return Err(UspError::InvalidField {
                    field: "outlier_mask".into(),
                    reason: format!(
                        "mask length {} != candidate count {}",
                        mask.len(),
                        candidates.len()
                    ),
                });
            }
        }
        Ok(ScoredPool {
            candidates,
            task_type,
            outlier_mask,
        })
    }

    pub fn is_outlier(&self, index: usize) -> bool {
        self.outlier_mask
            .as_ref()
            .map(|m| m[index])
            .unwrap_or(false)
    }

    /// Indices eligible for selection (non-outliers).
    pub fn eligible_indices(&self) -> Vec<usize> {
        (0..self.candidates.len())
            .filter(|i| !self.is_outlier(*i))
            .collect()
    }
}

/// Negative entropy of a class distribution: 0 at one-hot, -ln|C| at uniform.
pub fn score_cls(dist: &ClassDistribution) -> Result<f64> {
    let probs = dist.probs();
    let sum: f64 = probs.values().sum();
    if (sum - 1.0).abs() > crate::model::DISTRIBUTION_TOLERANCE {
        return Err(UspError::InvalidDistribution(format!("mass {sum}")));
    }
    let mut score = 0.0;
    for p in probs.values() {
        if *p < 0.0 {
            return Err(UspError::InvalidDistribution(format!("probability {p}")));
        }
        if *p > 0.0 {
            score += p * p.ln();
        }
    }
    Ok(score)
}

/// Negative normalized entropy of the empirical answer frequencies:
/// 0 when all m samples agree, -1 when all are distinct.
pub fn score_sfg(samples: &SampleSet, profile: &NormalizationProfile) -> Result<f64> {
    let m = samples.len();
    if m < 2 {
        return Err(UspError::DegenerateM(m));
    }
    let vote = majority_vote(&samples.samples, profile)?;
    let mut entropy_sum = 0.0;
    for count in vote.counts.values() {
        let p = *count as f64 / m as f64;
        entropy_sum += p * p.ln();
    }
    Ok(entropy_sum / (m as f64).ln())
}

/// Mean pairwise overlap across the m samples, with a pluggable overlap
/// function (unigram-overlap F1 by default).
pub fn score_lfg_with<F>(samples: &SampleSet, overlap: F) -> Result<f64>
where
    F: Fn(&str, &str) -> f64,
{
    let m = samples.len();
    if m < 2 {
        return Err(UspError::DegenerateM(m));
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            total += overlap(&samples.samples[i], &samples.samples[j]);
        }
    }
    Ok(total / (m * (m - 1) / 2) as f64)
}

/// [`score_lfg_with`] using ROUGE-1 F1.
pub fn score_lfg(samples: &SampleSet) -> Result<f64> {
    score_lfg_with(samples, rouge1_f)
}

/// (v - mean) / population std; all-equal input maps to all zeros.
pub fn zscore(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return vec![0.0; n];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Quartile by linear interpolation between order statistics
/// (index = q * (n - 1)) on the sorted values.
fn quartile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

/// Keep mask marking false anything strictly above Q3 + 1.5*IQR.
///
/// Only the upper fence applies (degenerate over-confident completions sit
/// high, never low), and fewer than 4 scores are never filtered.
pub fn tukey_upper_filter(scores: &[f64]) -> Vec<bool> {
    if scores.len() < 4 {
        return vec![true; scores.len()];
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let q1 = quartile(&sorted, 0.25);
    let q3 = quartile(&sorted, 0.75);
    let fence = q3 + 1.5 * (q3 - q1);
    scores.iter().map(|s| *s <= fence).collect()
}
