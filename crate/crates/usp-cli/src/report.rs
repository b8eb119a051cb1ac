//! Run reports: task-appropriate metrics against references, gain over the
//! zero-shot baseline, and average ranks across datasets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use usp_core::metrics::{exact_match, profile, rouge1_f, rouge_lsum_f, token_f1};
use usp_core::model::TaskType;
use usp_core::pipeline::PredictionRecord;
use usp_core::Result;

use crate::artifacts::StoredRun;

/// Metrics for one run; values are percentages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub dir: String,
    pub dataset: String,
    pub strategy: String,
    pub task_type: TaskType,
    pub queries: usize,
    /// Queries that carried no references and were skipped.
    pub unreferenced: usize,
    /// accuracy (CLS), exact match (SFG) or ROUGE-1 (LFG); absent when no
    /// references exist.
    pub primary_metric: Option<f64>,
    /// token F1 (SFG) or ROUGE-Lsum (LFG).
    pub secondary_metric: Option<f64>,
    pub average_score: Option<f64>,
    /// (metric / zero-shot metric - 1) * 100 against the same dataset.
    pub gain_over_zero_shot: Option<f64>,
    pub average_rank: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSummary {
    pub runs: Vec<RunReport>,
}

fn metric_names(task: TaskType) -> (&'static str, &'static str) {
    match task {
        TaskType::Cls => ("accuracy", "-"),
        TaskType::Sfg => ("em", "f1"),
        TaskType::Lfg => ("rouge1", "rougeLsum"),
    }
}

fn score_predictions(
    task: TaskType,
    profile_name: &str,
    predictions: &[PredictionRecord],
) -> Result<(Option<f64>, Option<f64>, usize)> {
    let profile = profile(profile_name)?;
    let mut primary = 0.0;
    let mut secondary = 0.0;
    let mut counted = 0usize;
    let mut unreferenced = 0usize;
    for prediction in predictions {
        if prediction.references.is_empty() {
            unreferenced += 1;
            continue;
        }
        counted += 1;
        match task {
            TaskType::Cls => {
                let hit = prediction
                    .references
                    .iter()
                    .any(|r| r.trim() == prediction.prediction.trim());
                primary += hit as u8 as f64;
            }
            TaskType::Sfg => {
                primary +=
                    exact_match(&prediction.prediction, &prediction.references, &profile)? as f64;
                secondary += token_f1(&prediction.prediction, &prediction.references, &profile)?;
            }
            TaskType::Lfg => {
                let best_r1 = prediction
                    .references
                    .iter()
                    .map(|r| rouge1_f(&prediction.prediction, r))
                    .fold(0.0, f64::max);
                let best_lsum = prediction
                    .references
                    .iter()
                    .map(|r| rouge_lsum_f(&prediction.prediction, r))
                    .fold(0.0, f64::max);
                primary += best_r1;
                secondary += best_lsum;
            }
        }
    }
    if counted == 0 {
        return Ok((None, None, unreferenced));
    }
    let scale = 100.0 / counted as f64;
    let secondary = match task {
        TaskType::Cls => None,
        _ => Some(secondary * scale),
    };
    Ok((Some(primary * scale), secondary, unreferenced))
}

/// Average rank with ties averaged: identical metrics share the mean of the
/// rank positions they straddle.
fn ranks(metrics: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..metrics.len()).collect();
    order.sort_by(|&a, &b| metrics[b].total_cmp(&metrics[a]));
    let mut out = vec![0.0; metrics.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && metrics[order[j + 1]] == metrics[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the averaged 1-based rank
        let shared = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            out[idx] = shared;
        }
        i = j + 1;
    }
    out
}

pub fn build_report(runs: &[StoredRun]) -> Result<ReportSummary> {
    let mut reports = Vec::with_capacity(runs.len());
    for run in runs {
        let (primary, secondary, unreferenced) = score_predictions(
            run.config.task_type,
            &run.config.normalization_profile,
            &run.predictions,
        )?;
        reports.push(RunReport {
            dir: run.dir.display().to_string(),
            dataset: run.summary.dataset.clone(),
            strategy: run.summary.strategy.as_str().to_string(),
            task_type: run.config.task_type,
            queries: run.predictions.len(),
            unreferenced,
            primary_metric: primary,
            secondary_metric: secondary,
            average_score: run.summary.diagnostics.average_score,
            gain_over_zero_shot: None,
            average_rank: None,
        });
    }

    // gain over the zero-shot run of the same dataset
    let mut baselines: BTreeMap<String, f64> = BTreeMap::new();
    for report in &reports {
        if report.strategy == "zero-shot" {
            if let Some(metric) = report.primary_metric {
                baselines.entry(report.dataset.clone()).or_insert(metric);
            }
        }
    }
    for report in &mut reports {
        if let (Some(metric), Some(baseline)) =
            (report.primary_metric, baselines.get(&report.dataset))
        {
            if *baseline != 0.0 {
                report.gain_over_zero_shot = Some((metric / baseline - 1.0) * 100.0);
            }
        }
    }

    // per-dataset ranks, averaged per strategy across datasets
    let mut by_dataset: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, report) in reports.iter().enumerate() {
        if report.primary_metric.is_some() {
            by_dataset.entry(report.dataset.clone()).or_default().push(i);
        }
    }
    let mut rank_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for indices in by_dataset.values() {
        let metrics: Vec<f64> = indices
            .iter()
            .map(|&i| reports[i].primary_metric.unwrap())
            .collect();
        for (&i, rank) in indices.iter().zip(ranks(&metrics)) {
            let entry = rank_sums.entry(reports[i].strategy.clone()).or_insert((0.0, 0));
            entry.0 += rank;
            entry.1 += 1;
        }
    }
    for report in &mut reports {
        if let Some((sum, count)) = rank_sums.get(&report.strategy) {
            if report.primary_metric.is_some() {
                report.average_rank = Some(sum / *count as f64);
            }
        }
    }
    Ok(ReportSummary { runs: reports })
}

fn fmt_opt(value: Option<f64>) -> String {
    value.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into())
}

pub fn render_table(summary: &ReportSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:<12} {:<24} {:>10} {:>11} {:>9}\n",
        "dataset", "strategy", "metrics", "avg-score", "gain-0shot%", "avg-rank"
    ));
    for run in &summary.runs {
        let (name1, name2) = metric_names(run.task_type);
        let metrics = match (run.primary_metric, run.secondary_metric) {
            (None, _) => "no references".to_string(),
            (Some(p), None) => format!("{name1}={p:.2}"),
            (Some(p), Some(s)) => format!("{name1}={p:.2} {name2}={s:.2}"),
        };
        out.push_str(&format!(
            "{:<14} {:<12} {:<24} {:>10} {:>11} {:>9}\n",
            run.dataset,
            run.strategy,
            metrics,
            fmt_opt(run.average_score),
            fmt_opt(run.gain_over_zero_shot),
            fmt_opt(run.average_rank),
        ));
        if run.unreferenced > 0 {
            out.push_str(&format!(
                "  note: {} of {} queries had no references and were skipped\n",
                run.unreferenced, run.queries
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tied_metrics_share_averaged_rank() {
        assert_eq!(ranks(&[10.0, 10.0, 5.0]), vec![1.5, 1.5, 3.0]);
        assert_eq!(ranks(&[1.0, 3.0, 2.0]), vec![3.0, 1.0, 2.0]);
        assert_eq!(ranks(&[7.0]), vec![1.0]);
    }
}
