//! Human-readable dump of a run's selected pseudo-demos.

use std::collections::BTreeMap;

use usp_core::model::DemoPair;
use usp_core::selection::TraceStep;

use crate::artifacts::StoredRun;

fn trace_lookup(run: &StoredRun) -> BTreeMap<&str, (&TraceStep, Option<&str>)> {
    let mut by_query = BTreeMap::new();
    for trace in &run.traces {
        for step in &trace.steps {
            by_query.insert(step.query_id.as_str(), (step, trace.class.as_deref()));
        }
    }
    by_query
}

fn render_demo(
    out: &mut String,
    demo: &DemoPair,
    scores: &BTreeMap<&str, f64>,
    steps: &BTreeMap<&str, (&TraceStep, Option<&str>)>,
) {
    match steps.get(demo.query_id.as_str()) {
        Some((step, _)) => out.push_str(&format!(
            "  [step {}] {}  F={:.4}  z(F)={:.3}  penalty={:.3}\n",
            step.step,
            demo.query_id,
            scores.get(demo.query_id.as_str()).copied().unwrap_or(f64::NAN),
            step.score_term,
            step.penalty_term,
        )),
        None => out.push_str(&format!(
            "  [fill] {}  probability-ranked fallback\n",
            demo.query_id
        )),
    }
    for line in demo.query.lines() {
        out.push_str(&format!("    | {line}\n"));
    }
    for line in demo.response.lines() {
        out.push_str(&format!("    > {line}\n"));
    }
}

pub fn render_inspect(run: &StoredRun) -> String {
    let scores: BTreeMap<&str, f64> = run
        .pool
        .iter()
        .map(|r| (r.query_id.as_str(), r.score))
        .collect();
    let steps = trace_lookup(run);
    let mut out = String::new();
    out.push_str(&format!(
        "run: {} strategy={} dataset={} k_effective={}\n",
        run.dir.display(),
        run.summary.strategy.as_str(),
        run.summary.dataset,
        run.demoset.k_effective,
    ));
    if let Some(average) = run.summary.diagnostics.average_score {
        out.push_str(&format!("average pool score: {average:.4}\n"));
    }
    match &run.demoset.per_class {
        Some(per_class) => {
            for (class, demos) in per_class {
                out.push_str(&format!("class `{class}` ({} demos):\n", demos.len()));
                for demo in demos {
                    render_demo(&mut out, demo, &scores, &steps);
                }
            }
        }
        None => {
            out.push_str(&format!("{} demos:\n", run.demoset.demos.len()));
            for demo in &run.demoset.demos {
                render_demo(&mut out, demo, &scores, &steps);
            }
        }
    }
    if run.demoset.demos.is_empty() {
        out.push_str("(no demos: zero-shot or per-query random draws)\n");
    }
    out
}
