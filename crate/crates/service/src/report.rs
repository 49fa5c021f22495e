//! Plain-text rendering of a finished run for the headless command.

use std::fmt::Write;

use dataprod_core::metrics::MetricValue;
use dataprod_core::orchestrator::RunReport;

fn value(v: Option<f64>) -> String {
    v.map_or_else(|| "unknown".into(), |x| format!("{x:.4}"))
}

pub fn render(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "verdict: {}", report.verdict.name());
    if let Some(reason) = detail(report) {
        let _ = writeln!(out, "  {reason}");
    }
    let _ = writeln!(
        out,
        "iterations: {} ({} failed), elapsed {:.0} ms",
        report.iterations.len(),
        report.failures,
        report.elapsed_ms
    );
    for r in &report.iterations {
        let _ = writeln!(
            out,
            "  #{:<3} {:<22} {:<10} gap {:.4} -> {:.4}  {}",
            r.iteration,
            r.proposal.tool_name,
            serde_json::to_value(r.status).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
            r.total_gap_before,
            r.total_gap_after,
            r.summary
        );
    }
    let _ = writeln!(out, "contract:");
    for c in &report.final_gap.components {
        let comparator = serde_json::to_value(c.comparator).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        let _ = writeln!(
            out,
            "  {:<22} {:>10} {} {:<10} gap {:.4}{}",
            c.metric_id,
            value(c.value),
            comparator,
            c.target,
            c.normalized_gap,
            if c.normalized_gap == 0.0 { "  met" } else { "" }
        );
    }
    let _ = writeln!(out, "total gap: {:.4}", report.final_gap.total());
    let _ = writeln!(out, "metrics:");
    let mut finals: Vec<&MetricValue> = report.final_metrics.iter().collect();
    finals.sort_by(|a, b| a.metric_id.cmp(&b.metric_id));
    for m in finals {
        let _ = writeln!(out, "  {:<22} {:>10}", m.metric_id, value(m.value));
    }
    out
}

fn detail(report: &RunReport) -> Option<String> {
    use dataprod_core::orchestrator::Verdict;
    match &report.verdict {
        Verdict::ManualReviewRecommended { reason } => Some(reason.clone()),
        Verdict::Error { message } => Some(message.clone()),
        _ => None,
    }
}
