//! Action selection and parameter calibration.
//!
//! The planner is a pure function of a snapshot, the current gap vector
//! and the recent gap history. It proposes the applicable tool with the
//! largest gap-weighted score, or stops with a verdict.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::{Comparator, GapVector};
use crate::registry::{shared_join_patterns, tools, ImpactSign, ParamValue, Parameters, ToolDescriptor, ToolRegistry};
use crate::state::{ContextScope, DataProductState, TableId, TableMeta};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Number of consecutive small improvements that count as stagnation.
    pub stagnation_window: usize,
    pub stagnation_epsilon: f64,
    /// Iterations during which a rejected (tool, scope) pair is not proposed.
    pub rejection_cooldown: u32,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { stagnation_window: 3, stagnation_epsilon: 0.01, rejection_cooldown: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionProposal {
    pub tool_name: String,
    pub target_scope: ContextScope,
    pub parameters: Parameters,
    pub expected_improvement: f64,
    pub rationale: String,
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum PlannerVerdict {
    Propose(ActionProposal),
    Converged,
    ManualReviewRecommended { reason: String },
}

/// Everything `plan` looks at.
#[derive(Debug, Clone, Copy)]
pub struct PlanInput<'a> {
    pub snapshot: &'a DataProductState,
    pub registry: &'a ToolRegistry,
    pub gap: &'a GapVector,
    /// Total gaps of previous plan calls plus the current one, oldest first.
    pub history: &'a [f64],
    /// (tool, scope) pairs that may not be proposed this iteration.
    pub suppressed: &'a BTreeSet<(String, ContextScope)>,
    pub iteration: u32,
    pub config: &'a PlannerConfig,
}

fn impact_counts(sign: ImpactSign, comparator: Comparator) -> bool {
    match sign {
        ImpactSign::Optimize => true,
        ImpactSign::Increase => comparator == Comparator::AtLeast,
        ImpactSign::Decrease => comparator == Comparator::AtMost,
    }
}

/// Σ weight · gap over the tool's impacts on contracted metrics. An
/// impact only counts when its direction moves the metric toward the
/// target.
pub fn expected_improvement(tool: &ToolDescriptor, gap: &GapVector) -> f64 {
    tool.impacts
        .iter()
        .filter_map(|impact| {
            let c = gap.get(&impact.metric_id)?;
            impact_counts(impact.sign, c.comparator).then_some(impact.default_weight * c.normalized_gap)
        })
        .sum()
}

/// Questions to generate for `uncovered` under-covered tables.
pub fn question_count_for(uncovered: usize) -> usize {
    match uncovered {
        u if u > 50 => 80,
        u if u <= 10 => 20,
        u => (20.0 + 1.5 * (u as f64 - 10.0)).round() as usize,
    }
}

/// True when the last `window` consecutive improvements in `history` are
/// all below `epsilon`. Needs `window + 1` entries to observe that many
/// improvements.
pub fn detect_stagnation(history: &[f64], window: usize, epsilon: f64) -> bool {
    if window == 0 || history.len() < window + 1 {
        return false;
    }
    history[history.len() - window - 1..].windows(2).all(|w| w[0] - w[1] < epsilon)
}

/// Parameters for `tool` sized to the snapshot.
pub fn calibrate(tool: &str, snapshot: &DataProductState, _gap: &GapVector) -> Parameters {
    let mut params = Parameters::new();
    let mut int = |name: &str, v: usize| {
        params.insert(name.to_string(), ParamValue::Int(v as i64));
    };
    match tool {
        tools::QUESTION_GENERATION => {
            let mut uncovered: Vec<&TableMeta> = snapshot.uncovered_tables();
            int("count", question_count_for(uncovered.len()));
            uncovered.sort_by(|a, b| {
                b.row_count_estimate.cmp(&a.row_count_estimate).then_with(|| a.table_id.cmp(&b.table_id))
            });
            if !uncovered.is_empty() {
                let ids: Vec<TableId> = uncovered.iter().map(|t| t.table_id.clone()).collect();
                params.insert("priority_tables".into(), ParamValue::Tables(ids));
            }
        }
        tools::TEXT_TO_SQL => int("max_questions", snapshot.questions_without_sql().count().max(1)),
        tools::VIEW_CREATION => int("max_views", shared_join_patterns(snapshot).len().clamp(1, 5)),
        tools::FOLLOWUP_GENERATION => int("count", snapshot.questions_with_sql().clamp(1, 10)),
        _ => {}
    }
    params
}

fn rationale(tool: &ToolDescriptor, gap: &GapVector, score: f64, params: &Parameters) -> String {
    let mut out = format!("{} has the largest expected improvement ({score:.4})", tool.name);
    let terms: Vec<String> = tool
        .impacts
        .iter()
        .filter_map(|impact| {
            let c = gap.get(&impact.metric_id)?;
            (impact_counts(impact.sign, c.comparator) && c.normalized_gap > 0.0)
                .then(|| format!("{} gap {:.4} x weight {}", c.metric_id, c.normalized_gap, impact.default_weight))
        })
        .collect();
    if !terms.is_empty() {
        let _ = write!(out, " from {}", terms.join(", "));
    }
    if !params.is_empty() {
        let shown: Vec<String> = params
            .iter()
            .map(|(k, v)| match v {
                ParamValue::Int(n) => format!("{k}={n}"),
                ParamValue::Tables(t) => format!("{k}=[{}]", t.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(",")),
            })
            .collect();
        let _ = write!(out, "; parameters {}", shown.join(" "));
    }
    out
}

/// Chooses the next action.
pub fn plan(input: &PlanInput<'_>) -> PlannerVerdict {
    let total = input.gap.total();
    if total == 0.0 {
        return PlannerVerdict::Converged;
    }
    let cfg = input.config;
    if detect_stagnation(input.history, cfg.stagnation_window, cfg.stagnation_epsilon) {
        let recent = &input.history[input.history.len() - cfg.stagnation_window - 1..];
        let shown: Vec<String> = recent.iter().map(|g| format!("{g:.4}")).collect();
        return PlannerVerdict::ManualReviewRecommended {
            reason: format!(
                "stagnation: total gap moved less than {} in each of the last {} iterations ({})",
                cfg.stagnation_epsilon,
                cfg.stagnation_window,
                shown.join(" -> ")
            ),
        };
    }
    let scope = ContextScope::database();
    let mut best: Option<(&ToolDescriptor, f64)> = None;
    for tool in input.registry.applicable_tools(input.snapshot) {
        if input.suppressed.contains(&(tool.name.clone(), scope.clone())) {
            continue;
        }
        let score = expected_improvement(tool, input.gap);
        if score > 0.0 && best.is_none_or(|(_, s)| score > s) {
            best = Some((tool, score));
        }
    }
    let Some((tool, score)) = best else {
        return PlannerVerdict::ManualReviewRecommended { reason: "no applicable tool".into() };
    };
    let parameters = calibrate(&tool.name, input.snapshot, input.gap);
    PlannerVerdict::Propose(ActionProposal {
        tool_name: tool.name.clone(),
        target_scope: scope,
        rationale: rationale(tool, input.gap, score, &parameters),
        parameters,
        expected_improvement: score,
        iteration: input.iteration,
    })
}
