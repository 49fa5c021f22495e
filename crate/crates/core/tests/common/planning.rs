//! Randomized planner instances: a snapshot, a gap vector, a weight table
//! and suppressions, plus a brute-force scorer.

use std::collections::BTreeSet;

use dataprod_core::metrics::{Comparator, GapComponent, GapVector, MetricRegistry};
use dataprod_core::planner::{plan, PlanInput, PlannerConfig, PlannerVerdict};
use dataprod_core::registry::{ImpactSign, ToolDescriptor, ToolRegistry};
use dataprod_core::state::{ContextScope, DataProductState};
use rand::Rng;

use super::events::EventGenerator;

pub const METRICS: [&str; 6] =
    ["table_coverage", "column_coverage", "question_count", "avg_query_length", "avg_query_complexity", "avg_exec_speed"];

/// Brute-force score: weight times gap over impacts whose direction moves
/// the metric toward its target.
pub fn oracle_score(tool: &ToolDescriptor, gap: &GapVector) -> f64 {
    let mut score = 0.0;
    for impact in &tool.impacts {
        for c in gap.components.iter().filter(|c| c.metric_id == impact.metric_id) {
            let helps = match impact.sign {
                ImpactSign::Optimize => true,
                ImpactSign::Increase => c.comparator == Comparator::AtLeast,
                ImpactSign::Decrease => c.comparator == Comparator::AtMost,
            };
            if helps {
                score += impact.default_weight * c.normalized_gap;
            }
        }
    }
    score
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub events: usize,
    /// Per built-in metric: included, comparator, gap.
    pub entries: Vec<(bool, bool, f64)>,
    pub weights: Vec<f64>,
    pub suppressed: Vec<bool>,
}

impl Instance {
    pub fn random(rng: &mut impl Rng) -> Self {
        let gap = |rng: &mut dyn rand::RngCore| match rng.gen_range(0..4) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen_range(0.0..=1.0),
        };
        Self {
            seed: rng.gen(),
            events: rng.gen_range(0..250),
            entries: (0..METRICS.len()).map(|_| (rng.gen_bool(0.5), rng.gen_bool(0.5), gap(rng))).collect(),
            weights: (0..32).map(|_| rng.gen_range(0.0..4.0)).collect(),
            suppressed: (0..5).map(|_| rng.gen_bool(0.15)).collect(),
        }
    }
}

pub fn materialize(inst: &Instance, scale: f64) -> (DataProductState, ToolRegistry, GapVector, BTreeSet<(String, ContextScope)>) {
    let state = EventGenerator::new(inst.seed)
        .take(inst.events)
        .into_iter()
        .try_fold(DataProductState::new(), |s, g| s.apply_event(g.event))
        .unwrap();
    let mut registry = ToolRegistry::with_defaults(&MetricRegistry::with_builtins()).unwrap();
    let pairs: Vec<(String, String)> = registry
        .iter()
        .flat_map(|t| t.impacts.iter().map(move |i| (t.name.clone(), i.metric_id.clone())))
        .collect();
    for (k, (tool, metric)) in pairs.iter().enumerate() {
        registry.set_weight(tool, metric, inst.weights[k % inst.weights.len()] * scale).unwrap();
    }
    let components = METRICS
        .iter()
        .zip(&inst.entries)
        .filter(|(_, (included, _, _))| *included)
        .map(|(id, &(_, at_least, gap))| GapComponent {
            metric_id: id.to_string(),
            value: Some(0.0),
            target: 1.0,
            comparator: if at_least { Comparator::AtLeast } else { Comparator::AtMost },
            normalized_gap: gap,
        })
        .collect();
    let suppressed = registry
        .iter()
        .zip(&inst.suppressed)
        .filter(|(_, s)| **s)
        .map(|(t, _)| (t.name.clone(), ContextScope::database()))
        .collect();
    (state, registry, GapVector { components }, suppressed)
}

pub fn decide(inst: &Instance, scale: f64) -> (PlannerVerdict, DataProductState, ToolRegistry, GapVector, BTreeSet<(String, ContextScope)>) {
    let (state, registry, gap, suppressed) = materialize(inst, scale);
    let config = PlannerConfig::default();
    let input = PlanInput {
        snapshot: &state,
        registry: &registry,
        gap: &gap,
        history: &[],
        suppressed: &suppressed,
        iteration: 1,
        config: &config,
    };
    let verdict = plan(&input);
    (verdict, state, registry, gap, suppressed)
}

pub fn selected(v: &PlannerVerdict) -> Option<&str> {
    match v {
        PlannerVerdict::Propose(p) => Some(&p.tool_name),
        _ => None,
    }
}

/// Checks one instance: a proposal is applicable, not suppressed and scores
/// the brute-force maximum; other verdicts match the gap and candidates.
pub fn check_safe_and_maximal(inst: &Instance) -> Result<(), String> {
    let (verdict, state, registry, gap, suppressed) = decide(inst, 1.0);
    let candidates: Vec<(&ToolDescriptor, f64)> = registry
        .iter()
        .filter(|t| t.preconditions.iter().all(|r| r.check(&state).holds))
        .filter(|t| !suppressed.contains(&(t.name.clone(), ContextScope::database())))
        .map(|t| (t, oracle_score(t, &gap)))
        .collect();
    let best = candidates.iter().map(|(_, s)| *s).fold(0.0, f64::max);
    let total = gap.total();
    match &verdict {
        PlannerVerdict::Converged if total == 0.0 => Ok(()),
        PlannerVerdict::ManualReviewRecommended { reason } if total > 0.0 && best == 0.0 && reason == "no applicable tool" => {
            Ok(())
        }
        PlannerVerdict::Propose(p) if total > 0.0 => {
            let Some((tool, score)) = candidates.iter().find(|(t, _)| t.name == p.tool_name) else {
                return Err(format!("{} is not an applicable, unsuppressed tool", p.tool_name));
            };
            if !tool.is_applicable(&state) {
                return Err(format!("{} is not applicable", p.tool_name));
            }
            if (score - best).abs() > 1e-12 {
                return Err(format!("{} scored {score} < {best}", p.tool_name));
            }
            if (p.expected_improvement - score).abs() > 1e-12 {
                return Err(format!("reported {} but brute force gives {score}", p.expected_improvement));
            }
            tool.validate_params(&p.parameters).map_err(|e| e.to_string())
        }
        other => Err(format!("unexpected {other:?} with total gap {total} and best score {best}")),
    }
}

/// Checks that scaling every weight by `scale` keeps the verdict kind and
/// the selected tool.
pub fn check_scale_invariance(inst: &Instance, scale: f64) -> Result<(), String> {
    let (a, ..) = decide(inst, 1.0);
    let (b, ..) = decide(inst, scale);
    if selected(&a) != selected(&b) || std::mem::discriminant(&a) != std::mem::discriminant(&b) {
        return Err(format!("x{scale} changed {:?} into {:?}", selected(&a), selected(&b)));
    }
    Ok(())
}
