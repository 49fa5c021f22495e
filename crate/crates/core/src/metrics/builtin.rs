//! The six built-in metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::{Direction, Facet, MetricDefinition};
use crate::sql::{complexity_score_with, ComplexityWeights};
use crate::state::{ContextScope, DataProductState, ScopeLevel, TableId};

pub mod ids {
    pub const TABLE_COVERAGE: &str = "table_coverage";
    pub const COLUMN_COVERAGE: &str = "column_coverage";
    pub const QUESTION_COUNT: &str = "question_count";
    pub const AVG_QUERY_LENGTH: &str = "avg_query_length";
    pub const AVG_QUERY_COMPLEXITY: &str = "avg_query_complexity";
    pub const AVG_EXEC_SPEED: &str = "avg_exec_speed";
}

pub fn builtin_metrics() -> Vec<MetricDefinition> {
    builtin_metrics_with(ComplexityWeights::default())
}

/// Built-ins with custom complexity weights.
pub fn builtin_metrics_with(weights: ComplexityWeights) -> Vec<MetricDefinition> {
    let db = |id: &str, direction, unit: &str, facets: &[Facet], compute: super::ComputeFn| MetricDefinition {
        metric_id: id.into(),
        scope_level: ScopeLevel::Database,
        direction,
        unit: unit.into(),
        depends_on: facets.iter().copied().collect(),
        database_rollup: false,
        compute,
    };
    vec![
        db(ids::TABLE_COVERAGE, Direction::Maximize, "ratio", &[Facet::Tables, Facet::QueryVersions], Arc::new(|s, _| table_coverage(s))),
        MetricDefinition {
            metric_id: ids::COLUMN_COVERAGE.into(),
            scope_level: ScopeLevel::Table,
            direction: Direction::Maximize,
            unit: "ratio".into(),
            depends_on: BTreeSet::from([Facet::Tables, Facet::QueryVersions]),
            database_rollup: true,
            compute: Arc::new(column_coverage),
        },
        db(ids::QUESTION_COUNT, Direction::Maximize, "count", &[Facet::Questions], Arc::new(|s, _| Some(s.question_count() as f64))),
        db(
            ids::AVG_QUERY_LENGTH,
            Direction::Minimize,
            "tokens",
            &[Facet::QueryVersions],
            Arc::new(|s, _| mean(s.latest_queries().map(|q| q.analysis.token_count as f64))),
        ),
        db(
            ids::AVG_QUERY_COMPLEXITY,
            Direction::Minimize,
            "score",
            &[Facet::QueryVersions],
            Arc::new(move |s, _| mean(s.latest_queries().map(|q| complexity_score_with(&q.analysis, &weights)))),
        ),
        db(
            ids::AVG_EXEC_SPEED,
            Direction::Minimize,
            "ms",
            &[Facet::QueryVersions],
            Arc::new(|s, _| mean(s.latest_queries().filter_map(|q| q.exec_ms))),
        ),
    ]
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn table_coverage(state: &DataProductState) -> Option<f64> {
    let total = state.table_count();
    (total > 0).then(|| state.covered_tables().len() as f64 / total as f64)
}

/// Referenced columns per table over all latest query versions.
fn referenced_columns(state: &DataProductState) -> BTreeMap<&TableId, BTreeSet<&str>> {
    let mut out: BTreeMap<&TableId, BTreeSet<&str>> = BTreeMap::new();
    for q in state.latest_queries() {
        for c in &q.analysis.referenced_columns {
            out.entry(&c.table).or_default().insert(&c.column);
        }
    }
    out
}

fn column_coverage(state: &DataProductState, scope: &ContextScope) -> Option<f64> {
    let referenced = referenced_columns(state);
    let count = |t: &TableId| referenced.get(t).map_or(0, |cols| cols.len());
    match scope.level {
        ScopeLevel::Table => {
            let table = state.table(&TableId(scope.ids.first()?.clone()))?;
            let total = table.columns.len();
            (total > 0).then(|| count(&table.table_id) as f64 / total as f64)
        }
        _ => {
            let (hit, total) = state
                .tables()
                .fold((0usize, 0usize), |(h, t), table| (h + count(&table.table_id), t + table.columns.len()));
            (total > 0).then(|| hit as f64 / total as f64)
        }
    }
}
