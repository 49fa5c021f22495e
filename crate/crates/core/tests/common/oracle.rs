//! Brute-force metric oracle: recomputes every metric at every scope from
//! its own model of a generated event stream.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use dataprod_core::clock::SteppingClock;
use dataprod_core::metrics::{Direction, Facet, MetricDefinition, MetricRegistry, MetricStore};
use dataprod_core::state::{ContextScope, DataProductState, EventPayload, QuestionId, ScopeLevel, TableId};

use super::events::{EventGenerator, Generated, Shape};

pub const EVENTS: usize = 1000;
pub const TOLERANCE: f64 = 1e-9;

pub fn registry() -> MetricRegistry {
    let mut registry = MetricRegistry::with_builtins();
    registry
        .register_metric(MetricDefinition {
            metric_id: "view_count".into(),
            scope_level: ScopeLevel::Database,
            direction: Direction::Maximize,
            unit: "count".into(),
            depends_on: BTreeSet::from([Facet::Views]),
            database_rollup: false,
            compute: Arc::new(|s, _| Some(s.views().count() as f64)),
        })
        .unwrap();
    registry
        .register_metric(MetricDefinition {
            metric_id: "sql_revisions".into(),
            scope_level: ScopeLevel::Question,
            direction: Direction::Minimize,
            unit: "count".into(),
            depends_on: BTreeSet::from([Facet::Questions, Facet::QueryVersions]),
            database_rollup: false,
            compute: Arc::new(|s, scope| {
                let id = QuestionId(scope.ids.first()?.clone());
                s.question(&id)?;
                Some(s.query_versions(&id).len() as f64)
            }),
        })
        .unwrap();
    registry
}

/// Everything the metrics depend on, kept from the generator's own
/// description of each event.
#[derive(Default)]
struct Model {
    tables: BTreeMap<TableId, usize>,
    questions: BTreeSet<QuestionId>,
    latest: BTreeMap<QuestionId, (Shape, Option<f64>)>,
    revisions: BTreeMap<QuestionId, usize>,
    views: usize,
}

impl Model {
    fn observe(&mut self, g: &Generated) {
        match &g.event.payload {
            EventPayload::TableAdded(t) => {
                self.tables.insert(t.table_id.clone(), t.columns.len());
            }
            EventPayload::QuestionAdded(q) => {
                self.questions.insert(q.question_id.clone());
            }
            EventPayload::QueryVersionAdded(v) => {
                let shape = g.shape.clone().expect("query events carry their shape");
                self.latest.insert(v.question_id.clone(), (shape, v.exec_ms));
                *self.revisions.entry(v.question_id.clone()).or_default() += 1;
            }
            EventPayload::ViewAdded(_) => self.views += 1,
            _ => {}
        }
    }

    fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
        let v: Vec<f64> = values.collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Every (metric, scope) value, computed from scratch.
    fn expected(&self) -> BTreeMap<(String, ContextScope), Option<f64>> {
        let db = ContextScope::database;
        let mut out = BTreeMap::new();
        let mut put = |id: &str, scope: ContextScope, v: Option<f64>| {
            out.insert((id.to_string(), scope), v);
        };
        let covered: BTreeSet<&TableId> = self.latest.values().flat_map(|(s, _)| s.tables.iter()).collect();
        let n_tables = self.tables.len();
        put("table_coverage", db(), (n_tables > 0).then(|| covered.len() as f64 / n_tables as f64));
        let mut referenced: BTreeMap<&TableId, BTreeSet<&str>> = BTreeMap::new();
        for (shape, _) in self.latest.values() {
            for c in &shape.columns {
                referenced.entry(&c.table).or_default().insert(&c.column);
            }
        }
        let (mut hit, mut total) = (0, 0);
        for (t, &cols) in &self.tables {
            let n = referenced.get(t).map_or(0, |c| c.len());
            hit += n;
            total += cols;
            put("column_coverage", ContextScope::table(t), (cols > 0).then(|| n as f64 / cols as f64));
        }
        put("column_coverage", db(), (total > 0).then(|| hit as f64 / total as f64));
        put("question_count", db(), Some(self.questions.len() as f64));
        put("avg_query_length", db(), Self::mean(self.latest.values().map(|(s, _)| s.tokens as f64)));
        put("avg_query_complexity", db(), Self::mean(self.latest.values().map(|(s, _)| s.complexity())));
        put("avg_exec_speed", db(), Self::mean(self.latest.values().filter_map(|(_, ms)| *ms)));
        put("view_count", db(), Some(self.views as f64));
        for q in &self.questions {
            put("sql_revisions", ContextScope::question(q), Some(self.revisions.get(q).copied().unwrap_or(0) as f64));
        }
        out
    }
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() <= TOLERANCE,
        (None, None) => true,
        _ => false,
    }
}

/// Applies `events` generated events from `seed`, maintaining metrics
/// incrementally, and compares every value with the model after each step.
pub fn check_equivalence(seed: u64, events: usize) -> Result<(), String> {
    let registry = registry();
    let clock = SteppingClock::new(0, 1);
    let mut generator = EventGenerator::new(seed);
    let mut model = Model::default();
    let mut state = DataProductState::new();
    let mut store = MetricStore::new();
    store.recalculate_all(&registry, &state, 0, &clock).unwrap();
    for step in 1..=events {
        let g = generator.next_event();
        state = state.apply_event(g.event.clone()).map_err(|e| format!("seed {seed} step {step}: {e}"))?;
        let applied = state.events().last().unwrap().clone();
        let targets = registry.resolve_contexts(&state, &applied);
        store.recalculate(&registry, &state, &targets, step as u32, &clock).map_err(|e| e.to_string())?;
        model.observe(&g);

        let expected = model.expected();
        let kept: BTreeMap<(String, ContextScope), Option<f64>> =
            store.latest_values().map(|v| ((v.metric_id.clone(), v.scope.clone()), v.value)).collect();
        if !kept.keys().eq(expected.keys()) {
            return Err(format!("seed {seed} step {step}: kept scopes differ from the oracle's"));
        }
        for (key, want) in &expected {
            let got = kept[key];
            if !close(got, *want) {
                return Err(format!("seed {seed} step {step} {key:?}: kept {got:?}, oracle {want:?}"));
            }
        }
    }
    Ok(())
}
