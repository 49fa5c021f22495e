//! Quality metrics: definitions with facet dependencies, event-driven
//! context resolution, the value/history store, and contract gaps.

mod builtin;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::state::{ContextScope, DataProductState, EventPayload, ScopeLevel, StateEvent, TableId};

pub use builtin::{builtin_metrics, builtin_metrics_with, ids};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

/// Parts of the state a metric reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Facet {
    Tables,
    Questions,
    QueryVersions,
    Answers,
    Views,
}

impl Facet {
    /// The facet an event writes to, if any metric-relevant one.
    pub fn of_event(payload: &EventPayload) -> Option<Facet> {
        match payload {
            EventPayload::TableAdded(_) => Some(Facet::Tables),
            EventPayload::QuestionAdded(_) => Some(Facet::Questions),
            EventPayload::QueryVersionAdded(_) => Some(Facet::QueryVersions),
            EventPayload::AnswerRecorded(_) => Some(Facet::Answers),
            EventPayload::ViewAdded(_) => Some(Facet::Views),
            EventPayload::TopicAssigned(_) | EventPayload::ContractChanged(_) => None,
        }
    }
}

/// `None` means the value is unknown at that scope (for example an average
/// over zero measurements).
pub type ComputeFn = Arc<dyn Fn(&DataProductState, &ContextScope) -> Option<f64> + Send + Sync>;

#[derive(Clone)]
pub struct MetricDefinition {
    pub metric_id: String,
    pub scope_level: ScopeLevel,
    pub direction: Direction,
    pub unit: String,
    pub depends_on: BTreeSet<Facet>,
    /// Table-level metrics with a database rollup are also kept at database
    /// scope, refreshed whenever any of their table-scope values is.
    pub database_rollup: bool,
    pub compute: ComputeFn,
}

impl fmt::Debug for MetricDefinition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MetricDefinition")
            .field("metric_id", &self.metric_id)
            .field("scope_level", &self.scope_level)
            .field("direction", &self.direction)
            .field("unit", &self.unit)
            .field("depends_on", &self.depends_on)
            .field("database_rollup", &self.database_rollup)
            .finish_non_exhaustive()
    }
}

impl MetricDefinition {
    /// Every scope at which this metric has a value on `state`.
    pub fn all_scopes(&self, state: &DataProductState) -> Vec<ContextScope> {
        match self.scope_level {
            ScopeLevel::Database => vec![ContextScope::database()],
            ScopeLevel::Table => {
                let mut scopes: Vec<_> = state.tables().map(|t| ContextScope::table(&t.table_id)).collect();
                if self.database_rollup {
                    scopes.push(ContextScope::database());
                }
                scopes
            }
            ScopeLevel::Question => state.questions().map(|q| ContextScope::question(&q.question_id)).collect(),
        }
    }
}

/// Serializable description of a metric, for catalogs and the API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricInfo {
    pub metric_id: String,
    pub scope_level: ScopeLevel,
    pub direction: Direction,
    pub unit: String,
    pub depends_on: BTreeSet<Facet>,
    pub database_rollup: bool,
}

impl From<&MetricDefinition> for MetricInfo {
    fn from(d: &MetricDefinition) -> Self {
        Self {
            metric_id: d.metric_id.clone(),
            scope_level: d.scope_level,
            direction: d.direction,
            unit: d.unit.clone(),
            depends_on: d.depends_on.clone(),
            database_rollup: d.database_rollup,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric_id: String,
    pub scope: ContextScope,
    pub value: Option<f64>,
    pub computed_at_version: u64,
    pub iteration: u32,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = ">=")]
    AtLeast,
    #[serde(rename = "<=")]
    AtMost,
}

impl Comparator {
    pub fn holds(self, value: f64, target: f64) -> bool {
        match self {
            Comparator::AtLeast => value >= target,
            Comparator::AtMost => value <= target,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::AtLeast => ">=",
            Comparator::AtMost => "<=",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractEntry {
    pub metric_id: String,
    pub target: f64,
    pub comparator: Comparator,
}

/// User-defined targets the loop works toward; evaluated at database scope.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Contract {
    pub entries: Vec<ContractEntry>,
}

impl Contract {
    pub fn new(entries: impl IntoIterator<Item = (&'static str, Comparator, f64)>) -> Self {
        Self {
            entries: entries
                .into_iter()
                .map(|(id, comparator, target)| ContractEntry { metric_id: id.to_string(), target, comparator })
                .collect(),
        }
    }

    /// Checks entries against registered metrics: one entry per metric,
    /// finite non-negative targets, ratio targets within [0, 1].
    pub fn validate(&self, registry: &MetricRegistry) -> Result<(), MetricsError> {
        let mut seen = BTreeSet::new();
        for entry in &self.entries {
            let def = registry.get(&entry.metric_id)?;
            if !seen.insert(entry.metric_id.as_str()) {
                return Err(MetricsError::InvalidContract(format!("{} appears twice", entry.metric_id)));
            }
            if !entry.target.is_finite() || entry.target < 0.0 {
                return Err(MetricsError::InvalidContract(format!(
                    "target {} for {} must be a non-negative number",
                    entry.target, entry.metric_id
                )));
            }
            if def.unit == "ratio" && entry.target > 1.0 {
                return Err(MetricsError::InvalidContract(format!(
                    "target {} for {} is outside [0, 1]",
                    entry.target, entry.metric_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapComponent {
    pub metric_id: String,
    pub value: Option<f64>,
    pub target: f64,
    pub comparator: Comparator,
    pub normalized_gap: f64,
}

impl GapComponent {
    pub fn is_met(&self) -> bool {
        self.normalized_gap == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GapVector {
    pub components: Vec<GapComponent>,
}

impl GapVector {
    pub fn total(&self) -> f64 {
        self.components.iter().map(|c| c.normalized_gap).sum()
    }

    pub fn get(&self, metric_id: &str) -> Option<&GapComponent> {
        self.components.iter().find(|c| c.metric_id == metric_id)
    }
}

/// Shortfall of `value` from `target`, normalized by the target and clamped
/// to [0, 1]. Unknown values are maximally unmet.
pub fn normalized_gap(value: Option<f64>, target: f64, comparator: Comparator) -> f64 {
    let Some(value) = value else { return 1.0 };
    let raw = match comparator {
        Comparator::AtLeast if target > 0.0 => (target - value).max(0.0) / target,
        Comparator::AtMost if target > 0.0 => (value - target).max(0.0) / target,
        _ => {
            if comparator.holds(value, target) {
                0.0
            } else {
                1.0
            }
        }
    };
    raw.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("metric `{0}` is already registered")]
    DuplicateMetric(String),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("metric `{0}` declares no dependencies")]
    NoDependencies(String),
    #[error("no value computed yet for `{0}`")]
    MissingValue(String),
    #[error("invalid contract: {0}")]
    InvalidContract(String),
}

#[derive(Debug, Clone, Default)]
pub struct MetricRegistry {
    defs: Vec<MetricDefinition>,
}

impl MetricRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding the six built-in metrics.
    pub fn with_builtins() -> Self {
        let mut registry = Self::new();
        for def in builtin_metrics() {
            registry.register_metric(def).expect("built-in ids are unique");
        }
        registry
    }

    pub fn register_metric(&mut self, def: MetricDefinition) -> Result<(), MetricsError> {
        if self.defs.iter().any(|d| d.metric_id == def.metric_id) {
            return Err(MetricsError::DuplicateMetric(def.metric_id));
        }
        if def.depends_on.is_empty() {
            return Err(MetricsError::NoDependencies(def.metric_id));
        }
        self.defs.push(def);
        Ok(())
    }

    pub fn get(&self, metric_id: &str) -> Result<&MetricDefinition, MetricsError> {
        self.defs
            .iter()
            .find(|d| d.metric_id == metric_id)
            .ok_or_else(|| MetricsError::UnknownMetric(metric_id.to_string()))
    }

    pub fn contains(&self, metric_id: &str) -> bool {
        self.defs.iter().any(|d| d.metric_id == metric_id)
    }

    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &MetricDefinition> {
        self.defs.iter()
    }

    /// The (metric, scope) pairs an event can change, at the finest scope
    /// the event touches. `state` is the state after the event.
    pub fn resolve_contexts(&self, state: &DataProductState, event: &StateEvent) -> BTreeSet<(String, ContextScope)> {
        let mut out = BTreeSet::new();
        let Some(facet) = Facet::of_event(&event.payload) else { return out };
        for def in self.defs.iter().filter(|d| d.depends_on.contains(&facet)) {
            let scopes: Vec<ContextScope> = match def.scope_level {
                ScopeLevel::Database => vec![ContextScope::database()],
                ScopeLevel::Table => affected_tables(state, &event.payload).iter().map(ContextScope::table).collect(),
                ScopeLevel::Question => match &event.payload {
                    EventPayload::QuestionAdded(q) => vec![ContextScope::question(&q.question_id)],
                    EventPayload::QueryVersionAdded(v) => vec![ContextScope::question(&v.question_id)],
                    EventPayload::AnswerRecorded(a) => vec![ContextScope::question(&a.question_id)],
                    _ => state.questions().map(|q| ContextScope::question(&q.question_id)).collect(),
                },
            };
            out.extend(scopes.into_iter().map(|s| (def.metric_id.clone(), s)));
        }
        out
    }
}

/// Tables whose table-scope metrics an event can change.
fn affected_tables(state: &DataProductState, payload: &EventPayload) -> BTreeSet<TableId> {
    match payload {
        EventPayload::TableAdded(t) => BTreeSet::from([t.table_id.clone()]),
        EventPayload::QueryVersionAdded(v) => {
            // The new version supersedes the previous one, so tables only
            // the previous version referenced are affected too.
            let versions = state.query_versions(&v.question_id);
            let previous = versions.len().checked_sub(2).map(|i| &versions[i]);
            v.analysis
                .referenced_tables
                .iter()
                .chain(previous.into_iter().flat_map(|p| p.analysis.referenced_tables.iter()))
                .cloned()
                .collect()
        }
        _ => state.tables().map(|t| t.table_id.clone()).collect(),
    }
}

/// Latest value per (metric, scope) plus the full history of computations.
#[derive(Debug, Clone, Default)]
pub struct MetricStore {
    latest: BTreeMap<(String, ContextScope), MetricValue>,
    history: Vec<MetricValue>,
}

impl MetricStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn latest(&self, metric_id: &str, scope: &ContextScope) -> Option<&MetricValue> {
        self.latest.get(&(metric_id.to_string(), scope.clone()))
    }

    pub fn latest_values(&self) -> impl Iterator<Item = &MetricValue> {
        self.latest.values()
    }

    pub fn database_values(&self) -> Vec<MetricValue> {
        self.latest.values().filter(|v| v.scope.level == ScopeLevel::Database).cloned().collect()
    }

    pub fn history(&self) -> &[MetricValue] {
        &self.history
    }

    pub fn history_of<'a>(&'a self, metric_id: &'a str) -> impl Iterator<Item = &'a MetricValue> + 'a {
        self.history.iter().filter(move |v| v.metric_id == metric_id)
    }

    /// Computes every target on `state`, records the values, and returns
    /// them in computation order. Database rollups of recomputed
    /// table-scope metrics are included.
    pub fn recalculate(
        &mut self,
        registry: &MetricRegistry,
        state: &DataProductState,
        targets: &BTreeSet<(String, ContextScope)>,
        iteration: u32,
        clock: &dyn Clock,
    ) -> Result<Vec<MetricValue>, MetricsError> {
        let mut work: Vec<(&MetricDefinition, ContextScope)> = Vec::with_capacity(targets.len());
        for (metric_id, scope) in targets {
            work.push((registry.get(metric_id)?, scope.clone()));
        }
        let rollups: BTreeSet<&str> = work
            .iter()
            .filter(|(d, s)| d.database_rollup && s.level == ScopeLevel::Table)
            .map(|(d, _)| d.metric_id.as_str())
            .collect();
        for id in rollups {
            let db = ContextScope::database();
            if !targets.contains(&(id.to_string(), db.clone())) {
                work.push((registry.get(id)?, db));
            }
        }
        let timestamp_ms = clock.now_ms();
        let mut out = Vec::with_capacity(work.len());
        for (def, scope) in work {
            let value = MetricValue {
                metric_id: def.metric_id.clone(),
                value: (def.compute)(state, &scope),
                scope,
                computed_at_version: state.version(),
                iteration,
                timestamp_ms,
            };
            self.latest.insert((value.metric_id.clone(), value.scope.clone()), value.clone());
            self.history.push(value.clone());
            out.push(value);
        }
        Ok(out)
    }

    /// Recomputes every registered metric at every scope.
    pub fn recalculate_all(
        &mut self,
        registry: &MetricRegistry,
        state: &DataProductState,
        iteration: u32,
        clock: &dyn Clock,
    ) -> Result<Vec<MetricValue>, MetricsError> {
        let targets = registry
            .iter()
            .flat_map(|d| d.all_scopes(state).into_iter().map(|s| (d.metric_id.clone(), s)))
            .collect();
        self.recalculate(registry, state, &targets, iteration, clock)
    }

    pub fn gap(&self, contract: &Contract) -> Result<GapVector, MetricsError> {
        let db = ContextScope::database();
        let components = contract
            .entries
            .iter()
            .map(|entry| {
                let value = self.latest(&entry.metric_id, &db).ok_or_else(|| MetricsError::MissingValue(entry.metric_id.clone()))?;
                Ok(GapComponent {
                    metric_id: entry.metric_id.clone(),
                    value: value.value,
                    target: entry.target,
                    comparator: entry.comparator,
                    normalized_gap: normalized_gap(value.value, entry.target, entry.comparator),
                })
            })
            .collect::<Result<_, MetricsError>>()?;
        Ok(GapVector { components })
    }

    /// History as line-delimited JSON records, one per computation.
    pub fn export_history(&self) -> String {
        let mut out = String::new();
        for v in &self.history {
            let record = HistoryRecord {
                iteration: v.iteration,
                metric_id: &v.metric_id,
                scope: v.scope.to_string(),
                value: v.value,
                timestamp: v.timestamp_ms,
            };
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Serialize)]
struct HistoryRecord<'a> {
    iteration: u32,
    metric_id: &'a str,
    scope: String,
    value: Option<f64>,
    timestamp: u64,
}
