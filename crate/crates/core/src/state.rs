//! The data product state and its event log.
//!
//! [`DataProductState`] is an immutable value. Applying an event returns a
//! new state that shares unchanged parts with its predecessor, so any state
//! handed out earlier stays a consistent snapshot of its version.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::Contract;
use crate::sql::{self, Catalog, QueryAnalysis, SqlError};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TableId(pub String);

impl TableId {
    pub fn from_name(name: &str) -> Self {
        TableId(name.to_ascii_lowercase())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuestionId(pub String);

impl QuestionId {
    pub fn from_seq(n: usize) -> Self {
        QuestionId(format!("q{n:04}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for QuestionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for QuestionId {
    fn from(s: &str) -> Self {
        QuestionId(s.to_string())
    }
}

/// A column of a table; column names compare in lowercase.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ColumnRef {
    pub table: TableId,
    pub column: String,
}

impl ColumnRef {
    pub fn new(table: TableId, column: &str) -> Self {
        Self { table, column: column.to_ascii_lowercase() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Numeric,
    Text,
    Temporal,
    Boolean,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub data_kind: DataKind,
    pub nullable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKey {
    pub column: String,
    pub references_table: TableId,
    pub references_column: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableMeta {
    pub table_id: TableId,
    pub name: String,
    pub columns: Vec<ColumnMeta>,
    pub row_count_estimate: u64,
    pub foreign_keys: Vec<ForeignKey>,
}

impl TableMeta {
    pub fn column(&self, name: &str) -> Option<&ColumnMeta> {
        self.columns.iter().find(|c| c.name.eq_ignore_ascii_case(name))
    }

    /// Foreign-key columns and id-like columns; these are join keys rather
    /// than measures or categories.
    pub fn is_key_column(&self, name: &str) -> bool {
        self.foreign_keys.iter().any(|fk| fk.column.eq_ignore_ascii_case(name))
            || name.eq_ignore_ascii_case("id")
            || name.to_ascii_lowercase().ends_with("_id")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionOrigin {
    Predefined,
    Generated,
    Followup,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SchemaTarget {
    pub table: TableId,
    pub column: Option<String>,
}

impl SchemaTarget {
    pub fn table(table: TableId) -> Self {
        Self { table, column: None }
    }

    pub fn column(table: TableId, column: &str) -> Self {
        Self { table, column: Some(column.to_ascii_lowercase()) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: QuestionId,
    pub text: String,
    pub origin: QuestionOrigin,
    pub parent_question: Option<QuestionId>,
    pub schema_targets: BTreeSet<SchemaTarget>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryVersion {
    pub question_id: QuestionId,
    pub version_no: u32,
    pub sql_text: String,
    pub created_by: String,
    pub analysis: QueryAnalysis,
    pub exec_ms: Option<f64>,
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerVersion {
    pub question_id: QuestionId,
    pub version_no: u32,
    pub payload_digest: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewDef {
    pub view_id: String,
    pub name: String,
    pub sql_text: String,
    pub covers_pattern: String,
    pub created_at_iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicAssignment {
    pub question_id: QuestionId,
    pub topic_label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeLevel {
    Database,
    Table,
    Question,
}

/// Where a metric value applies: the whole database, or specific tables or
/// questions.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContextScope {
    pub level: ScopeLevel,
    pub ids: Vec<String>,
}

impl ContextScope {
    pub fn database() -> Self {
        Self { level: ScopeLevel::Database, ids: Vec::new() }
    }

    pub fn table(id: &TableId) -> Self {
        Self { level: ScopeLevel::Table, ids: vec![id.0.clone()] }
    }

    pub fn question(id: &QuestionId) -> Self {
        Self { level: ScopeLevel::Question, ids: vec![id.0.clone()] }
    }
}

impl fmt::Display for ContextScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.level {
            ScopeLevel::Database => f.write_str("database"),
            ScopeLevel::Table => write!(f, "table:{}", self.ids.join(",")),
            ScopeLevel::Question => write!(f, "question:{}", self.ids.join(",")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    TableAdded,
    QuestionAdded,
    QueryVersionAdded,
    AnswerRecorded,
    ViewAdded,
    TopicAssigned,
    ContractChanged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data")]
pub enum EventPayload {
    TableAdded(TableMeta),
    QuestionAdded(Question),
    QueryVersionAdded(QueryVersion),
    AnswerRecorded(AnswerVersion),
    ViewAdded(ViewDef),
    TopicAssigned(TopicAssignment),
    ContractChanged(Contract),
}

impl EventPayload {
    pub fn kind(&self) -> EventKind {
        match self {
            EventPayload::TableAdded(_) => EventKind::TableAdded,
            EventPayload::QuestionAdded(_) => EventKind::QuestionAdded,
            EventPayload::QueryVersionAdded(_) => EventKind::QueryVersionAdded,
            EventPayload::AnswerRecorded(_) => EventKind::AnswerRecorded,
            EventPayload::ViewAdded(_) => EventKind::ViewAdded,
            EventPayload::TopicAssigned(_) => EventKind::TopicAssigned,
            EventPayload::ContractChanged(_) => EventKind::ContractChanged,
        }
    }

    fn scope(&self) -> ContextScope {
        match self {
            EventPayload::TableAdded(t) => ContextScope::table(&t.table_id),
            EventPayload::QuestionAdded(q) => ContextScope::question(&q.question_id),
            EventPayload::QueryVersionAdded(v) => ContextScope::question(&v.question_id),
            EventPayload::AnswerRecorded(a) => ContextScope::question(&a.question_id),
            EventPayload::TopicAssigned(t) => ContextScope::question(&t.question_id),
            EventPayload::ViewAdded(_) | EventPayload::ContractChanged(_) => ContextScope::database(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEvent {
    /// Zero until the event is applied; then its position in the log.
    pub event_id: u64,
    pub scope: ContextScope,
    pub payload: EventPayload,
}

impl StateEvent {
    pub fn new(payload: EventPayload) -> Self {
        Self { event_id: 0, scope: payload.scope(), payload }
    }

    pub fn kind(&self) -> EventKind {
        self.payload.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StateError {
    #[error("dangling reference: {0}")]
    Dangling(String),
    #[error("duplicate identifier: {0}")]
    Duplicate(String),
    #[error("unknown question `{0}`")]
    UnknownQuestion(QuestionId),
    #[error("invalid event payload: {0}")]
    Invalid(String),
    #[error("event id {found} out of sequence (expected {expected})")]
    OutOfSequence { expected: u64, found: u64 },
    #[error("view SQL does not parse: {0}")]
    ViewSql(#[from] SqlError),
    #[error("state document: {0}")]
    Document(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataProductState {
    version: u64,
    tables: Arc<BTreeMap<TableId, Arc<TableMeta>>>,
    questions: Arc<BTreeMap<QuestionId, Arc<Question>>>,
    queries: Arc<BTreeMap<QuestionId, Arc<Vec<QueryVersion>>>>,
    answers: Arc<BTreeMap<QuestionId, Arc<Vec<AnswerVersion>>>>,
    views: Arc<BTreeMap<String, Arc<ViewDef>>>,
    topics: Arc<BTreeMap<QuestionId, String>>,
    contract: Option<Arc<Contract>>,
    log: Arc<Vec<Arc<StateEvent>>>,
}

impl DataProductState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Returns the state after `event`. `self` is left untouched.
    pub fn apply_event(&self, mut event: StateEvent) -> Result<DataProductState, StateError> {
        let expected = self.version + 1;
        if event.event_id != 0 && event.event_id != expected {
            return Err(StateError::OutOfSequence { expected, found: event.event_id });
        }
        event.event_id = expected;
        event.scope = event.payload.scope();

        let mut next = self.clone();
        match &event.payload {
            EventPayload::TableAdded(t) => {
                self.check_table(t)?;
                Arc::make_mut(&mut next.tables).insert(t.table_id.clone(), Arc::new(t.clone()));
            }
            EventPayload::QuestionAdded(q) => {
                self.check_question(q)?;
                Arc::make_mut(&mut next.questions).insert(q.question_id.clone(), Arc::new(q.clone()));
            }
            EventPayload::QueryVersionAdded(v) => {
                self.check_query_version(v)?;
                let versions = Arc::make_mut(&mut next.queries).entry(v.question_id.clone()).or_default();
                Arc::make_mut(versions).push(v.clone());
            }
            EventPayload::AnswerRecorded(a) => {
                self.require_question(&a.question_id)?;
                let latest = self.answers.get(&a.question_id).map_or(0, |v| v.len() as u32);
                if a.version_no != latest + 1 {
                    return Err(StateError::Invalid(format!(
                        "answer version {} for {} does not follow {latest}",
                        a.version_no, a.question_id
                    )));
                }
                if !(0.0..=1.0).contains(&a.confidence) {
                    return Err(StateError::Invalid(format!("confidence {} outside [0, 1]", a.confidence)));
                }
                let versions = Arc::make_mut(&mut next.answers).entry(a.question_id.clone()).or_default();
                Arc::make_mut(versions).push(a.clone());
            }
            EventPayload::ViewAdded(v) => {
                let key = v.name.to_ascii_lowercase();
                if self.views.contains_key(&key) || self.tables.contains_key(&TableId(key.clone())) {
                    return Err(StateError::Duplicate(format!("view name {}", v.name)));
                }
                sql::parse_query(&v.sql_text)?;
                Arc::make_mut(&mut next.views).insert(key, Arc::new(v.clone()));
            }
            EventPayload::TopicAssigned(t) => {
                self.require_question(&t.question_id)?;
                if self.topics.contains_key(&t.question_id) {
                    return Err(StateError::Duplicate(format!("topic for {}", t.question_id)));
                }
                Arc::make_mut(&mut next.topics).insert(t.question_id.clone(), t.topic_label.clone());
            }
            EventPayload::ContractChanged(c) => {
                next.contract = Some(Arc::new(c.clone()));
            }
        }
        next.version = expected;
        Arc::make_mut(&mut next.log).push(Arc::new(event));
        Ok(next)
    }

    fn check_table(&self, t: &TableMeta) -> Result<(), StateError> {
        if self.tables.contains_key(&t.table_id) {
            return Err(StateError::Duplicate(format!("table {}", t.table_id)));
        }
        let mut seen = BTreeSet::new();
        for c in &t.columns {
            if !seen.insert(c.name.to_ascii_lowercase()) {
                return Err(StateError::Duplicate(format!("column {}.{}", t.name, c.name)));
            }
        }
        for fk in &t.foreign_keys {
            if t.column(&fk.column).is_none() {
                return Err(StateError::Dangling(format!("foreign key column {}.{}", t.name, fk.column)));
            }
            let remote_has = if fk.references_table == t.table_id {
                t.column(&fk.references_column).is_some()
            } else {
                self.tables.get(&fk.references_table).is_some_and(|r| r.column(&fk.references_column).is_some())
            };
            if !remote_has {
                return Err(StateError::Dangling(format!(
                    "foreign key target {}.{}",
                    fk.references_table, fk.references_column
                )));
            }
        }
        Ok(())
    }

    fn check_targets(&self, targets: &BTreeSet<SchemaTarget>) -> Result<(), StateError> {
        for target in targets {
            let table = self
                .tables
                .get(&target.table)
                .ok_or_else(|| StateError::Dangling(format!("table {}", target.table)))?;
            if let Some(col) = &target.column {
                if table.column(col).is_none() {
                    return Err(StateError::Dangling(format!("column {}.{col}", target.table)));
                }
            }
        }
        Ok(())
    }

    fn check_question(&self, q: &Question) -> Result<(), StateError> {
        if self.questions.contains_key(&q.question_id) {
            return Err(StateError::Duplicate(format!("question {}", q.question_id)));
        }
        match (&q.parent_question, q.origin) {
            (Some(parent), QuestionOrigin::Followup) => {
                if !self.questions.contains_key(parent) {
                    return Err(StateError::Dangling(format!("parent question {parent}")));
                }
            }
            (None, QuestionOrigin::Followup) => {
                return Err(StateError::Invalid("follow-up question without parent".into()));
            }
            (Some(_), _) => return Err(StateError::Invalid("only follow-up questions have a parent".into())),
            (None, _) => {}
        }
        self.check_targets(&q.schema_targets)
    }

    fn check_query_version(&self, v: &QueryVersion) -> Result<(), StateError> {
        self.require_question(&v.question_id)?;
        let latest = self.queries.get(&v.question_id).map_or(0, |q| q.len() as u32);
        if v.version_no != latest + 1 {
            return Err(StateError::Invalid(format!(
                "query version {} for {} does not follow {latest}",
                v.version_no, v.question_id
            )));
        }
        if let Some(ms) = v.exec_ms {
            if !(ms >= 0.0 && ms.is_finite()) {
                return Err(StateError::Invalid(format!("execution time {ms} is not a non-negative duration")));
            }
        }
        for t in &v.analysis.referenced_tables {
            if !self.tables.contains_key(t) {
                return Err(StateError::Dangling(format!("table {t} referenced by {}", v.question_id)));
            }
        }
        for c in &v.analysis.referenced_columns {
            let known = self.tables.get(&c.table).is_some_and(|t| t.column(&c.column).is_some());
            if !known {
                return Err(StateError::Dangling(format!("column {}.{}", c.table, c.column)));
            }
        }
        Ok(())
    }

    fn require_question(&self, id: &QuestionId) -> Result<&Question, StateError> {
        self.questions.get(id).map(|q| q.as_ref()).ok_or_else(|| StateError::UnknownQuestion(id.clone()))
    }

    pub fn tables(&self) -> impl Iterator<Item = &TableMeta> {
        self.tables.values().map(|t| t.as_ref())
    }

    pub fn table(&self, id: &TableId) -> Option<&TableMeta> {
        self.tables.get(id).map(|t| t.as_ref())
    }

    pub fn table_count(&self) -> usize {
        self.tables.len()
    }

    pub fn questions(&self) -> impl Iterator<Item = &Question> {
        self.questions.values().map(|q| q.as_ref())
    }

    pub fn question(&self, id: &QuestionId) -> Option<&Question> {
        self.questions.get(id).map(|q| q.as_ref())
    }

    pub fn question_count(&self) -> usize {
        self.questions.len()
    }

    /// Identifier for the `offset`-th question added after this state.
    pub fn next_question_id(&self, offset: usize) -> QuestionId {
        QuestionId::from_seq(self.questions.len() + 1 + offset)
    }

    pub fn latest_query(&self, id: &QuestionId) -> Result<Option<&QueryVersion>, StateError> {
        self.require_question(id)?;
        Ok(self.queries.get(id).and_then(|v| v.last()))
    }

    pub fn query_versions(&self, id: &QuestionId) -> &[QueryVersion] {
        self.queries.get(id).map_or(&[], |v| v.as_slice())
    }

    /// Latest query version of every question that has SQL, by question id.
    pub fn latest_queries(&self) -> impl Iterator<Item = &QueryVersion> {
        self.queries.values().filter_map(|v| v.last())
    }

    pub fn answers(&self, id: &QuestionId) -> &[AnswerVersion] {
        self.answers.get(id).map_or(&[], |v| v.as_slice())
    }

    pub fn views(&self) -> impl Iterator<Item = &ViewDef> {
        self.views.values().map(|v| v.as_ref())
    }

    pub fn view_by_pattern(&self, pattern: &str) -> Option<&ViewDef> {
        self.views().find(|v| v.covers_pattern == pattern)
    }

    pub fn topics(&self) -> &BTreeMap<QuestionId, String> {
        &self.topics
    }

    pub fn contract(&self) -> Option<&Contract> {
        self.contract.as_deref()
    }

    pub fn events(&self) -> impl ExactSizeIterator<Item = &StateEvent> {
        self.log.iter().map(|e| e.as_ref())
    }

    pub fn event_count(&self) -> usize {
        self.log.len()
    }

    pub fn questions_with_sql(&self) -> usize {
        self.queries.values().filter(|v| !v.is_empty()).count()
    }

    pub fn questions_without_sql(&self) -> impl Iterator<Item = &Question> {
        self.questions().filter(|q| self.queries.get(&q.question_id).is_none_or(|v| v.is_empty()))
    }

    /// Tables referenced by at least one latest query version.
    pub fn covered_tables(&self) -> BTreeSet<&TableId> {
        self.latest_queries().flat_map(|q| q.analysis.referenced_tables.iter()).collect()
    }

    pub fn uncovered_tables(&self) -> Vec<&TableMeta> {
        let covered = self.covered_tables();
        self.tables().filter(|t| !covered.contains(&t.table_id)).collect()
    }

    /// Resolution catalog over the current tables and views.
    pub fn catalog(&self) -> Result<Catalog, SqlError> {
        Catalog::new(self.tables(), self.views())
    }

    /// Rebuilds a state by applying `events` to an empty state in order.
    pub fn replay<'a>(events: impl IntoIterator<Item = &'a StateEvent>) -> Result<DataProductState, StateError> {
        events.into_iter().try_fold(DataProductState::new(), |state, e| state.apply_event(e.clone()))
    }

    /// Self-describing export: the materialized state plus the event log
    /// that produces it, with keys in canonical (sorted) order.
    pub fn export_document(&self) -> String {
        let doc = StateDocument {
            format: DOCUMENT_FORMAT.to_string(),
            schema_version: DOCUMENT_SCHEMA_VERSION,
            state: self.clone(),
        };
        let value = serde_json::to_value(&doc).expect("state serializes");
        serde_json::to_string_pretty(&value).expect("value serializes")
    }

    /// Parses an exported document, replays its event log and checks that
    /// the replay matches the materialized state it carries.
    pub fn import_document(text: &str) -> Result<DataProductState, StateError> {
        let doc: StateDocument = serde_json::from_str(text).map_err(|e| StateError::Document(e.to_string()))?;
        if doc.format != DOCUMENT_FORMAT {
            return Err(StateError::Document(format!("unexpected format {:?}", doc.format)));
        }
        if doc.schema_version != DOCUMENT_SCHEMA_VERSION {
            return Err(StateError::Document(format!("unsupported schema version {}", doc.schema_version)));
        }
        let replayed = DataProductState::replay(doc.state.events())?;
        if replayed != doc.state {
            return Err(StateError::Document("materialized state disagrees with its event log".into()));
        }
        Ok(replayed)
    }
}

const DOCUMENT_FORMAT: &str = "dataprod-state";
const DOCUMENT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StateDocument {
    format: String,
    schema_version: u32,
    state: DataProductState,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sql::analyze;

    fn col(name: &str, kind: DataKind) -> ColumnMeta {
        ColumnMeta { name: name.into(), data_kind: kind, nullable: true }
    }

    fn t1() -> TableMeta {
        TableMeta {
            table_id: TableId::from_name("t1"),
            name: "t1".into(),
            columns: vec![col("a", DataKind::Numeric), col("b", DataKind::Text), col("c", DataKind::Temporal)],
            row_count_estimate: 10,
            foreign_keys: vec![],
        }
    }

    fn question(id: &str) -> Question {
        Question {
            question_id: id.into(),
            text: format!("question {id}"),
            origin: QuestionOrigin::Predefined,
            parent_question: None,
            schema_targets: BTreeSet::from([SchemaTarget::column(TableId::from_name("t1"), "a")]),
        }
    }

    fn version(state: &DataProductState, q: &str, n: u32) -> QueryVersion {
        let sql = "SELECT a FROM t1";
        QueryVersion {
            question_id: q.into(),
            version_no: n,
            sql_text: sql.into(),
            created_by: "test".into(),
            analysis: analyze(sql, &state.catalog().unwrap()).unwrap(),
            exec_ms: Some(1.0),
            timed_out: false,
        }
    }

    fn apply(state: &DataProductState, payload: EventPayload) -> Result<DataProductState, StateError> {
        state.apply_event(StateEvent::new(payload))
    }

    #[test]
    fn first_table_on_empty_state() {
        let s = apply(&DataProductState::new(), EventPayload::TableAdded(t1())).unwrap();
        assert_eq!(s.table_count(), 1);
        assert_eq!(s.event_count(), 1);
        assert_eq!(s.version(), 1);
        assert_eq!(s.events().next().unwrap().event_id, 1);
    }

    #[test]
    fn query_versions_are_gap_free() {
        let s = apply(&DataProductState::new(), EventPayload::TableAdded(t1())).unwrap();
        let s = apply(&s, EventPayload::QuestionAdded(question("q1"))).unwrap();
        assert_eq!(s.latest_query(&"q1".into()).unwrap(), None);
        let v1 = version(&s, "q1", 1);
        let s = apply(&s, EventPayload::QueryVersionAdded(v1)).unwrap();
        assert_eq!(s.latest_query(&"q1".into()).unwrap().unwrap().version_no, 1);

        let gap = version(&s, "q1", 3);
        assert!(matches!(apply(&s, EventPayload::QueryVersionAdded(gap)), Err(StateError::Invalid(_))));
        let s = apply(&s, EventPayload::QueryVersionAdded(version(&s, "q1", 2))).unwrap();
        let s = apply(&s, EventPayload::QueryVersionAdded(version(&s, "q1", 3))).unwrap();
        assert_eq!(s.latest_query(&"q1".into()).unwrap().unwrap().version_no, 3);
    }

    #[test]
    fn references_must_exist() {
        let s = apply(&DataProductState::new(), EventPayload::TableAdded(t1())).unwrap();
        let orphan = version(&s, "q99", 1);
        assert!(matches!(apply(&s, EventPayload::QueryVersionAdded(orphan)), Err(StateError::UnknownQuestion(_))));
        assert!(matches!(s.latest_query(&"q99".into()), Err(StateError::UnknownQuestion(_))));

        let mut bad_target = question("q1");
        bad_target.schema_targets.insert(SchemaTarget::column(TableId::from_name("t1"), "zzz"));
        assert!(matches!(apply(&s, EventPayload::QuestionAdded(bad_target)), Err(StateError::Dangling(_))));

        let mut fk = t1();
        fk.table_id = TableId::from_name("t2");
        fk.name = "t2".into();
        fk.foreign_keys.push(ForeignKey { column: "a".into(), references_table: TableId::from_name("nope"), references_column: "a".into() });
        assert!(matches!(apply(&s, EventPayload::TableAdded(fk)), Err(StateError::Dangling(_))));
    }

    #[test]
    fn duplicates_are_rejected() {
        let s = apply(&DataProductState::new(), EventPayload::TableAdded(t1())).unwrap();
        assert!(matches!(apply(&s, EventPayload::TableAdded(t1())), Err(StateError::Duplicate(_))));
        let s = apply(&s, EventPayload::QuestionAdded(question("q1"))).unwrap();
        assert!(matches!(apply(&s, EventPayload::QuestionAdded(question("q1"))), Err(StateError::Duplicate(_))));
        let topic = TopicAssignment { question_id: "q1".into(), topic_label: "t1 · lookup".into() };
        let s = apply(&s, EventPayload::TopicAssigned(topic.clone())).unwrap();
        assert!(matches!(apply(&s, EventPayload::TopicAssigned(topic)), Err(StateError::Duplicate(_))));

        let mut cols = t1();
        cols.table_id = TableId::from_name("t9");
        cols.columns.push(col("A", DataKind::Text));
        assert!(matches!(apply(&s, EventPayload::TableAdded(cols)), Err(StateError::Duplicate(_))));
    }

    #[test]
    fn followup_parent_rules() {
        let s = apply(&DataProductState::new(), EventPayload::TableAdded(t1())).unwrap();
        let mut orphan = question("q1");
        orphan.origin = QuestionOrigin::Followup;
        assert!(matches!(apply(&s, EventPayload::QuestionAdded(orphan)), Err(StateError::Invalid(_))));
        let mut stray = question("q1");
        stray.parent_question = Some("q0".into());
        assert!(matches!(apply(&s, EventPayload::QuestionAdded(stray)), Err(StateError::Invalid(_))));
    }

    #[test]
    fn snapshots_are_isolated_from_later_events() {
        let s1 = apply(&DataProductState::new(), EventPayload::TableAdded(t1())).unwrap();
        let before = s1.clone();
        let s2 = apply(&s1, EventPayload::QuestionAdded(question("q1"))).unwrap();
        assert_eq!(s1, before);
        assert_eq!(s1.event_count(), 1);
        assert_eq!(s2.event_count(), 2);
        assert_eq!(DataProductState::new().table_count(), 0);
        assert_eq!(DataProductState::new().question_count(), 0);
    }

    #[test]
    fn event_ids_must_follow_the_log() {
        let mut ev = StateEvent::new(EventPayload::TableAdded(t1()));
        ev.event_id = 5;
        assert!(matches!(DataProductState::new().apply_event(ev), Err(StateError::OutOfSequence { .. })));
    }

    #[test]
    fn document_roundtrip_replays_the_log() {
        let s = apply(&DataProductState::new(), EventPayload::TableAdded(t1())).unwrap();
        let s = apply(&s, EventPayload::QuestionAdded(question("q1"))).unwrap();
        let s = apply(&s, EventPayload::QueryVersionAdded(version(&s, "q1", 1))).unwrap();
        let doc = s.export_document();
        assert!(doc.contains("\"schema_version\": 1"));
        assert_eq!(DataProductState::import_document(&doc).unwrap(), s);
        assert_eq!(DataProductState::replay(s.events()).unwrap(), s);

        let mut value: serde_json::Value = serde_json::from_str(&doc).unwrap();
        value["state"]["questions"]["q1"]["text"] = "edited".into();
        let tampered = value.to_string();
        assert!(matches!(DataProductState::import_document(&tampered), Err(StateError::Document(_))));
    }
}
