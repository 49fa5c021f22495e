//! Deterministic implementations of the five specialized tools.
//!
//! Every tool is a pure function of the snapshot, the invocation and the
//! database contents. [`Tool`] is the seam where other backends plug in:
//! any implementation honoring the same invocation/result contract can
//! replace a baseline tool.

mod followup;
mod question_gen;
mod text_to_sql;
mod topics;
mod views;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::db::{Connector, DbError, Row};
use crate::registry::Parameters;
use crate::sql::{analyze, Catalog, SqlError};
use crate::state::{
    AnswerVersion, ContextScope, DataProductState, EventPayload, QueryVersion, Question, QuestionId, StateEvent,
    TopicAssignment, ViewDef,
};

pub use followup::FollowupGeneration;
pub use question_gen::QuestionGeneration;
pub use text_to_sql::{synthesize_sql, TextToSql};
pub use topics::{topic_label, TopicMapping};
pub use views::{view_name, ViewCreation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInvocation {
    pub tool: String,
    pub parameters: Parameters,
    pub target_scope: ContextScope,
    pub seed: u64,
    pub iteration: u32,
}

impl ToolInvocation {
    pub fn new(tool: &str, parameters: Parameters, seed: u64, iteration: u32) -> Self {
        Self { tool: tool.into(), parameters, target_scope: ContextScope::database(), seed, iteration }
    }

    /// Integer parameter `name`, which must be at least `min`.
    pub fn count(&self, name: &str, min: i64) -> Result<usize, ToolError> {
        let v = self
            .parameters
            .get(name)
            .and_then(|v| v.as_int())
            .ok_or_else(|| ToolError::Parameter(format!("missing integer parameter `{name}`")))?;
        if v < min {
            return Err(ToolError::Parameter(format!("`{name}` = {v} is below {min}")));
        }
        Ok(v as usize)
    }
}

/// A generated artifact; each one corresponds to exactly one state event.
#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Question(Question),
    QueryVersion(QueryVersion),
    Answer { answer: AnswerVersion, rows: Vec<Row> },
    View(ViewDef),
    Topic(TopicAssignment),
}

impl Artifact {
    pub fn event(&self) -> StateEvent {
        StateEvent::new(match self {
            Artifact::Question(q) => EventPayload::QuestionAdded(q.clone()),
            Artifact::QueryVersion(v) => EventPayload::QueryVersionAdded(v.clone()),
            Artifact::Answer { answer, .. } => EventPayload::AnswerRecorded(answer.clone()),
            Artifact::View(v) => EventPayload::ViewAdded(v.clone()),
            Artifact::Topic(t) => EventPayload::TopicAssigned(t.clone()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolResult {
    pub artifacts: Vec<Artifact>,
    pub events: Vec<StateEvent>,
    pub log: String,
}

impl ToolResult {
    pub fn new(artifacts: Vec<Artifact>, log: impl Into<String>) -> Self {
        let events = artifacts.iter().map(Artifact::event).collect();
        Self { artifacts, events, log: log.into() }
    }

    pub fn is_empty(&self) -> bool {
        self.artifacts.is_empty()
    }

    /// Events match artifacts one to one, and an empty result explains
    /// itself.
    pub fn is_consistent(&self) -> bool {
        self.events.len() == self.artifacts.len()
            && self.artifacts.iter().zip(&self.events).all(|(a, e)| a.event().payload == e.payload)
            && (!self.artifacts.is_empty() || !self.log.trim().is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ToolError {
    #[error("invalid parameters: {0}")]
    Parameter(String),
    #[error("no question lacks SQL")]
    NoEligibleQuestion,
    #[error("no question with SQL to follow up on")]
    NoParentAvailable,
    #[error("no join pattern is shared by two or more queries")]
    NoSharedPattern,
    #[error("the schema has no tables")]
    EmptySchema,
    #[error("no implementation registered for tool `{0}`")]
    Unknown(String),
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error(transparent)]
    Database(#[from] DbError),
    #[error("{0}")]
    Failed(String),
}

impl ToolError {
    /// Errors after which the data source can no longer be trusted.
    pub fn is_connection_loss(&self) -> bool {
        matches!(self, ToolError::Database(DbError::Connection { .. }))
    }
}

pub struct ToolContext<'a> {
    pub snapshot: &'a DataProductState,
    pub db: &'a Connector,
}

pub trait Tool: Send {
    fn name(&self) -> &str;
    fn run(&self, ctx: &ToolContext<'_>, inv: &ToolInvocation) -> Result<ToolResult, ToolError>;
}

/// Tool implementations by name.
#[derive(Default)]
pub struct ToolSet {
    tools: BTreeMap<String, Box<dyn Tool>>,
}

impl fmt::Debug for ToolSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.tools.keys()).finish()
    }
}

impl ToolSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn baseline() -> Self {
        let mut set = Self::new();
        set.insert(Box::new(QuestionGeneration));
        set.insert(Box::new(TextToSql));
        set.insert(Box::new(FollowupGeneration));
        set.insert(Box::new(ViewCreation));
        set.insert(Box::new(TopicMapping));
        set
    }

    /// Adds or replaces the implementation for the tool's name.
    pub fn insert(&mut self, tool: Box<dyn Tool>) {
        self.tools.insert(tool.name().to_string(), tool);
    }

    pub fn get(&self, name: &str) -> Option<&dyn Tool> {
        self.tools.get(name).map(|t| t.as_ref())
    }

    pub fn run(&self, ctx: &ToolContext<'_>, inv: &ToolInvocation) -> Result<ToolResult, ToolError> {
        self.get(&inv.tool).ok_or_else(|| ToolError::Unknown(inv.tool.clone()))?.run(ctx, inv)
    }
}

/// Tracks the next version numbers per question while a tool emits
/// several versions in one result.
#[derive(Default)]
pub(crate) struct Versions {
    queries: BTreeMap<QuestionId, u32>,
    answers: BTreeMap<QuestionId, u32>,
}

impl Versions {
    fn next_query(&mut self, state: &DataProductState, q: &QuestionId) -> u32 {
        let n = self.queries.entry(q.clone()).or_insert_with(|| state.query_versions(q).len() as u32);
        *n += 1;
        *n
    }

    fn next_answer(&mut self, state: &DataProductState, q: &QuestionId) -> u32 {
        let n = self.answers.entry(q.clone()).or_insert_with(|| state.answers(q).len() as u32);
        *n += 1;
        *n
    }
}

/// Analyzes and executes `sql` for question `q`, returning the query
/// version artifact and, when the statement completed, its answer. A SQL
/// error is returned as `Ok(Err(message))` so callers can skip the
/// question.
pub(crate) fn execute_version(
    ctx: &ToolContext<'_>,
    catalog: &Catalog,
    versions: &mut Versions,
    q: &QuestionId,
    sql: &str,
    created_by: &str,
) -> Result<Result<Vec<Artifact>, String>, ToolError> {
    let analysis = match analyze(sql, catalog) {
        Ok(a) => a,
        Err(e) => return Ok(Err(format!("{q}: {e}"))),
    };
    let outcome = ctx.db.execute_timed(sql)?;
    if let Some(err) = outcome.error {
        return Ok(Err(format!("{q}: {err}")));
    }
    let version = QueryVersion {
        question_id: q.clone(),
        version_no: versions.next_query(ctx.snapshot, q),
        sql_text: sql.to_string(),
        created_by: created_by.into(),
        analysis,
        exec_ms: Some(outcome.elapsed_ms),
        timed_out: outcome.timed_out,
    };
    let mut out = vec![Artifact::QueryVersion(version)];
    if let Some(digest) = outcome.digest {
        let answer = AnswerVersion {
            question_id: q.clone(),
            version_no: versions.next_answer(ctx.snapshot, q),
            payload_digest: digest,
            confidence: 1.0,
        };
        out.push(Artifact::Answer { answer, rows: outcome.rows });
    }
    Ok(Ok(out))
}
