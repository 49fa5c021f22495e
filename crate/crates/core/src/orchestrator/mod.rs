//! The plan, parameterize, execute, update and measure loop.
//!
//! [`Orchestrator`] is the single writer of a data product: it owns the
//! state, the metric store, the connector and the version store. Readers
//! use [`Published`] snapshots, and run control plus approvals go through
//! the shared [`RunControl`].

mod control;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{execute_version, Artifact, Tool, ToolContext, ToolInvocation, ToolSet, Versions};
use crate::clock::{Clock, SystemClock};
use crate::db::{fk_order, ConnectionProfile, Connector, DbError};
use crate::fixture::PredefinedQuestion;
use crate::metrics::{Contract, GapVector, MetricInfo, MetricRegistry, MetricStore, MetricValue, MetricsError};
use crate::planner::{expected_improvement, plan, ActionProposal, PlanInput, PlannerConfig, PlannerVerdict};
use crate::registry::{tools, PreconditionStatus, RegistryError, ToolDescriptor, ToolRegistry};
use crate::sql::SqlError;
use crate::state::{
    ContextScope, DataProductState, EventPayload, Question, QuestionId, QuestionOrigin, ScopeLevel, SchemaTarget,
    StateError, StateEvent, TableId,
};
use crate::version::{CommitInfo, VersionError, VersionStore};

pub use control::{
    ApprovalDesk, ApprovalError, Decision, PendingApproval, Phase, Resolution, RunControl, TransitionError,
};

const JOURNAL_PREFIX: &str = "journal/iteration-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalMode {
    #[default]
    Auto,
    Gated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub contract: Contract,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u32,
    #[serde(default)]
    pub approval_mode: ApprovalMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_iterations() -> u32 {
    25
}

impl RunConfig {
    pub fn new(contract: Contract) -> Self {
        Self { contract, max_iterations: default_max_iterations(), approval_mode: ApprovalMode::Auto, seed: 0 }
    }

    pub fn with_max_iterations(mut self, n: u32) -> Self {
        self.max_iterations = n;
        self
    }

    pub fn gated(mut self) -> Self {
        self.approval_mode = ApprovalMode::Gated;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approval {
    Auto,
    ApprovedByHuman,
    RejectedByHuman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationStatus {
    Completed,
    Failed,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub proposal: ActionProposal,
    pub approval: Approval,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor: Option<String>,
    pub status: IterationStatus,
    pub summary: String,
    /// Ids of the state events this iteration applied, in order.
    pub event_ids: Vec<u64>,
    pub state_version: u64,
    /// Database-scope values after the iteration.
    pub metrics_after: Vec<MetricValue>,
    pub total_gap_before: f64,
    pub total_gap_after: f64,
    /// Commits holding the iteration's artifacts.
    pub commit_ids: Vec<String>,
    /// The commit that stored this record; absent in the stored copy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub journal_commit: Option<String>,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Converged,
    ManualReviewRecommended { reason: String },
    BudgetExhausted,
    Stopped,
    Error { message: String },
}

impl Verdict {
    pub fn name(&self) -> &'static str {
        match self {
            Verdict::Converged => "converged",
            Verdict::ManualReviewRecommended { .. } => "manual_review_recommended",
            Verdict::BudgetExhausted => "budget_exhausted",
            Verdict::Stopped => "stopped",
            Verdict::Error { .. } => "error",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::ManualReviewRecommended { reason } => write!(f, "manual review recommended: {reason}"),
            Verdict::Error { message } => write!(f, "error: {message}"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub verdict: Verdict,
    pub iterations: Vec<IterationRecord>,
    pub failures: usize,
    /// Database-scope values recorded during the run, in order.
    pub metric_history: Vec<MetricValue>,
    pub final_metrics: Vec<MetricValue>,
    pub final_gap: GapVector,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub record: Option<IterationRecord>,
    /// Set when the planner stopped instead of proposing.
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LoopEvent {
    MetricUpdated { iteration: u32, values: Vec<MetricValue> },
    ProposalPending { proposal: ActionProposal },
    IterationCompleted { record: IterationRecord },
    RunTerminated { verdict: Verdict, iterations: usize, failures: usize },
    CommitCreated { commit: CommitInfo },
}

impl LoopEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            LoopEvent::MetricUpdated { .. } => "MetricUpdated",
            LoopEvent::ProposalPending { .. } => "ProposalPending",
            LoopEvent::IterationCompleted { .. } => "IterationCompleted",
            LoopEvent::RunTerminated { .. } => "RunTerminated",
            LoopEvent::CommitCreated { .. } => "CommitCreated",
        }
    }
}

pub trait Observer: Send + Sync {
    fn notify(&self, event: &LoopEvent);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolStatus {
    pub descriptor: ToolDescriptor,
    pub applicable: bool,
    pub preconditions: Vec<PreconditionStatus>,
    /// Score against the current contract, when one is set.
    pub expected_improvement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSourceSummary {
    pub source_kind: String,
    pub location: String,
    pub tables: Vec<String>,
    pub columns: usize,
    pub foreign_keys: usize,
    pub predefined_questions: usize,
    pub predefined_with_sql: usize,
    pub warnings: Vec<String>,
}

/// Everything readers see, taken from one state version.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub state: DataProductState,
    pub datasource: DataSourceSummary,
    pub metric_info: Vec<MetricInfo>,
    pub metrics: Vec<MetricValue>,
    pub metric_history: Vec<MetricValue>,
    pub gap: Option<GapVector>,
    pub journal: Vec<IterationRecord>,
    pub commits: Vec<CommitInfo>,
    pub tools: Vec<ToolStatus>,
    pub last_report: Option<RunReport>,
}

/// Shared handle to the latest [`Snapshot`]; cheap to clone and never
/// blocked by a running loop.
#[derive(Clone)]
pub struct Published(Arc<RwLock<Arc<Snapshot>>>);

impl Published {
    pub fn read(&self) -> Arc<Snapshot> {
        self.0.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn replace(&self, snapshot: Snapshot) {
        *self.0.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(snapshot);
    }
}

impl fmt::Debug for Published {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Published").field(&self.read().state.version()).finish()
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Db(#[from] DbError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Version(#[from] VersionError),
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error("invalid predefined question: {0}")]
    InvalidQuestion(String),
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("no contract is set")]
    NoContract,
    #[error("data source connection lost: {0}")]
    ConnectionLost(String),
}

impl OrchestratorError {
    pub fn code(&self) -> &'static str {
        match self {
            OrchestratorError::Db(e) => e.code(),
            OrchestratorError::Metrics(MetricsError::UnknownMetric(_)) => "unknown_metric",
            OrchestratorError::Metrics(_) => "invalid_contract",
            OrchestratorError::Registry(_) => "registry_error",
            OrchestratorError::State(_) => "state_error",
            OrchestratorError::Version(_) => "version_error",
            OrchestratorError::Sql(_) => "sql_error",
            OrchestratorError::Transition(_) => "invalid_transition",
            OrchestratorError::InvalidQuestion(_) => "invalid_question",
            OrchestratorError::InvalidConfig(_) => "invalid_config",
            OrchestratorError::NoContract => "no_contract",
            OrchestratorError::ConnectionLost(_) => "connection_error",
        }
    }
}

/// Deterministic per-iteration seed.
pub fn iteration_seed(seed: u64, iteration: u32) -> u64 {
    seed.wrapping_add((iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub struct OrchestratorBuilder {
    profile: ConnectionProfile,
    questions: Vec<PredefinedQuestion>,
    metrics: Option<MetricRegistry>,
    tool_registry: Option<ToolRegistry>,
    tool_set: ToolSet,
    clock: Arc<dyn Clock>,
    store_path: Option<PathBuf>,
    planner: PlannerConfig,
    observers: Vec<Arc<dyn Observer>>,
}

impl OrchestratorBuilder {
    pub fn new(profile: ConnectionProfile) -> Self {
        Self {
            profile,
            questions: Vec::new(),
            metrics: None,
            tool_registry: None,
            tool_set: ToolSet::baseline(),
            clock: Arc::new(SystemClock),
            store_path: None,
            planner: PlannerConfig::default(),
            observers: Vec::new(),
        }
    }

    /// Registers an observer before connecting, so it also sees the
    /// commit of the initial artifacts.
    pub fn observer(mut self, observer: Arc<dyn Observer>) -> Self {
        self.observers.push(observer);
        self
    }

    pub fn questions(mut self, questions: Vec<PredefinedQuestion>) -> Self {
        self.questions = questions;
        self
    }

    pub fn metrics(mut self, registry: MetricRegistry) -> Self {
        self.metrics = Some(registry);
        self
    }

    pub fn tool_registry(mut self, registry: ToolRegistry) -> Self {
        self.tool_registry = Some(registry);
        self
    }

    /// Replaces (or adds) the implementation for the tool's name.
    pub fn tool(mut self, tool: Box<dyn Tool>) -> Self {
        self.tool_set.insert(tool);
        self
    }

    pub fn clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    /// Persists commits to a log file; an existing log must verify and
    /// its journal is loaded.
    pub fn version_log(mut self, path: impl Into<PathBuf>) -> Self {
        self.store_path = Some(path.into());
        self
    }

    pub fn planner(mut self, config: PlannerConfig) -> Self {
        self.planner = config;
        self
    }

    pub fn connect(self) -> Result<Orchestrator, OrchestratorError> {
        let metrics = self.metrics.unwrap_or_else(MetricRegistry::with_builtins);
        let tool_registry = match self.tool_registry {
            Some(r) => r,
            None => ToolRegistry::with_defaults(&metrics)?,
        };
        let versions = match &self.store_path {
            Some(p) => VersionStore::open(p, self.clock.clone())?,
            None => VersionStore::in_memory(self.clock.clone()),
        };
        let db = Connector::open(&self.profile)?;
        let tables = db.introspect()?;
        let mut state = DataProductState::new();
        for t in fk_order(tables) {
            state = state.apply_event(StateEvent::new(EventPayload::TableAdded(t)))?;
        }
        let datasource = DataSourceSummary {
            source_kind: self.profile.source_kind.clone(),
            location: self.profile.location.clone(),
            tables: state.tables().map(|t| t.name.clone()).collect(),
            columns: state.tables().map(|t| t.columns.len()).sum(),
            foreign_keys: state.tables().map(|t| t.foreign_keys.len()).sum(),
            predefined_questions: self.questions.len(),
            predefined_with_sql: self.questions.iter().filter(|q| q.sql.is_some()).count(),
            warnings: Vec::new(),
        };
        let journal = load_journal(&versions);
        let next_iteration = journal.iter().map(|r| r.iteration).max().unwrap_or(0) + 1;
        let mut orch = Orchestrator {
            state,
            metrics,
            store: MetricStore::new(),
            tools: tool_registry,
            impls: self.tool_set,
            db,
            versions,
            clock: self.clock,
            planner: self.planner,
            journal,
            gap_history: Vec::new(),
            suppressed: BTreeMap::new(),
            next_iteration,
            observers: self.observers,
            control: Arc::new(RunControl::new()),
            published: Published(Arc::new(RwLock::new(Arc::new(Snapshot {
                state: DataProductState::new(),
                datasource: datasource.clone(),
                metric_info: Vec::new(),
                metrics: Vec::new(),
                metric_history: Vec::new(),
                gap: None,
                journal: Vec::new(),
                commits: Vec::new(),
                tools: Vec::new(),
                last_report: None,
            })))),
            datasource,
            last_report: None,
        };
        orch.ingest(&self.questions)?;
        orch.store.recalculate_all(&orch.metrics, &orch.state, 0, orch.clock.as_ref())?;
        orch.publish();
        Ok(orch)
    }
}

fn load_journal(store: &VersionStore) -> Vec<IterationRecord> {
    let mut out: Vec<IterationRecord> = store
        .head_tree()
        .into_iter()
        .filter(|(name, _)| name.starts_with(JOURNAL_PREFIX))
        .filter_map(|(_, content)| serde_json::from_str(content).ok())
        .collect();
    out.sort_by_key(|r| r.iteration);
    out
}

fn parse_target(state: &DataProductState, spec: &str) -> Result<SchemaTarget, OrchestratorError> {
    let (table, column) = match spec.split_once('.') {
        Some((t, c)) => (t, Some(c)),
        None => (spec, None),
    };
    let id = TableId::from_name(table.trim());
    let meta = state.table(&id).ok_or_else(|| OrchestratorError::InvalidQuestion(format!("unknown table in `{spec}`")))?;
    match column {
        None => Ok(SchemaTarget::table(id)),
        Some(c) if meta.column(c.trim()).is_some() => Ok(SchemaTarget::column(id, c.trim())),
        Some(_) => Err(OrchestratorError::InvalidQuestion(format!("unknown column in `{spec}`"))),
    }
}

/// Version-store payloads for the artifacts of one result.
fn artifact_payloads(state_after: &DataProductState, artifacts: &[Artifact]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut topics = false;
    for a in artifacts {
        match a {
            Artifact::Question(q) => out.push((format!("questions/{}.txt", q.question_id), format!("{}\n", q.text))),
            Artifact::QueryVersion(v) => {
                out.push((format!("sql/{}/v{}.sql", v.question_id, v.version_no), format!("{}\n", v.sql_text)))
            }
            Artifact::Answer { answer, rows } => {
                let doc = serde_json::json!({
                    "question_id": answer.question_id,
                    "version_no": answer.version_no,
                    "payload_digest": answer.payload_digest,
                    "confidence": answer.confidence,
                    "row_count": rows.len(),
                    "rows_preview": rows.iter().take(20).collect::<Vec<_>>(),
                });
                out.push((
                    format!("answers/{}/v{}.json", answer.question_id, answer.version_no),
                    serde_json::to_string_pretty(&doc).expect("json") + "\n",
                ));
            }
            Artifact::View(v) => out.push((
                format!("views/{}.sql", v.name),
                format!("-- covers {}\nCREATE VIEW {} AS {};\n", v.covers_pattern, v.name, v.sql_text),
            )),
            Artifact::Topic(_) => topics = true,
        }
    }
    if topics {
        let mut text = String::new();
        for (q, label) in state_after.topics() {
            text.push_str(&format!("{q}\t{label}\n"));
        }
        out.push(("topics/assignments.txt".into(), text));
    }
    out
}

pub struct Orchestrator {
    state: DataProductState,
    metrics: MetricRegistry,
    store: MetricStore,
    tools: ToolRegistry,
    impls: ToolSet,
    db: Connector,
    versions: VersionStore,
    clock: Arc<dyn Clock>,
    planner: PlannerConfig,
    journal: Vec<IterationRecord>,
    gap_history: Vec<f64>,
    /// Rejected (tool, scope) pairs and the last iteration they stay
    /// suppressed for.
    suppressed: BTreeMap<(String, ContextScope), u32>,
    next_iteration: u32,
    observers: Vec<Arc<dyn Observer>>,
    control: Arc<RunControl>,
    published: Published,
    datasource: DataSourceSummary,
    last_report: Option<RunReport>,
}

impl fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Orchestrator")
            .field("state_version", &self.state.version())
            .field("next_iteration", &self.next_iteration)
            .field("commits", &self.versions.len())
            .finish()
    }
}

/// What one planning round produced.
enum Round {
    Record(Box<IterationRecord>),
    Stop(Verdict),
}

impl Orchestrator {
    pub fn builder(profile: ConnectionProfile) -> OrchestratorBuilder {
        OrchestratorBuilder::new(profile)
    }

    pub fn state(&self) -> &DataProductState {
        &self.state
    }

    pub fn metric_registry(&self) -> &MetricRegistry {
        &self.metrics
    }

    pub fn metric_store(&self) -> &MetricStore {
        &self.store
    }

    pub fn tool_registry(&self) -> &ToolRegistry {
        &self.tools
    }

    pub fn connector(&self) -> &Connector {
        &self.db
    }

    pub fn version_store(&self) -> &VersionStore {
        &self.versions
    }

    pub fn journal(&self) -> &[IterationRecord] {
        &self.journal
    }

    pub fn datasource(&self) -> &DataSourceSummary {
        &self.datasource
    }

    pub fn control(&self) -> Arc<RunControl> {
        self.control.clone()
    }

    pub fn published(&self) -> Published {
        self.published.clone()
    }

    pub fn planner_config(&self) -> &PlannerConfig {
        &self.planner
    }

    pub fn add_observer(&mut self, observer: Arc<dyn Observer>) {
        self.observers.push(observer);
    }

    fn emit(&self, event: LoopEvent) {
        for o in &self.observers {
            o.notify(&event);
        }
    }

    fn publish(&self) {
        let gap = self.state.contract().and_then(|c| self.store.gap(c).ok());
        let tools = self
            .tools
            .iter()
            .map(|d| ToolStatus {
                descriptor: d.clone(),
                applicable: d.is_applicable(&self.state),
                preconditions: d.precondition_report(&self.state),
                expected_improvement: gap.as_ref().map(|g| expected_improvement(d, g)),
            })
            .collect();
        self.published.replace(Snapshot {
            state: self.state.clone(),
            datasource: self.datasource.clone(),
            metric_info: self.metrics.iter().map(MetricInfo::from).collect(),
            metrics: self.store.latest_values().cloned().collect(),
            metric_history: self.store.history().to_vec(),
            gap,
            journal: self.journal.clone(),
            commits: self.versions.commits().iter().map(CommitInfo::from).collect(),
            tools,
            last_report: self.last_report.clone(),
        });
    }

    fn commit(&mut self, payloads: Vec<(String, String)>, author: &str, message: &str) -> Result<String, OrchestratorError> {
        let id = self.versions.commit(payloads, author, message)?;
        let info = CommitInfo::from(self.versions.head().expect("just committed"));
        self.emit(LoopEvent::CommitCreated { commit: info });
        Ok(id)
    }

    /// Adds predefined questions, executing any SQL they carry, and
    /// commits the initial artifacts.
    fn ingest(&mut self, questions: &[PredefinedQuestion]) -> Result<(), OrchestratorError> {
        let mut artifacts = Vec::new();
        for pq in questions {
            let targets = pq.targets.iter().map(|t| parse_target(&self.state, t)).collect::<Result<BTreeSet<_>, _>>()?;
            let question = Question {
                question_id: self.state.next_question_id(0),
                text: pq.text.trim().to_string(),
                origin: QuestionOrigin::Predefined,
                parent_question: None,
                schema_targets: targets,
            };
            let qid = question.question_id.clone();
            let added = Artifact::Question(question);
            self.state = self.state.apply_event(added.event())?;
            artifacts.push(added);
            let Some(sql) = &pq.sql else { continue };
            let catalog = self.state.catalog()?;
            let ctx = ToolContext { snapshot: &self.state, db: &self.db };
            let produced = match execute_version(&ctx, &catalog, &mut Versions::default(), &qid, sql.trim(), "predefined") {
                Ok(Ok(produced)) => produced,
                Ok(Err(msg)) => {
                    self.datasource.warnings.push(format!("SQL of predefined question ignored: {msg}"));
                    continue;
                }
                Err(e) if e.is_connection_loss() => return Err(OrchestratorError::ConnectionLost(e.to_string())),
                Err(e) => {
                    self.datasource.warnings.push(format!("SQL of predefined question ignored: {qid}: {e}"));
                    continue;
                }
            };
            for a in produced {
                self.state = self.state.apply_event(a.event())?;
                artifacts.push(a);
            }
        }
        let mut payloads = vec![(
            "schema/tables.json".to_string(),
            serde_json::to_string_pretty(&self.state.tables().collect::<Vec<_>>()).expect("json") + "\n",
        )];
        payloads.extend(artifact_payloads(&self.state, &artifacts));
        let message = format!(
            "connect {} ({} tables, {} predefined questions)",
            self.datasource.location,
            self.datasource.tables.len(),
            questions.len()
        );
        self.commit(payloads, "state-manager", &message)?;
        Ok(())
    }

    /// Records `contract` as a state event and returns the new gaps.
    pub fn set_contract(&mut self, contract: Contract) -> Result<GapVector, OrchestratorError> {
        contract.validate(&self.metrics)?;
        if self.state.contract() != Some(&contract) {
            self.state = self.state.apply_event(StateEvent::new(EventPayload::ContractChanged(contract.clone())))?;
            let doc = serde_json::to_string_pretty(&contract).expect("json") + "\n";
            self.commit(vec![("contract.json".into(), doc)], "operator", "set contract")?;
            self.gap_history.clear();
        }
        let gap = self.store.gap(&contract)?;
        self.publish();
        Ok(gap)
    }

    pub fn gap(&self) -> Result<GapVector, OrchestratorError> {
        let contract = self.state.contract().ok_or(OrchestratorError::NoContract)?;
        Ok(self.store.gap(contract)?)
    }

    fn prepare(&mut self, config: &RunConfig) -> Result<(), OrchestratorError> {
        if config.max_iterations == 0 {
            return Err(OrchestratorError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        self.set_contract(config.contract.clone())?;
        Ok(())
    }

    /// Executes exactly one iteration. Converged or manual-review verdicts
    /// produce no record.
    pub fn step(&mut self, config: &RunConfig) -> Result<StepOutcome, OrchestratorError> {
        let restore = self.control.begin_step()?;
        let out = self.prepare(config).and_then(|_| self.round(config, false));
        self.control.end_step(restore);
        self.publish();
        match out? {
            Round::Record(r) => Ok(StepOutcome { record: Some(*r), verdict: None }),
            Round::Stop(v) => Ok(StepOutcome { record: None, verdict: Some(v) }),
        }
    }

    /// Claims the run control and runs to termination.
    pub fn run_loop(&mut self, config: &RunConfig) -> Result<RunReport, OrchestratorError> {
        self.control.begin()?;
        self.run_claimed(config)
    }

    /// Runs to termination; the caller has already claimed the control
    /// with [`RunControl::begin`]. The control is always left terminated.
    pub fn run_claimed(&mut self, config: &RunConfig) -> Result<RunReport, OrchestratorError> {
        let started = Instant::now();
        let history_start = self.store.history().len();
        if let Err(e) = self.prepare(config) {
            self.control.finish();
            self.publish();
            return Err(e);
        }
        let mut records = Vec::new();
        let mut organized = false;
        let verdict = loop {
            if !self.control.checkpoint() {
                break Verdict::Stopped;
            }
            if records.len() as u32 >= config.max_iterations {
                break match self.gap() {
                    Ok(g) if g.total() == 0.0 => Verdict::Converged,
                    _ => Verdict::BudgetExhausted,
                };
            }
            match self.round(config, !organized) {
                Ok(Round::Record(r)) => {
                    if r.proposal.tool_name == tools::TOPIC_MAPPING && r.status == IterationStatus::Completed {
                        organized = true;
                    }
                    records.push(*r);
                }
                Ok(Round::Stop(v)) => break v,
                Err(e) => break Verdict::Error { message: e.to_string() },
            }
        };
        let final_gap = self.gap().unwrap_or_default();
        let report = RunReport {
            verdict,
            failures: records.iter().filter(|r| r.status == IterationStatus::Failed).count(),
            iterations: records,
            metric_history: self.store.history()[history_start..]
                .iter()
                .filter(|v| v.scope.level == ScopeLevel::Database)
                .cloned()
                .collect(),
            final_metrics: self.store.database_values(),
            final_gap,
            elapsed_ms: started.elapsed().as_secs_f64() * 1000.0,
        };
        self.last_report = Some(report.clone());
        self.control.finish();
        self.publish();
        self.emit(LoopEvent::RunTerminated {
            verdict: report.verdict.clone(),
            iterations: report.iterations.len(),
            failures: report.failures,
        });
        Ok(report)
    }

    fn suppressed_now(&mut self, iteration: u32) -> BTreeSet<(String, ContextScope)> {
        self.suppressed.retain(|_, until| *until >= iteration);
        self.suppressed.keys().cloned().collect()
    }

    /// Plan, approve and execute one iteration. `organize` allows the
    /// topic-mapping pass once the contract is met.
    fn round(&mut self, config: &RunConfig, organize: bool) -> Result<Round, OrchestratorError> {
        let gap = self.gap()?;
        let iteration = self.next_iteration;
        self.gap_history.push(gap.total());
        let suppressed = self.suppressed_now(iteration);
        let verdict = plan(&PlanInput {
            snapshot: &self.state,
            registry: &self.tools,
            gap: &gap,
            history: &self.gap_history,
            suppressed: &suppressed,
            iteration,
            config: &self.planner,
        });
        let proposal = match verdict {
            PlannerVerdict::Propose(p) => p,
            PlannerVerdict::ManualReviewRecommended { reason } => {
                return Ok(Round::Stop(Verdict::ManualReviewRecommended { reason }))
            }
            PlannerVerdict::Converged => match self.organization_proposal(organize, iteration, &suppressed) {
                Some(p) => p,
                None => return Ok(Round::Stop(Verdict::Converged)),
            },
        };

        let (approval, actor) = match config.approval_mode {
            ApprovalMode::Auto => (Approval::Auto, None),
            ApprovalMode::Gated => {
                self.emit(LoopEvent::ProposalPending { proposal: proposal.clone() });
                self.control.set_waiting(true);
                let resolution = self.control.desk().submit_and_wait(iteration, proposal.clone());
                self.control.set_waiting(false);
                match resolution {
                    None => {
                        self.gap_history.pop();
                        return Ok(Round::Stop(Verdict::Stopped));
                    }
                    Some(Resolution { decision: Decision::Reject, actor }) => {
                        self.gap_history.pop();
                        return self.reject(iteration, proposal, gap.total(), actor).map(|r| Round::Record(Box::new(r)));
                    }
                    Some(Resolution { decision: Decision::Approve, actor }) => (Approval::ApprovedByHuman, Some(actor)),
                }
            }
        };
        self.execute(config, iteration, proposal, approval, actor, gap.total()).map(|r| Round::Record(Box::new(r)))
    }

    fn organization_proposal(
        &self,
        organize: bool,
        iteration: u32,
        suppressed: &BTreeSet<(String, ContextScope)>,
    ) -> Option<ActionProposal> {
        if !organize || suppressed.contains(&(tools::TOPIC_MAPPING.to_string(), ContextScope::database())) {
            return None;
        }
        let desc = self.tools.get(tools::TOPIC_MAPPING).ok()?;
        if !desc.is_applicable(&self.state) || self.impls.get(tools::TOPIC_MAPPING).is_none() {
            return None;
        }
        let unclustered = self.state.latest_queries().filter(|q| !self.state.topics().contains_key(&q.question_id)).count();
        Some(ActionProposal {
            tool_name: tools::TOPIC_MAPPING.into(),
            target_scope: ContextScope::database(),
            parameters: Default::default(),
            expected_improvement: 0.0,
            rationale: format!("contract met; organize {unclustered} questions with SQL into topics"),
            iteration,
        })
    }

    fn finish_record(&mut self, mut record: IterationRecord, author: &str) -> Result<IterationRecord, OrchestratorError> {
        let name = format!("{JOURNAL_PREFIX}{:04}.json", record.iteration);
        let doc = serde_json::to_string_pretty(&record).expect("json") + "\n";
        let message = format!("journal: iteration {} {} ({:?})", record.iteration, record.proposal.tool_name, record.status);
        record.journal_commit = Some(self.commit(vec![(name, doc)], author, &message)?);
        self.journal.push(record.clone());
        self.next_iteration = record.iteration + 1;
        self.publish();
        self.emit(LoopEvent::IterationCompleted { record: record.clone() });
        Ok(record)
    }

    fn reject(
        &mut self,
        iteration: u32,
        proposal: ActionProposal,
        total_gap: f64,
        actor: String,
    ) -> Result<IterationRecord, OrchestratorError> {
        let key = (proposal.tool_name.clone(), proposal.target_scope.clone());
        self.suppressed.insert(key, iteration + self.planner.rejection_cooldown);
        let record = IterationRecord {
            iteration,
            summary: format!("{} rejected by {actor}", proposal.tool_name),
            proposal,
            approval: Approval::RejectedByHuman,
            actor: Some(actor.clone()),
            status: IterationStatus::Rejected,
            event_ids: Vec::new(),
            state_version: self.state.version(),
            metrics_after: self.store.database_values(),
            total_gap_before: total_gap,
            total_gap_after: total_gap,
            commit_ids: Vec::new(),
            journal_commit: None,
            timestamp_ms: self.clock.now_ms(),
        };
        self.finish_record(record, &actor)
    }

    fn failed(
        &mut self,
        iteration: u32,
        proposal: ActionProposal,
        approval: Approval,
        actor: Option<String>,
        total_gap: f64,
        summary: String,
    ) -> Result<IterationRecord, OrchestratorError> {
        let record = IterationRecord {
            iteration,
            summary,
            approval,
            actor,
            status: IterationStatus::Failed,
            event_ids: Vec::new(),
            state_version: self.state.version(),
            metrics_after: self.store.database_values(),
            total_gap_before: total_gap,
            total_gap_after: total_gap,
            commit_ids: Vec::new(),
            journal_commit: None,
            timestamp_ms: self.clock.now_ms(),
            proposal,
        };
        self.finish_record(record, "orchestrator")
    }

    fn execute(
        &mut self,
        config: &RunConfig,
        iteration: u32,
        proposal: ActionProposal,
        approval: Approval,
        actor: Option<String>,
        gap_before: f64,
    ) -> Result<IterationRecord, OrchestratorError> {
        if let Err(e) = self.tools.get(&proposal.tool_name).and_then(|d| d.validate_params(&proposal.parameters)) {
            return self.failed(iteration, proposal, approval, actor, gap_before, e.to_string());
        }
        let invocation = ToolInvocation {
            tool: proposal.tool_name.clone(),
            parameters: proposal.parameters.clone(),
            target_scope: proposal.target_scope.clone(),
            seed: iteration_seed(config.seed, iteration),
            iteration,
        };
        let ctx = ToolContext { snapshot: &self.state, db: &self.db };
        let result = match self.impls.run(&ctx, &invocation) {
            Ok(r) => r,
            Err(e) if e.is_connection_loss() => return Err(OrchestratorError::ConnectionLost(e.to_string())),
            Err(e) => {
                let summary = format!("{} failed: {e}", proposal.tool_name);
                return self.failed(iteration, proposal, approval, actor, gap_before, summary);
            }
        };
        let created_views: Vec<String> = result
            .artifacts
            .iter()
            .filter_map(|a| match a {
                Artifact::View(v) => Some(v.name.clone()),
                _ => None,
            })
            .collect();
        let applied = if result.is_consistent() {
            self.apply_all(&result.events).map_err(|e| e.to_string())
        } else {
            Err("tool result is inconsistent".to_string())
        };
        let (next, targets) = match applied {
            Ok(v) => v,
            Err(msg) => {
                for v in &created_views {
                    let _ = self.db.drop_view(v);
                }
                let summary = format!("{} produced unusable events: {msg}", proposal.tool_name);
                return self.failed(iteration, proposal, approval, actor, gap_before, summary);
            }
        };
        let first_event = self.state.version() + 1;
        self.state = next;
        let event_ids: Vec<u64> = (first_event..=self.state.version()).collect();
        let values = self.store.recalculate(&self.metrics, &self.state, &targets, iteration, self.clock.as_ref())?;
        if !values.is_empty() {
            self.emit(LoopEvent::MetricUpdated { iteration, values });
        }
        let mut commit_ids = Vec::new();
        let payloads = artifact_payloads(&self.state, &result.artifacts);
        if !payloads.is_empty() {
            let message = format!("iteration {iteration}: {}", result.log);
            commit_ids.push(self.commit(payloads, &proposal.tool_name, &message)?);
        }
        let gap_after = self.gap()?.total();
        let record = IterationRecord {
            iteration,
            summary: result.log,
            proposal,
            approval,
            actor,
            status: IterationStatus::Completed,
            event_ids,
            state_version: self.state.version(),
            metrics_after: self.store.database_values(),
            total_gap_before: gap_before,
            total_gap_after: gap_after,
            commit_ids,
            journal_commit: None,
            timestamp_ms: self.clock.now_ms(),
        };
        self.finish_record(record, "orchestrator")
    }

    /// Applies `events` to a scratch copy of the state and collects the
    /// metric contexts they touch.
    #[allow(clippy::type_complexity)]
    fn apply_all(
        &self,
        events: &[StateEvent],
    ) -> Result<(DataProductState, BTreeSet<(String, ContextScope)>), StateError> {
        let mut next = self.state.clone();
        let mut targets = BTreeSet::new();
        for e in events {
            next = next.apply_event(e.clone())?;
            let applied = next.events().last().expect("event was applied");
            targets.extend(self.metrics.resolve_contexts(&next, applied));
        }
        Ok((next, targets))
    }

    /// A fresh store with every metric recomputed on the current state.
    pub fn recompute_from_scratch(&self) -> Result<MetricStore, MetricsError> {
        let mut fresh = MetricStore::new();
        fresh.recalculate_all(&self.metrics, &self.state, 0, self.clock.as_ref())?;
        Ok(fresh)
    }

    /// Question ids with a topic label, grouped by label.
    pub fn topic_groups(&self) -> BTreeMap<String, Vec<QuestionId>> {
        let mut out: BTreeMap<String, Vec<QuestionId>> = BTreeMap::new();
        for (q, label) in self.state.topics() {
            out.entry(label.clone()).or_default().push(q.clone());
        }
        out
    }
}
