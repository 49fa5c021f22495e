//! Shared fixtures for integration tests.
#![allow(dead_code)]

pub mod events;
pub mod oracle;
pub mod planning;

use std::path::{Path, PathBuf};

use dataprod_core::baseline::{ToolInvocation, ToolResult};
use dataprod_core::db::ConnectionProfile;
use dataprod_core::fixture::{build_retail, load_script, PredefinedQuestion};
use dataprod_core::metrics::{Comparator, Contract};
use dataprod_core::orchestrator::Orchestrator;
use dataprod_core::registry::{ParamValue, Parameters};
use dataprod_core::state::DataProductState;
use tempfile::TempDir;

/// Two tables joined by `t1.b -> t2.b`.
pub const TWO_TABLES: &str = "
CREATE TABLE t2 (b INTEGER PRIMARY KEY, label TEXT NOT NULL);
CREATE TABLE t1 (id INTEGER PRIMARY KEY, a REAL NOT NULL, cat TEXT NOT NULL, b INTEGER REFERENCES t2(b));
INSERT INTO t2 VALUES (1, 'one'), (2, 'two'), (3, 'three');
INSERT INTO t1 VALUES
  (1, 10.0, 'x', 1), (2, 20.0, 'x', 2), (3, 5.0, 'y', 3), (4, 7.5, 'y', 1),
  (5, 1.0, 'z', 2), (6, 40.0, 'w', 3), (7, 3.0, 'w', 1);
";

pub const ONE_TABLE: &str = "
CREATE TABLE sales (id INTEGER PRIMARY KEY, region TEXT, channel TEXT, amount REAL, sold_on DATE);
INSERT INTO sales VALUES (1, 'north', 'web', 10.0, '2024-01-01'), (2, 'south', 'store', 12.5, '2024-01-02');
";

pub struct Db {
    pub dir: TempDir,
    pub path: PathBuf,
}

pub fn retail_db() -> Db {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("retail.db");
    build_retail(&path).unwrap();
    Db { dir, path }
}

pub fn script_db(script: &str) -> Db {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fixture.db");
    load_script(script, &path).unwrap();
    Db { dir, path }
}

pub fn connect(path: &Path, questions: Vec<PredefinedQuestion>) -> Orchestrator {
    Orchestrator::builder(ConnectionProfile::sqlite(path)).questions(questions).connect().unwrap()
}

pub fn question(text: &str, sql: Option<&str>, targets: &[&str]) -> PredefinedQuestion {
    PredefinedQuestion {
        text: text.into(),
        sql: sql.map(str::to_string),
        targets: targets.iter().map(|t| t.to_string()).collect(),
    }
}

pub fn params(entries: &[(&str, i64)]) -> Parameters {
    entries.iter().map(|(k, v)| (k.to_string(), ParamValue::Int(*v))).collect()
}

pub fn invocation(tool: &str, parameters: Parameters, seed: u64) -> ToolInvocation {
    ToolInvocation::new(tool, parameters, seed, 1)
}

pub fn apply(state: &DataProductState, result: &ToolResult) -> DataProductState {
    result.events.iter().fold(state.clone(), |s, e| s.apply_event(e.clone()).unwrap())
}

pub fn case_study_contract() -> Contract {
    Contract::new([
        ("table_coverage", Comparator::AtLeast, 0.90),
        ("column_coverage", Comparator::AtLeast, 0.50),
        ("avg_exec_speed", Comparator::AtMost, 5000.0),
    ])
}

/// Adds one question per call; paired with the `progress` metric it lowers
/// the total gap by 0.005 per iteration.
pub struct AddOneQuestion;

pub const STUB_TOOL: &str = "stub_generator";

impl dataprod_core::baseline::Tool for AddOneQuestion {
    fn name(&self) -> &str {
        STUB_TOOL
    }

    fn run(
        &self,
        ctx: &dataprod_core::baseline::ToolContext<'_>,
        _inv: &ToolInvocation,
    ) -> Result<ToolResult, dataprod_core::baseline::ToolError> {
        use dataprod_core::state::{Question, QuestionOrigin};
        let id = ctx.snapshot.next_question_id(0);
        let q = Question {
            text: format!("stub question {id}"),
            question_id: id,
            origin: QuestionOrigin::Generated,
            parent_question: None,
            schema_targets: Default::default(),
        };
        Ok(ToolResult::new(vec![dataprod_core::baseline::Artifact::Question(q)], "added one question"))
    }
}

/// A data product whose only tool improves `progress` by 0.005 per call.
pub fn stagnation_orchestrator(path: &Path) -> Orchestrator {
    use std::collections::BTreeSet;
    use std::sync::Arc;

    use dataprod_core::metrics::{Direction, Facet, MetricDefinition, MetricRegistry};
    use dataprod_core::registry::{
        ArtifactKind, Impact, ImpactSign, PreconditionRule, Quantity, RuleComparator, ToolDescriptor, ToolRegistry,
    };
    use dataprod_core::state::ScopeLevel;

    let mut metrics = MetricRegistry::with_builtins();
    metrics
        .register_metric(MetricDefinition {
            metric_id: "progress".into(),
            scope_level: ScopeLevel::Database,
            direction: Direction::Maximize,
            unit: "ratio".into(),
            depends_on: BTreeSet::from([Facet::Questions]),
            database_rollup: false,
            compute: Arc::new(|s, _| Some(0.5 + 0.005 * s.question_count() as f64)),
        })
        .unwrap();
    let mut registry = ToolRegistry::new();
    registry
        .register_tool(
            ToolDescriptor {
                name: STUB_TOOL.into(),
                description: "adds one question".into(),
                input_params: vec![],
                output_schema: vec![ArtifactKind::Question],
                execution_context: ScopeLevel::Database,
                preconditions: vec![PreconditionRule::new(Quantity::TableCount, RuleComparator::Gt, 0.0)],
                impacts: vec![Impact::new("progress", ImpactSign::Increase, 1.0)],
            },
            &metrics,
        )
        .unwrap();
    Orchestrator::builder(ConnectionProfile::sqlite(path))
        .metrics(metrics)
        .tool_registry(registry)
        .tool(Box::new(AddOneQuestion))
        .connect()
        .unwrap()
}

pub fn progress_contract() -> Contract {
    Contract::new([("progress", Comparator::AtLeast, 1.0)])
}
