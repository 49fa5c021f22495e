//! Tool descriptors: parameters, declarative preconditions and the
//! tool-to-metric impact map the planner scores against.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{ids, MetricRegistry};
use crate::state::{DataProductState, ScopeLevel, TableId};

pub mod tools {
    pub const QUESTION_GENERATION: &str = "question_generation";
    pub const TEXT_TO_SQL: &str = "text_to_sql";
    pub const FOLLOWUP_GENERATION: &str = "followup_generation";
    pub const VIEW_CREATION: &str = "view_creation";
    pub const TOPIC_MAPPING: &str = "topic_mapping";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamType {
    Count,
    TableList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub semantic_type: ParamType,
    pub required: bool,
    pub min: Option<i64>,
    pub max: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Tables(Vec<TableId>),
}

impl ParamValue {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            ParamValue::Int(v) => Some(*v),
            ParamValue::Tables(_) => None,
        }
    }

    pub fn as_tables(&self) -> Option<&[TableId]> {
        match self {
            ParamValue::Tables(t) => Some(t),
            ParamValue::Int(_) => None,
        }
    }
}

pub type Parameters = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Question,
    QueryVersion,
    Answer,
    View,
    TopicAssignment,
}

/// Observable state quantities preconditions can test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    TableCount,
    QuestionCount,
    QuestionsWithoutSql,
    QuestionsWithSql,
    UnclusteredQuestionsWithSql,
    UncoveredTables,
    /// Largest number of latest queries sharing one non-empty join pattern.
    MaxSharedJoinPatternFrequency,
}

impl Quantity {
    pub fn evaluate(self, state: &DataProductState) -> f64 {
        let n = match self {
            Quantity::TableCount => state.table_count(),
            Quantity::QuestionCount => state.question_count(),
            Quantity::QuestionsWithoutSql => state.questions_without_sql().count(),
            Quantity::QuestionsWithSql => state.questions_with_sql(),
            Quantity::UnclusteredQuestionsWithSql => {
                state.latest_queries().filter(|q| !state.topics().contains_key(&q.question_id)).count()
            }
            Quantity::UncoveredTables => state.uncovered_tables().len(),
            Quantity::MaxSharedJoinPatternFrequency => {
                shared_join_patterns(state).into_iter().map(|(_, n)| n).max().unwrap_or(0)
            }
        };
        n as f64
    }
}

/// Non-empty join patterns of latest queries with their frequency, for
/// patterns used by at least two queries; sorted by key.
pub fn shared_join_patterns(state: &DataProductState) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for q in state.latest_queries() {
        if !q.analysis.join_pattern_key.is_empty() {
            *counts.entry(&q.analysis.join_pattern_key).or_default() += 1;
        }
    }
    counts.into_iter().filter(|(_, n)| *n >= 2).map(|(k, n)| (k.to_string(), n)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuleComparator {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "==")]
    Eq,
}

impl RuleComparator {
    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            RuleComparator::Gt => lhs > rhs,
            RuleComparator::Ge => lhs >= rhs,
            RuleComparator::Lt => lhs < rhs,
            RuleComparator::Le => lhs <= rhs,
            RuleComparator::Eq => lhs == rhs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreconditionRule {
    pub quantity: Quantity,
    pub comparator: RuleComparator,
    pub threshold: f64,
}

impl PreconditionRule {
    pub fn new(quantity: Quantity, comparator: RuleComparator, threshold: f64) -> Self {
        Self { quantity, comparator, threshold }
    }

    pub fn check(&self, state: &DataProductState) -> PreconditionStatus {
        let observed = self.quantity.evaluate(state);
        PreconditionStatus { rule: *self, observed, holds: self.comparator.holds(observed, self.threshold) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreconditionStatus {
    pub rule: PreconditionRule,
    pub observed: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpactSign {
    Increase,
    Decrease,
    /// Moves the metric toward its target, whichever way that is.
    Optimize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Impact {
    pub metric_id: String,
    pub sign: ImpactSign,
    pub default_weight: f64,
}

impl Impact {
    pub fn new(metric_id: &str, sign: ImpactSign, default_weight: f64) -> Self {
        Self { metric_id: metric_id.into(), sign, default_weight }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub name: String,
    pub description: String,
    pub input_params: Vec<ParamSpec>,
    pub output_schema: Vec<ArtifactKind>,
    pub execution_context: ScopeLevel,
    pub preconditions: Vec<PreconditionRule>,
    pub impacts: Vec<Impact>,
}

impl ToolDescriptor {
    pub fn is_applicable(&self, state: &DataProductState) -> bool {
        self.preconditions.iter().all(|r| r.check(state).holds)
    }

    pub fn precondition_report(&self, state: &DataProductState) -> Vec<PreconditionStatus> {
        self.preconditions.iter().map(|r| r.check(state)).collect()
    }

    /// Checks `params` against the declared specs: required parameters
    /// present, no unknown names, counts within bounds.
    pub fn validate_params(&self, params: &Parameters) -> Result<(), RegistryError> {
        for name in params.keys() {
            if !self.input_params.iter().any(|p| &p.name == name) {
                return Err(RegistryError::Parameter(format!("{}: unknown parameter `{name}`", self.name)));
            }
        }
        for spec in &self.input_params {
            let Some(value) = params.get(&spec.name) else {
                if spec.required {
                    return Err(RegistryError::Parameter(format!("{}: missing `{}`", self.name, spec.name)));
                }
                continue;
            };
            match (spec.semantic_type, value) {
                (ParamType::Count, ParamValue::Int(v)) => {
                    if spec.min.is_some_and(|m| *v < m) || spec.max.is_some_and(|m| *v > m) {
                        return Err(RegistryError::Parameter(format!(
                            "{}: `{}` = {v} outside [{}, {}]",
                            self.name,
                            spec.name,
                            spec.min.map_or("-inf".into(), |m| m.to_string()),
                            spec.max.map_or("inf".into(), |m| m.to_string()),
                        )));
                    }
                }
                (ParamType::TableList, ParamValue::Tables(_)) => {}
                _ => {
                    return Err(RegistryError::Parameter(format!("{}: `{}` has the wrong type", self.name, spec.name)))
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegistryError {
    #[error("tool `{0}` is already registered")]
    DuplicateTool(String),
    #[error("tool `{tool}` impacts unknown metric `{metric}`")]
    UnknownMetric { tool: String, metric: String },
    #[error("tool `{tool}` has non-positive weight for `{metric}`")]
    InvalidWeight { tool: String, metric: String },
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("invalid parameters: {0}")]
    Parameter(String),
}

#[derive(Debug, Clone, Default)]
pub struct ToolRegistry {
    tools: Vec<ToolDescriptor>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with the five baseline tools in their canonical order.
    pub fn with_defaults(metrics: &MetricRegistry) -> Result<Self, RegistryError> {
        let mut registry = Self::new();
        for desc in default_descriptors() {
            registry.register_tool(desc, metrics)?;
        }
        Ok(registry)
    }

    pub fn register_tool(&mut self, desc: ToolDescriptor, metrics: &MetricRegistry) -> Result<(), RegistryError> {
        if self.tools.iter().any(|t| t.name == desc.name) {
            return Err(RegistryError::DuplicateTool(desc.name));
        }
        for impact in &desc.impacts {
            if !metrics.contains(&impact.metric_id) {
                return Err(RegistryError::UnknownMetric { tool: desc.name.clone(), metric: impact.metric_id.clone() });
            }
            if !(impact.default_weight > 0.0 && impact.default_weight.is_finite()) {
                return Err(RegistryError::InvalidWeight { tool: desc.name.clone(), metric: impact.metric_id.clone() });
            }
        }
        self.tools.push(desc);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ToolDescriptor, RegistryError> {
        self.tools.iter().find(|t| t.name == name).ok_or_else(|| RegistryError::UnknownTool(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ToolDescriptor> {
        self.tools.iter()
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    /// Tools whose every precondition holds, in registration order.
    pub fn applicable_tools(&self, state: &DataProductState) -> Vec<&ToolDescriptor> {
        self.tools.iter().filter(|t| t.is_applicable(state)).collect()
    }

    /// Overrides one impact weight.
    pub fn set_weight(&mut self, tool: &str, metric_id: &str, weight: f64) -> Result<(), RegistryError> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(RegistryError::InvalidWeight { tool: tool.into(), metric: metric_id.into() });
        }
        let desc = self.tools.iter_mut().find(|t| t.name == tool).ok_or_else(|| RegistryError::UnknownTool(tool.into()))?;
        let impact = desc
            .impacts
            .iter_mut()
            .find(|i| i.metric_id == metric_id)
            .ok_or_else(|| RegistryError::UnknownMetric { tool: tool.into(), metric: metric_id.into() })?;
        impact.default_weight = weight;
        Ok(())
    }

    /// Metric ids any registered tool declares an impact on.
    pub fn impacted_metrics(&self) -> BTreeSet<&str> {
        self.tools.iter().flat_map(|t| t.impacts.iter().map(|i| i.metric_id.as_str())).collect()
    }
}

impl fmt::Display for ImpactSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImpactSign::Increase => "increase",
            ImpactSign::Decrease => "decrease",
            ImpactSign::Optimize => "optimize",
        })
    }
}

fn count_param(name: &str, min: i64, max: Option<i64>) -> ParamSpec {
    ParamSpec { name: name.into(), semantic_type: ParamType::Count, required: true, min: Some(min), max }
}

pub fn default_descriptors() -> Vec<ToolDescriptor> {
    use ImpactSign::*;
    use RuleComparator::*;
    vec![
        ToolDescriptor {
            name: tools::QUESTION_GENERATION.into(),
            description: "Generates new business questions from schema templates, favoring under-covered tables.".into(),
            input_params: vec![
                count_param("count", 1, None),
                ParamSpec {
                    name: "priority_tables".into(),
                    semantic_type: ParamType::TableList,
                    required: false,
                    min: None,
                    max: None,
                },
            ],
            output_schema: vec![ArtifactKind::Question],
            execution_context: ScopeLevel::Database,
            preconditions: vec![PreconditionRule::new(Quantity::TableCount, Gt, 0.0)],
            impacts: vec![
                Impact::new(ids::QUESTION_COUNT, Increase, 1.0),
                Impact::new(ids::TABLE_COVERAGE, Increase, 0.5),
                Impact::new(ids::COLUMN_COVERAGE, Increase, 0.5),
            ],
        },
        ToolDescriptor {
            name: tools::TEXT_TO_SQL.into(),
            description: "Writes and executes SQL for questions that have none yet.".into(),
            input_params: vec![count_param("max_questions", 1, None)],
            output_schema: vec![ArtifactKind::QueryVersion, ArtifactKind::Answer],
            execution_context: ScopeLevel::Database,
            preconditions: vec![PreconditionRule::new(Quantity::QuestionsWithoutSql, Ge, 1.0)],
            impacts: vec![
                Impact::new(ids::TABLE_COVERAGE, Increase, 1.0),
                Impact::new(ids::COLUMN_COVERAGE, Increase, 1.0),
                Impact::new(ids::AVG_QUERY_LENGTH, Optimize, 0.5),
                Impact::new(ids::AVG_QUERY_COMPLEXITY, Optimize, 0.5),
                Impact::new(ids::AVG_EXEC_SPEED, Optimize, 0.5),
            ],
        },
        ToolDescriptor {
            name: tools::FOLLOWUP_GENERATION.into(),
            description: "Chains follow-up questions onto answered ones by extending their SQL.".into(),
            input_params: vec![count_param("count", 1, None)],
            output_schema: vec![ArtifactKind::Question, ArtifactKind::QueryVersion, ArtifactKind::Answer],
            execution_context: ScopeLevel::Database,
            preconditions: vec![PreconditionRule::new(Quantity::QuestionsWithSql, Ge, 1.0)],
            impacts: vec![
                Impact::new(ids::QUESTION_COUNT, Increase, 1.0),
                Impact::new(ids::AVG_QUERY_LENGTH, Increase, 1.0),
            ],
        },
        ToolDescriptor {
            name: tools::VIEW_CREATION.into(),
            description: "Materializes join patterns shared by several queries as views and rewrites those queries."
                .into(),
            input_params: vec![count_param("max_views", 1, None)],
            output_schema: vec![ArtifactKind::View, ArtifactKind::QueryVersion, ArtifactKind::Answer],
            execution_context: ScopeLevel::Database,
            preconditions: vec![PreconditionRule::new(Quantity::MaxSharedJoinPatternFrequency, Ge, 2.0)],
            impacts: vec![
                Impact::new(ids::AVG_QUERY_LENGTH, Decrease, 1.0),
                Impact::new(ids::AVG_QUERY_COMPLEXITY, Decrease, 1.0),
                Impact::new(ids::TABLE_COVERAGE, Increase, 0.5),
                Impact::new(ids::COLUMN_COVERAGE, Increase, 0.5),
            ],
        },
        ToolDescriptor {
            name: tools::TOPIC_MAPPING.into(),
            description: "Groups answered questions into labeled topics. Organizational only.".into(),
            input_params: vec![],
            output_schema: vec![ArtifactKind::TopicAssignment],
            execution_context: ScopeLevel::Database,
            preconditions: vec![
                PreconditionRule::new(Quantity::QuestionsWithSql, Ge, 10.0),
                PreconditionRule::new(Quantity::UnclusteredQuestionsWithSql, Ge, 1.0),
            ],
            impacts: vec![],
        },
    ]
}
