//! Deterministic topic labels: dominant table plus query kind.

use std::collections::BTreeMap;

use super::{Artifact, Tool, ToolContext, ToolError, ToolInvocation, ToolResult};
use crate::registry::tools;
use crate::sql::ast::{Expr, FunctionArgs, SetExpr};
use crate::sql::parse_query;
use crate::state::{DataKind, DataProductState, QueryVersion, TableId, TopicAssignment};

pub struct TopicMapping;

fn selects(body: &SetExpr, out: &mut Vec<Vec<Expr>>) {
    match body {
        SetExpr::Select(s) => out.push(s.group_by.clone()),
        SetExpr::Union { left, right, .. } => {
            selects(left, out);
            selects(right, out);
        }
    }
}

fn column_names(expr: &Expr, out: &mut Vec<(Option<String>, String)>) {
    match expr {
        Expr::Column { table, name } => out.push((table.as_ref().map(|t| t.normalized()), name.normalized())),
        Expr::Function { args: FunctionArgs::List(args), .. } => args.iter().for_each(|a| column_names(a, out)),
        Expr::Binary { left, right, .. } => {
            column_names(left, out);
            column_names(right, out);
        }
        Expr::Unary { expr, .. } | Expr::Nested(expr) => column_names(expr, out),
        _ => {}
    }
}

/// Whether a top-level GROUP BY uses a temporal column of a referenced
/// table, directly or through a view column.
fn groups_by_time(state: &DataProductState, version: &QueryVersion) -> bool {
    let Ok(query) = parse_query(&version.sql_text) else { return false };
    let mut groups = Vec::new();
    selects(&query.body, &mut groups);
    let mut names = Vec::new();
    groups.iter().flatten().for_each(|e| column_names(e, &mut names));
    let temporal = |table: &TableId, col: &str| {
        state.table(table).and_then(|t| t.column(col)).is_some_and(|c| c.data_kind == DataKind::Temporal)
    };
    names.iter().any(|(_, name)| {
        if let Some((t, c)) = name.split_once("__") {
            if temporal(&TableId::from_name(t), c) {
                return true;
            }
        }
        version.analysis.referenced_tables.iter().any(|t| temporal(t, name))
    })
}

/// "<dominant table> · <kind>" where kind is join, trend, aggregate or
/// lookup, checked in that order. The dominant table contributes the most
/// referenced columns; ties go to the smaller name.
pub fn topic_label(state: &DataProductState, version: &QueryVersion) -> String {
    let a = &version.analysis;
    let mut per_table: BTreeMap<&TableId, usize> = a.referenced_tables.iter().map(|t| (t, 0)).collect();
    for c in &a.referenced_columns {
        *per_table.entry(&c.table).or_default() += 1;
    }
    let dominant = per_table
        .iter()
        .max_by(|x, y| x.1.cmp(y.1).then_with(|| y.0.cmp(x.0)))
        .map(|(t, _)| state.table(t).map_or_else(|| t.to_string(), |m| m.name.clone()))
        .unwrap_or_else(|| "database".into());
    let kind = if a.referenced_tables.len() > 1 {
        "join"
    } else if a.has_group_by && groups_by_time(state, version) {
        "trend"
    } else if a.aggregate_count > 0 || a.has_group_by {
        "aggregate"
    } else {
        "lookup"
    };
    format!("{dominant} · {kind}")
}

impl Tool for TopicMapping {
    fn name(&self) -> &str {
        tools::TOPIC_MAPPING
    }

    fn run(&self, ctx: &ToolContext<'_>, _inv: &ToolInvocation) -> Result<ToolResult, ToolError> {
        let state = ctx.snapshot;
        let artifacts: Vec<Artifact> = state
            .latest_queries()
            .filter(|q| !state.topics().contains_key(&q.question_id))
            .map(|q| {
                Artifact::Topic(TopicAssignment { question_id: q.question_id.clone(), topic_label: topic_label(state, q) })
            })
            .collect();
        let log = if artifacts.is_empty() {
            "every question with SQL already has a topic".to_string()
        } else {
            format!("assigned topics to {} questions", artifacts.len())
        };
        Ok(ToolResult::new(artifacts, log))
    }
}
