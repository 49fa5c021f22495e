//! Follow-up questions that extend a parent's SQL with one more clause.

use std::collections::BTreeSet;

use super::{execute_version, Artifact, Tool, ToolContext, ToolError, ToolInvocation, ToolResult, Versions};
use crate::registry::tools;
use crate::sql::ast::{BinaryOp, Expr, Query, Select, SelectItem, SetExpr};
use crate::sql::{parse_query, token_count};
use crate::state::{Question, QuestionOrigin, QueryVersion};

pub struct FollowupGeneration;

/// Median of the numeric values, averaging the middle pair.
pub(crate) fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len().is_multiple_of(2) { (values[mid - 1] + values[mid]) / 2.0 } else { values[mid] })
}

fn number_literal(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{}", (v * 1e6).round() / 1e6)
    }
}

fn columns_in(expr: &Expr, out: &mut Vec<Expr>) {
    match expr {
        Expr::Column { .. } => out.push(expr.clone()),
        Expr::Unary { expr, .. } | Expr::IsNull { expr, .. } | Expr::Nested(expr) => columns_in(expr, out),
        Expr::Binary { left, right, .. } => {
            columns_in(left, out);
            columns_in(right, out);
        }
        Expr::Between { expr, low, high, .. } => {
            columns_in(expr, out);
            columns_in(low, out);
            columns_in(high, out);
        }
        Expr::Like { expr, pattern, .. } => {
            columns_in(expr, out);
            columns_in(pattern, out);
        }
        Expr::InList { expr, list, .. } => {
            columns_in(expr, out);
            list.iter().for_each(|e| columns_in(e, out));
        }
        Expr::InSubquery { expr, .. } => columns_in(expr, out),
        Expr::Function { args: crate::sql::ast::FunctionArgs::List(args), .. } => {
            args.iter().for_each(|e| columns_in(e, out));
        }
        _ => {}
    }
}

fn null_checked(selection: &Option<Expr>) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    fn walk(e: &Expr, out: &mut BTreeSet<String>) {
        match e {
            Expr::Binary { left, op: BinaryOp::And, right } => {
                walk(left, out);
                walk(right, out);
            }
            Expr::IsNull { expr, negated: true } => {
                out.insert(expr.to_string().to_ascii_lowercase());
            }
            Expr::Nested(inner) => walk(inner, out),
            _ => {}
        }
    }
    if let Some(e) = selection {
        walk(e, &mut out);
    }
    out
}

fn first_aggregate(select: &Select) -> Option<(usize, Expr)> {
    select.projection.iter().enumerate().find_map(|(i, item)| match item {
        SelectItem::Expr { expr, .. } if expr.is_aggregate_call() => Some((i, expr.clone())),
        _ => None,
    })
}

/// Extends `parent` by one clause, returning the new SQL and the sentence
/// appended to the question. `None` when no extension applies.
fn extend(ctx: &ToolContext<'_>, parent: &QueryVersion) -> Result<Option<(String, String)>, ToolError> {
    let Ok(mut query) = parse_query(&parent.sql_text) else { return Ok(None) };
    let Query { body: SetExpr::Select(select), .. } = &mut query else { return Ok(None) };

    if !select.group_by.is_empty() && select.having.is_none() {
        if let Some((idx, agg)) = first_aggregate(select) {
            let outcome = ctx.db.execute_timed(&parent.sql_text)?;
            let values = outcome.rows.iter().filter_map(|r| r.get(idx).and_then(|c| c.as_f64())).collect();
            if let (true, Some(m)) = (outcome.succeeded(), median(values)) {
                let lit = number_literal(m);
                select.having = Some(Expr::binary(agg.clone(), BinaryOp::Gt, Expr::Number(lit.clone())));
                return Ok(Some((query.to_string(), format!("Keep only groups where {agg} is above the median of {lit}."))));
            }
        }
    }
    if query.order_by.is_empty() {
        let SetExpr::Select(select) = &query.body else { unreachable!() };
        let key = first_aggregate(select).map(|(_, e)| (e, true)).or_else(|| {
            select.projection.iter().find_map(|item| match item {
                SelectItem::Expr { expr, .. } => Some((expr.clone(), false)),
                _ => None,
            })
        });
        if let Some((expr, desc)) = key {
            let sentence = format!("Sort the results by {expr}, {}.", if desc { "highest first" } else { "in ascending order" });
            query.order_by.push(crate::sql::ast::OrderItem { expr, desc });
            return Ok(Some((query.to_string(), sentence)));
        }
    }
    if query.limit.is_none() {
        query.limit = Some(Expr::Number("10".into()));
        return Ok(Some((query.to_string(), "Show only the first 10 rows.".into())));
    }
    let SetExpr::Select(select) = &mut query.body else { unreachable!() };
    let mut cols = Vec::new();
    for item in &select.projection {
        if let SelectItem::Expr { expr, .. } = item {
            columns_in(expr, &mut cols);
        }
    }
    select.group_by.iter().for_each(|e| columns_in(e, &mut cols));
    let checked = null_checked(&select.selection);
    let Some(col) = cols.into_iter().find(|c| !checked.contains(&c.to_string().to_ascii_lowercase())) else {
        return Ok(None);
    };
    let filter = Expr::IsNull { expr: Box::new(col.clone()), negated: true };
    select.selection = Some(match select.selection.take() {
        Some(existing) => Expr::binary(existing, BinaryOp::And, filter),
        None => filter,
    });
    Ok(Some((query.to_string(), format!("Exclude rows where {col} is missing."))))
}

impl Tool for FollowupGeneration {
    fn name(&self) -> &str {
        tools::FOLLOWUP_GENERATION
    }

    fn run(&self, ctx: &ToolContext<'_>, inv: &ToolInvocation) -> Result<ToolResult, ToolError> {
        let k = inv.count("count", 1)?;
        let state = ctx.snapshot;
        let mut parents: Vec<&QueryVersion> = state.latest_queries().collect();
        if parents.is_empty() {
            return Err(ToolError::NoParentAvailable);
        }
        // Longest SQL first, so the children raise the average length.
        parents.sort_by(|a, b| {
            b.analysis.token_count.cmp(&a.analysis.token_count).then_with(|| a.question_id.cmp(&b.question_id))
        });
        let catalog = state.catalog()?;
        let mut texts: BTreeSet<String> = state.questions().map(|q| q.text.clone()).collect();
        let mut versions = Versions::default();
        let mut artifacts = Vec::new();
        let mut made = 0;
        let mut skipped = Vec::new();
        for parent in parents {
            if made == k {
                break;
            }
            let Some((sql, sentence)) = extend(ctx, parent)? else { continue };
            let parent_q = state.question(&parent.question_id).expect("versions belong to questions");
            let text = format!("{} {sentence}", parent_q.text);
            if texts.contains(&text) || !token_count(&sql).is_ok_and(|n| n > parent.analysis.token_count) {
                continue;
            }
            let qid = state.next_question_id(made);
            let question = Question {
                question_id: qid.clone(),
                text: text.clone(),
                origin: QuestionOrigin::Followup,
                parent_question: Some(parent.question_id.clone()),
                schema_targets: parent_q.schema_targets.clone(),
            };
            match execute_version(ctx, &catalog, &mut versions, &qid, &sql, tools::FOLLOWUP_GENERATION)? {
                Ok(mut produced) => {
                    artifacts.push(Artifact::Question(question));
                    artifacts.append(&mut produced);
                    texts.insert(text);
                    made += 1;
                }
                Err(msg) => skipped.push(msg),
            }
        }
        if made == 0 && skipped.is_empty() {
            return Ok(ToolResult::new(Vec::new(), "no parent query admits a further extension"));
        }
        let mut log = format!("generated {made} follow-up questions");
        if !skipped.is_empty() {
            log.push_str(&format!("; skipped {}", skipped.join("; ")));
        }
        Ok(ToolResult::new(artifacts, log))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }

    #[test]
    fn literals_are_plain() {
        assert_eq!(number_literal(12.0), "12");
        assert_eq!(number_literal(2.5), "2.5");
        assert_eq!(number_literal(1.0 / 3.0), "0.333333");
    }
}
