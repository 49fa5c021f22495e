mod common;

use std::collections::BTreeSet;

use common::*;
use dataprod_core::baseline::{
    topic_label, view_name, Artifact, ToolContext, ToolError, ToolResult, ToolSet,
};
use dataprod_core::fixture::{retail_questions, RETAIL_TABLES};
use dataprod_core::registry::{tools, ParamValue, Parameters};
use dataprod_core::sql::{analyze, parse_query};
use dataprod_core::state::{DataProductState, QuestionOrigin, TableId};

fn run(orch: &dataprod_core::orchestrator::Orchestrator, state: &DataProductState, tool: &str, p: Parameters, seed: u64) -> Result<ToolResult, ToolError> {
    let ctx = ToolContext { snapshot: state, db: orch.connector() };
    ToolSet::baseline().run(&ctx, &invocation(tool, p, seed))
}

fn questions_of(result: &ToolResult) -> Vec<&dataprod_core::state::Question> {
    result
        .artifacts
        .iter()
        .filter_map(|a| match a {
            Artifact::Question(q) => Some(q),
            _ => None,
        })
        .collect()
}

fn versions_of(result: &ToolResult) -> Vec<&dataprod_core::state::QueryVersion> {
    result
        .artifacts
        .iter()
        .filter_map(|a| match a {
            Artifact::QueryVersion(v) => Some(v),
            _ => None,
        })
        .collect()
}

/// Same result with wall-clock timings zeroed.
fn untimed(mut r: ToolResult) -> ToolResult {
    for a in &mut r.artifacts {
        if let Artifact::QueryVersion(v) = a {
            v.exec_ms = Some(0.0);
        }
    }
    ToolResult::new(r.artifacts, r.log)
}

#[test]
fn question_generation_on_one_table_targets_it() {
    let db = script_db(ONE_TABLE);
    let orch = connect(&db.path, vec![]);
    let r = run(&orch, orch.state(), tools::QUESTION_GENERATION, params(&[("count", 3)]), 7).unwrap();
    let qs = questions_of(&r);
    assert_eq!(qs.len(), 3);
    let texts: BTreeSet<&str> = qs.iter().map(|q| q.text.as_str()).collect();
    assert_eq!(texts.len(), 3);
    for q in qs {
        assert_eq!(q.origin, QuestionOrigin::Generated);
        assert!(q.schema_targets.iter().all(|t| t.table == TableId::from_name("sales")));
    }
    assert!(r.is_consistent());
}

#[test]
fn question_generation_reaches_every_priority_table() {
    let db = retail_db();
    let orch = connect(&db.path, vec![]);
    let priority: Vec<TableId> = RETAIL_TABLES[1..].iter().map(|t| TableId::from_name(t)).collect();
    let mut p = params(&[("count", 20)]);
    p.insert("priority_tables".into(), ParamValue::Tables(priority.clone()));
    let r = run(&orch, orch.state(), tools::QUESTION_GENERATION, p, 3).unwrap();
    assert_eq!(questions_of(&r).len(), 20);
    let targeted: BTreeSet<&TableId> = questions_of(&r).iter().flat_map(|q| q.schema_targets.iter().map(|t| &t.table)).collect();
    for t in &priority {
        assert!(targeted.contains(t), "{t} not targeted");
    }
}

#[test]
fn question_generation_is_deterministic_and_checks_bounds() {
    let db = retail_db();
    let orch = connect(&db.path, vec![]);
    let a = run(&orch, orch.state(), tools::QUESTION_GENERATION, params(&[("count", 12)]), 99).unwrap();
    let b = run(&orch, orch.state(), tools::QUESTION_GENERATION, params(&[("count", 12)]), 99).unwrap();
    assert_eq!(a, b);
    let err = run(&orch, orch.state(), tools::QUESTION_GENERATION, params(&[("count", 0)]), 1).unwrap_err();
    assert!(matches!(err, ToolError::Parameter(_)));
}

#[test]
fn text_to_sql_single_table_aggregate_shape() {
    let db = script_db(TWO_TABLES);
    let orch = connect(&db.path, vec![question("What is the total a by cat in t1?", None, &["t1.a", "t1.cat"])]);
    let r = run(&orch, orch.state(), tools::TEXT_TO_SQL, params(&[("max_questions", 5)]), 0).unwrap();
    let vs = versions_of(&r);
    assert_eq!(vs.len(), 1);
    assert_eq!(vs[0].sql_text, "SELECT cat, SUM(a) FROM t1 GROUP BY cat");
    let outcome = orch.connector().execute_timed(&vs[0].sql_text).unwrap();
    assert!(outcome.succeeded());
    assert_eq!(outcome.row_count, 4);
}

#[test]
fn text_to_sql_joins_along_foreign_keys() {
    let db = script_db(TWO_TABLES);
    let orch = connect(&db.path, vec![question("What is the total a of t1 by label of t2?", None, &["t1.a", "t2.label"])]);
    let r = run(&orch, orch.state(), tools::TEXT_TO_SQL, params(&[("max_questions", 1)]), 0).unwrap();
    let v = versions_of(&r)[0];
    assert_eq!(v.analysis.join_count, 1);
    let catalog = orch.state().catalog().unwrap();
    assert_eq!(analyze(&v.sql_text, &catalog).unwrap().join_count, 1);
    assert!(orch.connector().execute_timed(&v.sql_text).unwrap().succeeded());
}

#[test]
fn text_to_sql_errors() {
    let db = script_db(TWO_TABLES);
    let orch = connect(&db.path, vec![question("How many t1 rows are there?", None, &["t1"])]);
    let err = run(&orch, orch.state(), tools::TEXT_TO_SQL, params(&[("max_questions", 0)]), 0).unwrap_err();
    assert!(matches!(err, ToolError::Parameter(_)));
    let answered = connect(&db.path, vec![question("How many t1 rows are there?", Some("SELECT COUNT(*) FROM t1"), &["t1"])]);
    let err = run(&answered, answered.state(), tools::TEXT_TO_SQL, params(&[("max_questions", 1)]), 0).unwrap_err();
    assert_eq!(err, ToolError::NoEligibleQuestion);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[test]
fn followup_adds_having_above_parent_median() {
    let db = script_db(TWO_TABLES);
    let parent_sql = "SELECT cat, SUM(a) FROM t1 GROUP BY cat";
    let orch = connect(&db.path, vec![question("What is the total a by cat in t1?", Some(parent_sql), &["t1.a", "t1.cat"])]);
    let r = run(&orch, orch.state(), tools::FOLLOWUP_GENERATION, params(&[("count", 1)]), 0).unwrap();
    let qs = questions_of(&r);
    assert_eq!(qs.len(), 1);
    assert_eq!(qs[0].origin, QuestionOrigin::Followup);
    assert_eq!(qs[0].parent_question.as_ref().map(|q| q.as_str()), Some("q0001"));
    // sums per cat: w 43, x 30, y 12.5, z 1 → median 21.25
    let sums = vec![43.0, 30.0, 12.5, 1.0];
    let child = versions_of(&r)[0];
    assert_eq!(child.sql_text, format!("{parent_sql} HAVING SUM(a) > {}", median(sums)));
    let parent = orch.state().latest_queries().next().unwrap();
    assert!(child.analysis.token_count > parent.analysis.token_count);
    let outcome = orch.connector().execute_timed(&child.sql_text).unwrap();
    assert_eq!(outcome.row_count, 2);
}

#[test]
fn followup_requires_a_parent() {
    let db = script_db(TWO_TABLES);
    let orch = connect(&db.path, vec![question("How many t1 rows are there?", None, &["t1"])]);
    let err = run(&orch, orch.state(), tools::FOLLOWUP_GENERATION, params(&[("count", 1)]), 0).unwrap_err();
    assert_eq!(err, ToolError::NoParentAvailable);
}

#[test]
fn followups_always_lengthen_their_parent() {
    let db = retail_db();
    let orch = connect(&db.path, retail_questions());
    let state = orch.state().clone();
    let r = run(&orch, &state, tools::FOLLOWUP_GENERATION, params(&[("count", 6)]), 0).unwrap();
    assert_eq!(questions_of(&r).len(), 6);
    let after = apply(&state, &r);
    for q in questions_of(&r) {
        let parent = q.parent_question.as_ref().unwrap();
        let p_len = state.latest_query(parent).unwrap().unwrap().analysis.token_count;
        let c = after.latest_query(&q.question_id).unwrap().unwrap();
        assert!(c.analysis.token_count > p_len, "{} is not longer than its parent", c.sql_text);
        assert!(orch.connector().execute_timed(&c.sql_text).unwrap().succeeded());
    }
}

#[test]
fn view_creation_covers_most_frequent_pattern_and_preserves_results() {
    let db = retail_db();
    let orch = connect(&db.path, retail_questions());
    let state = orch.state().clone();
    let before: Vec<_> = state.latest_queries().cloned().collect();
    let r = run(&orch, &state, tools::VIEW_CREATION, params(&[("max_views", 1)]), 0).unwrap();
    let views: Vec<_> = r.artifacts.iter().filter_map(|a| if let Artifact::View(v) = a { Some(v) } else { None }).collect();
    assert_eq!(views.len(), 1);
    let view = views[0];
    let three = before.iter().filter(|q| q.analysis.join_pattern_key == view.covers_pattern).count();
    assert_eq!(three, 3);
    assert_eq!(view.name, view_name(&view.covers_pattern));
    let rewritten = versions_of(&r);
    assert_eq!(rewritten.len(), 3);
    for v in rewritten {
        let original = before.iter().find(|q| q.question_id == v.question_id).unwrap();
        assert!(v.analysis.join_count < original.analysis.join_count);
        let a = orch.connector().execute_timed(&original.sql_text).unwrap();
        let b = orch.connector().execute_timed(&v.sql_text).unwrap();
        assert!(a.succeeded() && b.succeeded());
        assert_eq!(a.digest, b.digest);
    }
}

#[test]
fn view_creation_needs_a_shared_pattern() {
    let db = script_db(TWO_TABLES);
    let orch = connect(&db.path, vec![question("What is the total a by cat in t1?", Some("SELECT cat, SUM(a) FROM t1 GROUP BY cat"), &["t1"])]);
    let err = run(&orch, orch.state(), tools::VIEW_CREATION, params(&[("max_views", 1)]), 0).unwrap_err();
    assert_eq!(err, ToolError::NoSharedPattern);
}

#[test]
fn topic_labels() {
    let db = script_db(TWO_TABLES);
    let orch = connect(
        &db.path,
        vec![
            question("total a by cat", Some("SELECT cat, SUM(a) FROM t1 GROUP BY cat"), &["t1"]),
            question("a, cat and label", Some("SELECT t1.a, t1.cat, t2.label FROM t1 JOIN t2 ON t1.b = t2.b"), &["t1"]),
            question("labels", Some("SELECT label FROM t2"), &["t2"]),
        ],
    );
    let state = orch.state().clone();
    let labels: Vec<String> = state.latest_queries().map(|q| topic_label(&state, q)).collect();
    // t1 contributes a, cat and b; t2 contributes b and label.
    assert_eq!(labels, vec!["t1 · aggregate", "t1 · join", "t2 · lookup"]);

    let r = run(&orch, &state, tools::TOPIC_MAPPING, Parameters::new(), 0).unwrap();
    assert_eq!(r.artifacts.len(), 3);
    let clustered = apply(&state, &r);
    let again = run(&orch, &clustered, tools::TOPIC_MAPPING, Parameters::new(), 0).unwrap();
    assert!(again.is_empty());
    assert!(!again.log.is_empty());
    assert!(again.is_consistent());
}

#[test]
fn trend_label_for_time_grouping() {
    let db = retail_db();
    let orch = connect(&db.path, vec![question("orders over time", Some("SELECT order_date, COUNT(*) FROM orders GROUP BY order_date"), &["orders"])]);
    let state = orch.state();
    let q = state.latest_queries().next().unwrap();
    assert_eq!(topic_label(state, q), "orders · trend");
}

#[test]
fn every_emitted_statement_parses_and_executes() {
    let db = retail_db();
    let orch = connect(&db.path, retail_questions());
    let mut state = orch.state().clone();
    let steps: [(&str, Parameters); 4] = [
        (tools::QUESTION_GENERATION, params(&[("count", 80)])),
        (tools::TEXT_TO_SQL, params(&[("max_questions", 200)])),
        (tools::FOLLOWUP_GENERATION, params(&[("count", 10)])),
        (tools::VIEW_CREATION, params(&[("max_views", 5)])),
    ];
    let mut emitted = 0;
    for (tool, p) in steps {
        let r = run(&orch, &state, tool, p, 11).unwrap();
        assert!(r.is_consistent());
        for v in versions_of(&r) {
            parse_query(&v.sql_text).unwrap();
            let outcome = orch.connector().execute_timed(&v.sql_text).unwrap();
            assert!(outcome.succeeded(), "{}: {:?}", v.sql_text, outcome.error);
            emitted += 1;
        }
        state = apply(&state, &r);
    }
    assert!(state.questions_without_sql().next().is_none());
    assert!(emitted > 80);
}

#[test]
fn tools_are_pure_functions_of_snapshot_and_invocation() {
    let db = retail_db();
    let orch = connect(&db.path, retail_questions());
    let state = orch.state().clone();
    let generated = run(&orch, &state, tools::QUESTION_GENERATION, params(&[("count", 20)]), 5).unwrap();
    let with_questions = apply(&state, &generated);
    for (tool, p, snapshot) in [
        (tools::TEXT_TO_SQL, params(&[("max_questions", 20)]), &with_questions),
        (tools::FOLLOWUP_GENERATION, params(&[("count", 4)]), &state),
    ] {
        let a = untimed(run(&orch, snapshot, tool, p.clone(), 5).unwrap());
        let b = untimed(run(&orch, snapshot, tool, p, 5).unwrap());
        assert_eq!(a, b, "{tool}");
    }
}
