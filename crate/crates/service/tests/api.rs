mod common;

use axum::http::{Method, StatusCode};
use common::{case_study_contract, db_metric, write_questions, Harness};
use dataprod_core::fixture::RETAIL_TABLES;
use serde_json::json;

#[tokio::test]
async fn reads_before_connecting_report_not_connected() {
    let h = Harness::new();
    for uri in ["/api/v1/state", "/api/v1/metrics", "/api/v1/run/journal", "/api/v1/tools", "/api/v1/approvals"] {
        let (status, body) = h.get(uri).await;
        assert_eq!(status, StatusCode::CONFLICT, "{uri}");
        assert_eq!(body["error"]["code"], "not_connected", "{uri}");
    }
    let (status, body) = h.post("/api/v1/run/start", json!({})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "not_connected");
}

#[tokio::test]
async fn fixture_summary_lists_six_tables() {
    let h = Harness::new();
    let summary = h.connect().await;
    let mut tables: Vec<&str> = summary["datasource"]["tables"].as_array().unwrap().iter().map(|t| t.as_str().unwrap()).collect();
    tables.sort_unstable();
    assert_eq!(tables, RETAIL_TABLES);
    assert_eq!(summary["question_count"], 0);

    let (status, state) = h.get("/api/v1/state").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(state["counts"]["tables"], 6);
    assert_eq!(state["phase"], "idle");
}

#[tokio::test]
async fn four_question_file_gives_question_count_four() {
    let h = Harness::new();
    let file = write_questions(
        h.dir.path(),
        &json!([
            { "text": "How many customers are there?", "sql": "SELECT COUNT(*) FROM customers" },
            { "text": "Which products sell best?" },
            { "text": "How many stores per region?", "sql": "SELECT region, COUNT(*) FROM stores GROUP BY region" },
            { "text": "What is the average payment?", "targets": ["payments.amount"] },
        ]),
    );
    let summary = h.connect_with(json!({ "questions_file": file.display().to_string() })).await;
    assert_eq!(summary["question_count"], 4);
    assert_eq!(db_metric(&summary["metrics"], "question_count"), Some(4.0));

    let (_, metrics) = h.get("/api/v1/metrics?scope=database").await;
    assert_eq!(db_metric(&metrics["metrics"], "question_count"), Some(4.0));
    let (_, questions) = h.get("/api/v1/questions").await;
    let qs = questions["questions"].as_array().unwrap();
    assert_eq!(qs.len(), 4);
    assert_eq!(qs.iter().filter(|q| q["latest_sql"].is_string()).count(), 2);
}

#[tokio::test]
async fn malformed_questions_file_is_rejected() {
    let h = Harness::new();
    let file = write_questions(h.dir.path(), &json!([{ "text": "" }]));
    let (status, body) = h
        .post("/api/v1/datasource", json!({ "location": h.db.display().to_string(), "questions_file": file.display().to_string() }))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "invalid_questions");
}

#[tokio::test]
async fn connection_errors_carry_codes() {
    let h = Harness::new();
    let missing = h.dir.path().join("absent.db");
    let (status, body) = h.post("/api/v1/datasource", json!({ "location": missing.display().to_string() })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "connection_error");

    let empty = h.dir.path().join("empty.db");
    dataprod_core::fixture::load_script("CREATE TEMP TABLE t(x);", &empty).unwrap();
    let (_, body) = h.post("/api/v1/datasource", json!({ "location": empty.display().to_string() })).await;
    assert_eq!(body["error"]["code"], "empty_schema");

    let (_, body) = h.post("/api/v1/datasource", json!({ "location": "x", "source_kind": "oracle" })).await;
    assert_eq!(body["error"]["code"], "unsupported_source");
}

#[tokio::test]
async fn ratio_target_above_one_is_a_validation_error() {
    let h = Harness::new();
    h.connect().await;
    let contract = json!({ "entries": [{ "metric_id": "table_coverage", "comparator": ">=", "target": 1.3 }] });
    let (status, body) = h.call(Method::PUT, "/api/v1/contract", Some(contract)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "invalid_contract");

    let unknown = json!({ "entries": [{ "metric_id": "shininess", "comparator": ">=", "target": 0.5 }] });
    let (status, body) = h.call(Method::PUT, "/api/v1/contract", Some(unknown)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "unknown_metric");

    let (_, contract) = h.get("/api/v1/contract").await;
    assert!(contract["contract"].is_null());
}

#[tokio::test]
async fn contract_change_emits_an_event_and_reports_gaps() {
    let h = Harness::new();
    h.connect().await;
    let (status, body) = h.call(Method::PUT, "/api/v1/contract", Some(case_study_contract())).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let gaps = body["gap"]["components"].as_array().unwrap();
    assert_eq!(gaps.len(), 3);
    let speed = gaps.iter().find(|g| g["metric_id"] == "avg_exec_speed").unwrap();
    assert!(speed["value"].is_null());
    assert_eq!(speed["normalized_gap"], 1.0);

    let (_, state) = h.get("/api/v1/state").await;
    assert_eq!(state["contract"], case_study_contract());
    let (_, commits) = h.get("/api/v1/commits").await;
    assert!(commits["commits"].as_array().unwrap().iter().any(|c| c["message"] == "set contract"), "{commits}");
    let events = h.events_since(0).await;
    assert!(events.iter().any(|e| e.kind == "CommitCreated"));
}

#[tokio::test]
async fn unknown_metric_history_is_not_found() {
    let h = Harness::new();
    h.connect().await;
    let (status, body) = h.get("/api/v1/metrics/shininess/history").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "unknown_metric");
    let (status, body) = h.get("/api/v1/metrics?metric=shininess").await;
    assert_eq!(status, StatusCode::NOT_FOUND, "{body}");

    let (status, body) = h.get("/api/v1/metrics/table_coverage/history").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["series"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn malformed_requests_are_rejected() {
    let h = Harness::new();
    h.connect().await;
    let (status, body) = h.call(Method::PUT, "/api/v1/contract", Some(json!({ "entries": 3 }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "invalid_request");
    let (status, _) = h.get("/api/v1/metrics?scope=galaxy").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, body) = h.post("/api/v1/run/jump", json!({})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "not_found");
    let (status, _) = h.get("/api/v1/nothing").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = h.post("/api/v1/run/start", json!({ "max_iterations": 0 })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(h.phase().await, "idle");
}

#[tokio::test]
async fn tools_report_applicability() {
    let h = Harness::new();
    h.connect().await;
    let (_, body) = h.get("/api/v1/tools").await;
    let tools = body["tools"].as_array().unwrap();
    let names: Vec<&str> = tools.iter().map(|t| t["descriptor"]["name"].as_str().unwrap_or_default()).collect();
    assert!(names.contains(&"question_generation"), "{names:?}");
    assert!(tools.iter().any(|t| t["applicable"] == true));
}

#[tokio::test]
async fn static_assets_are_served_when_configured() {
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<html>dashboard</html>").unwrap();
    std::fs::write(ui.path().join("app.js"), "console.log(1)").unwrap();
    let dir = ui.path().to_path_buf();
    let h = Harness::with_config(|c| c.ui_dir = Some(dir));
    let req = |uri: &str| axum::http::Request::get(uri).body(axum::body::Body::empty()).unwrap();
    use http_body_util::BodyExt;
    use tower::ServiceExt;
    let resp = h.router.clone().oneshot(req("/app.js")).await.unwrap();
    assert_eq!(resp.headers()["content-type"], "text/javascript");
    let resp = h.router.clone().oneshot(req("/runs/3")).await.unwrap();
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&body[..], b"<html>dashboard</html>");
    let resp = h.router.clone().oneshot(req("/../secret")).await.unwrap();
    assert_ne!(resp.status(), StatusCode::OK);
}
