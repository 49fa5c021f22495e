#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use dataprod_core::fixture::build_retail;
use dataprod_service::events::ApiEvent;
use dataprod_service::{router, App, Config};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

pub struct Harness {
    pub dir: TempDir,
    pub db: PathBuf,
    pub app: Arc<App>,
    pub router: Router,
}

impl Harness {
    pub fn new() -> Self {
        Self::with_config(|_| {})
    }

    pub fn with_config(edit: impl FnOnce(&mut Config)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let db = dir.path().join("retail.db");
        build_retail(&db).unwrap();
        let mut config = Config { heartbeat_ms: 50, ..Config::default() };
        edit(&mut config);
        let app = App::new(config);
        let router = router(app.clone());
        Self { dir, db, app, router }
    }

    pub async fn call(&self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let req = Request::builder().method(method).uri(uri);
        let req = match body {
            Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let resp = self.router.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
        (status, value)
    }

    pub async fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.call(Method::GET, uri, None).await
    }

    pub async fn post(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        self.call(Method::POST, uri, Some(body)).await
    }

    pub async fn connect(&self) -> Value {
        self.connect_with(json!({})).await
    }

    pub async fn connect_with(&self, extra: Value) -> Value {
        let mut body = json!({ "location": self.db.display().to_string() });
        body.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
        let (status, summary) = self.post("/api/v1/datasource", body).await;
        assert_eq!(status, StatusCode::CREATED, "{summary}");
        summary
    }

    /// Buffered events after `since`, parsed from the finite stream.
    pub async fn events_since(&self, since: u64) -> Vec<ApiEvent> {
        let req = Request::get(format!("/api/v1/events?since={since}&follow=false")).body(Body::empty()).unwrap();
        let resp = self.router.clone().oneshot(req).await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        let text = String::from_utf8(resp.into_body().collect().await.unwrap().to_bytes().to_vec()).unwrap();
        parse_sse(&text)
    }

    pub async fn phase(&self) -> String {
        let (_, state) = self.get("/api/v1/state").await;
        state["phase"].as_str().unwrap_or_default().to_string()
    }

    /// Polls until an approval is pending and returns its iteration.
    pub async fn wait_pending(&self) -> u64 {
        let deadline = Instant::now() + Duration::from_secs(30);
        loop {
            let (_, body) = self.get("/api/v1/approvals").await;
            if let Some(p) = body["pending"].as_array().and_then(|a| a.first()) {
                return p["iteration"].as_u64().unwrap();
            }
            assert!(Instant::now() < deadline, "no approval became pending");
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }
}

/// Parses `data:` records of an event stream body.
pub fn parse_sse(text: &str) -> Vec<ApiEvent> {
    text.lines()
        .filter_map(|l| l.strip_prefix("data:"))
        .map(|d| serde_json::from_str(d.trim_start()).unwrap())
        .collect()
}

pub fn case_study_contract() -> Value {
    json!({ "entries": [
        { "metric_id": "table_coverage", "comparator": ">=", "target": 0.9 },
        { "metric_id": "column_coverage", "comparator": ">=", "target": 0.5 },
        { "metric_id": "avg_exec_speed", "comparator": "<=", "target": 5000.0 },
    ]})
}

pub fn write_questions(dir: &Path, questions: &Value) -> PathBuf {
    let path = dir.join("questions.json");
    std::fs::write(&path, questions.to_string()).unwrap();
    path
}

pub fn db_metric(metrics: &Value, id: &str) -> Option<f64> {
    metrics
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["metric_id"] == id && m["scope"]["level"] == "database")
        .and_then(|m| m["value"].as_f64())
}
