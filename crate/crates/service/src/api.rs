//! HTTP routes under `/api/v1`. Every read handler answers from a single
//! published snapshot.

use std::convert::Infallible;
use std::path::{Component, Path as FsPath};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode, Uri};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dataprod_core::metrics::{Contract, GapVector, MetricValue};
use dataprod_core::orchestrator::{Decision, Snapshot};
use dataprod_core::state::{QuestionId, QuestionOrigin, ScopeLevel, SchemaTarget};
use futures::{stream, StreamExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::app::{App, ConnectRequest, RunAction, RunRequest};
use crate::error::ApiError;
use crate::events::ApiEvent;

type ApiResult<T> = Result<T, ApiError>;

pub fn router(app: Arc<App>) -> Router {
    let api = Router::new()
        .route("/datasource", post(connect))
        .route("/state", get(state))
        .route("/metrics", get(metrics))
        .route("/metrics/{id}/history", get(history))
        .route("/contract", get(get_contract).put(put_contract))
        .route("/run/journal", get(journal))
        .route("/run/{action}", post(run_action))
        .route("/approvals", get(approvals))
        .route("/approvals/{iteration}", post(decide))
        .route("/tools", get(tools))
        .route("/questions", get(questions))
        .route("/topics", get(topics))
        .route("/commits", get(commits))
        .route("/events", get(events))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") });
    let router = Router::new().nest("/api/v1", api);
    let router = if app.config.ui_dir.is_some() { router.fallback(static_file) } else { router };
    router.with_state(app)
}

fn parse<T: DeserializeOwned + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    require(body)
}

fn require<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

fn query<T: DeserializeOwned>(q: Result<Query<T>, axum::extract::rejection::QueryRejection>) -> ApiResult<T> {
    q.map(|Query(t)| t).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn snapshot(app: &App) -> ApiResult<Arc<Snapshot>> {
    Ok(app.session()?.published.read())
}

async fn connect(State(app): State<Arc<App>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let request: ConnectRequest = require(&body)?;
    let summary = app.connect(request).await?;
    Ok((StatusCode::CREATED, Json(summary)))
}

#[derive(Serialize)]
struct Counts {
    tables: usize,
    columns: usize,
    questions: usize,
    questions_with_sql: usize,
    views: usize,
    topics: usize,
    events: usize,
}

async fn state(State(app): State<Arc<App>>) -> ApiResult<Json<Value>> {
    let session = app.session()?;
    let snap = session.published.read();
    let st = &snap.state;
    let counts = Counts {
        tables: st.table_count(),
        columns: st.tables().map(|t| t.columns.len()).sum(),
        questions: st.question_count(),
        questions_with_sql: st.questions_with_sql(),
        views: st.views().count(),
        topics: st.topics().values().collect::<std::collections::BTreeSet<_>>().len(),
        events: st.event_count(),
    };
    Ok(Json(json!({
        "phase": session.control.phase(),
        "state_version": st.version(),
        "datasource": snap.datasource,
        "contract": st.contract(),
        "gap": snap.gap,
        "total_gap": snap.gap.as_ref().map(GapVector::total),
        "counts": counts,
        "tables": st.tables().collect::<Vec<_>>(),
        "views": st.views().collect::<Vec<_>>(),
        "pending_approval": session.control.desk().pending(),
        "last_report": snap.last_report,
        "last_error": app.last_error(),
        "last_event_seq": app.hub.last_seq(),
    })))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct MetricsQuery {
    scope: Option<ScopeLevel>,
    metric: Option<String>,
}

fn ensure_metric(snap: &Snapshot, id: &str) -> ApiResult<()> {
    if snap.metric_info.iter().any(|m| m.metric_id == id) {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::NOT_FOUND, "unknown_metric", format!("unknown metric `{id}`")))
    }
}

async fn metrics(
    State(app): State<Arc<App>>,
    q: Result<Query<MetricsQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Json<Value>> {
    let q = query(q)?;
    let snap = snapshot(&app)?;
    if let Some(id) = &q.metric {
        ensure_metric(&snap, id)?;
    }
    let values: Vec<&MetricValue> = snap
        .metrics
        .iter()
        .filter(|v| q.scope.is_none_or(|s| v.scope.level == s))
        .filter(|v| q.metric.as_ref().is_none_or(|m| &v.metric_id == m))
        .collect();
    Ok(Json(json!({
        "state_version": snap.state.version(),
        "metrics": values,
        "gap": snap.gap,
        "total_gap": snap.gap.as_ref().map(GapVector::total),
        "contract": snap.state.contract(),
        "definitions": snap.metric_info,
    })))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct HistoryQuery {
    scope: Option<ScopeLevel>,
    /// Table or question id for non-database scopes.
    id: Option<String>,
}

/// One point per iteration and scope: the last value computed in it.
async fn history(
    State(app): State<Arc<App>>,
    Path(metric): Path<String>,
    q: Result<Query<HistoryQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Json<Value>> {
    let q = query(q)?;
    let snap = snapshot(&app)?;
    ensure_metric(&snap, &metric)?;
    let level = q.scope.unwrap_or(ScopeLevel::Database);
    let mut series: Vec<&MetricValue> = Vec::new();
    for v in snap.metric_history.iter().filter(|v| v.metric_id == metric && v.scope.level == level) {
        if q.id.as_ref().is_some_and(|id| !v.scope.ids.contains(id)) {
            continue;
        }
        match series.iter_mut().rev().find(|p| p.iteration == v.iteration && p.scope == v.scope) {
            Some(point) => *point = v,
            None => series.push(v),
        }
    }
    Ok(Json(json!({ "metric_id": metric, "scope": level, "series": series })))
}

async fn get_contract(State(app): State<Arc<App>>) -> ApiResult<Json<Value>> {
    let snap = snapshot(&app)?;
    Ok(Json(json!({ "contract": snap.state.contract(), "gap": snap.gap })))
}

async fn put_contract(State(app): State<Arc<App>>, body: Bytes) -> ApiResult<Json<Value>> {
    let contract: Contract = require(&body)?;
    let gap = app.set_contract(contract.clone()).await?;
    Ok(Json(json!({ "contract": contract, "total_gap": gap.total(), "gap": gap })))
}

async fn run_action(State(app): State<Arc<App>>, Path(action): Path<String>, body: Bytes) -> ApiResult<Response> {
    let action: RunAction = serde_json::from_value(Value::String(action.clone()))
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown run action `{action}`")))?;
    match action {
        RunAction::Start => {
            let config = app.start(parse(&body)?).await?;
            Ok((StatusCode::ACCEPTED, Json(json!({ "phase": app.phase(), "config": config })))
                .into_response())
        }
        RunAction::Step => {
            let request: RunRequest = parse(&body)?;
            Ok(Json(app.step(request).await?).into_response())
        }
        control => {
            let phase = app.control(control)?;
            Ok(Json(json!({ "phase": phase })).into_response())
        }
    }
}

async fn journal(State(app): State<Arc<App>>) -> ApiResult<Json<Value>> {
    let snap = snapshot(&app)?;
    Ok(Json(json!({ "journal": snap.journal })))
}

async fn approvals(State(app): State<Arc<App>>) -> ApiResult<Json<Value>> {
    let pending: Vec<_> = app.pending()?.into_iter().collect();
    Ok(Json(json!({ "pending": pending })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionRequest {
    decision: Decision,
    #[serde(default)]
    actor: Option<String>,
}

async fn decide(State(app): State<Arc<App>>, Path(iteration): Path<u32>, body: Bytes) -> ApiResult<Json<Value>> {
    let request: DecisionRequest = require(&body)?;
    let actor = request.actor.unwrap_or_else(|| "operator".into());
    app.decide(iteration, request.decision, &actor)?;
    Ok(Json(json!({ "iteration": iteration, "decision": request.decision, "actor": actor })))
}

async fn tools(State(app): State<Arc<App>>) -> ApiResult<Json<Value>> {
    let snap = snapshot(&app)?;
    Ok(Json(json!({ "tools": snap.tools })))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct QuestionsQuery {
    topic: Option<String>,
    limit: Option<usize>,
}

#[derive(Serialize)]
struct QuestionView<'a> {
    question_id: &'a QuestionId,
    text: &'a str,
    origin: QuestionOrigin,
    parent_question: Option<&'a QuestionId>,
    schema_targets: Vec<&'a SchemaTarget>,
    topic: Option<&'a str>,
    latest_sql: Option<&'a str>,
    version_no: Option<u32>,
    exec_ms: Option<f64>,
    timed_out: bool,
    versions: usize,
}

async fn questions(
    State(app): State<Arc<App>>,
    q: Result<Query<QuestionsQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Json<Value>> {
    let q = query(q)?;
    let snap = snapshot(&app)?;
    let st = &snap.state;
    let views: Vec<QuestionView> = st
        .questions()
        .map(|question| {
            let versions = st.query_versions(&question.question_id);
            let latest = versions.last();
            QuestionView {
                question_id: &question.question_id,
                text: &question.text,
                origin: question.origin,
                parent_question: question.parent_question.as_ref(),
                schema_targets: question.schema_targets.iter().collect(),
                topic: st.topics().get(&question.question_id).map(String::as_str),
                latest_sql: latest.map(|v| v.sql_text.as_str()),
                version_no: latest.map(|v| v.version_no),
                exec_ms: latest.and_then(|v| v.exec_ms),
                timed_out: latest.is_some_and(|v| v.timed_out),
                versions: versions.len(),
            }
        })
        .filter(|v| q.topic.as_deref().is_none_or(|t| v.topic == Some(t)))
        .take(q.limit.unwrap_or(usize::MAX))
        .collect();
    Ok(Json(json!({ "state_version": st.version(), "questions": views })))
}

async fn topics(State(app): State<Arc<App>>) -> ApiResult<Json<Value>> {
    let snap = snapshot(&app)?;
    let mut groups: std::collections::BTreeMap<&str, Vec<&QuestionId>> = Default::default();
    for (q, label) in snap.state.topics() {
        groups.entry(label).or_default().push(q);
    }
    let topics: Vec<Value> = groups
        .into_iter()
        .map(|(label, ids)| json!({ "label": label, "count": ids.len(), "question_ids": ids }))
        .collect();
    Ok(Json(json!({ "topics": topics })))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct LimitQuery {
    limit: Option<usize>,
}

async fn commits(
    State(app): State<Arc<App>>,
    q: Result<Query<LimitQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Json<Value>> {
    let q = query(q)?;
    let snap = snapshot(&app)?;
    let skip = q.limit.map_or(0, |n| snap.commits.len().saturating_sub(n));
    Ok(Json(json!({ "commits": &snap.commits[skip..] })))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct EventsQuery {
    since: Option<u64>,
    /// `false` returns the buffered events and closes the stream.
    follow: Option<bool>,
}

fn sse_event(e: &ApiEvent) -> Result<Event, Infallible> {
    Ok(Event::default()
        .id(e.seq.to_string())
        .event(e.kind.clone())
        .data(serde_json::to_string(e).expect("events serialize")))
}

async fn events(
    State(app): State<Arc<App>>,
    headers: HeaderMap,
    q: Result<Query<EventsQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Response> {
    let q = query(q)?;
    let last_id = headers.get("last-event-id").and_then(|v| v.to_str().ok()).and_then(|v| v.trim().parse().ok());
    let since = q.since.or(last_id).unwrap_or(0);
    if q.follow == Some(false) {
        let backlog: Vec<_> = app.hub.since(since).iter().map(sse_event).collect();
        return Ok(Sse::new(stream::iter(backlog)).into_response());
    }
    let live = app.hub.subscribe(since).map(|e| sse_event(&e)).take_until(app.shutdown_signal());
    let keep_alive = KeepAlive::new().interval(Duration::from_millis(app.config.heartbeat_ms.max(1))).text("heartbeat");
    Ok(Sse::new(live).keep_alive(keep_alive).into_response())
}

fn content_type(path: &FsPath) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json" | "map") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("ico") => "image/x-icon",
        Some("woff2") => "font/woff2",
        _ => "application/octet-stream",
    }
}

/// Serves the dashboard build; unknown paths fall back to `index.html`.
async fn static_file(State(app): State<Arc<App>>, uri: Uri) -> Response {
    let Some(root) = app.config.ui_dir.clone() else { return StatusCode::NOT_FOUND.into_response() };
    let rel = FsPath::new(uri.path().trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return StatusCode::NOT_FOUND.into_response();
    }
    let mut path = root.join(rel);
    if !path.is_file() {
        path = root.join("index.html");
    }
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}
