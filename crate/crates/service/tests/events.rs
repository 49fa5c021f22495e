mod common;

use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use common::{case_study_contract, parse_sse, Harness};
use http_body_util::BodyExt;
use serde_json::json;
use tower::ServiceExt;

/// Reads stream frames until `deadline` passes or the body ends.
async fn read_for(body: &mut Body, deadline: Duration) -> String {
    let mut text = String::new();
    let end = tokio::time::Instant::now() + deadline;
    while let Ok(Some(Ok(frame))) = tokio::time::timeout_at(end, body.frame()).await {
        if let Some(data) = frame.data_ref() {
            text.push_str(std::str::from_utf8(data).unwrap());
        }
    }
    text
}

async fn open(h: &Harness, uri: &str) -> Body {
    let resp = h.router.clone().oneshot(Request::get(uri).body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    resp.into_body()
}

#[tokio::test]
async fn idle_stream_carries_heartbeats_only() {
    let h = Harness::new();
    h.connect().await;
    let since = h.app.hub.last_seq();
    let mut body = open(&h, &format!("/api/v1/events?since={since}")).await;
    let text = read_for(&mut body, Duration::from_millis(400)).await;
    assert!(text.matches("heartbeat").count() >= 2, "{text:?}");
    assert!(parse_sse(&text).is_empty(), "{text:?}");
}

#[tokio::test(flavor = "multi_thread")]
async fn live_stream_delivers_iterations_in_order() {
    let h = Harness::new();
    h.connect().await;
    let since = h.app.hub.last_seq();
    let mut body = open(&h, &format!("/api/v1/events?since={since}")).await;
    h.post("/api/v1/run/start", json!({ "contract": case_study_contract() })).await;
    h.app.join_run().await;
    let text = read_for(&mut body, Duration::from_millis(300)).await;
    let events = parse_sse(&text);
    assert!(events.iter().all(|e| e.seq > since));
    assert!(events.windows(2).all(|w| w[0].seq < w[1].seq));
    let iterations: Vec<u64> = events
        .iter()
        .filter(|e| e.kind == "IterationCompleted")
        .map(|e| e.payload["record"]["iteration"].as_u64().unwrap())
        .collect();
    assert!(iterations.len() >= 3, "{iterations:?}");
    assert!(iterations.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(events.last().unwrap().kind, "RunTerminated");
    assert_eq!(events, h.app.hub.since(since));
    for e in &events {
        assert!(text.contains(&format!("id: {}\n", e.seq)) || text.contains(&format!("id:{}\n", e.seq)));
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn reconnecting_with_since_resumes_without_loss() {
    let h = Harness::new();
    h.connect().await;
    h.post("/api/v1/run/start", json!({ "contract": case_study_contract() })).await;
    h.app.join_run().await;
    let all = h.events_since(0).await;
    assert!(all.len() > 4);
    assert!(all.windows(2).all(|w| w[1].seq == w[0].seq + 1));
    let cut = all[all.len() / 2].seq;

    let mut seen: Vec<u64> = all.iter().filter(|e| e.seq <= cut).map(|e| e.seq).collect();
    let resumed = h.events_since(cut).await;
    assert!(resumed.iter().all(|e| e.seq > cut));
    seen.extend(resumed.iter().map(|e| e.seq));
    assert_eq!(seen, all.iter().map(|e| e.seq).collect::<Vec<_>>());

    let req = Request::get("/api/v1/events?follow=false").header("last-event-id", cut.to_string()).body(Body::empty()).unwrap();
    let resp = h.router.clone().oneshot(req).await.unwrap();
    let text = String::from_utf8(resp.into_body().collect().await.unwrap().to_bytes().to_vec()).unwrap();
    assert_eq!(parse_sse(&text), resumed);

    let mut body = open(&h, &format!("/api/v1/events?since={cut}")).await;
    let live = parse_sse(&read_for(&mut body, Duration::from_millis(200)).await);
    assert_eq!(live, resumed);
}

#[tokio::test(flavor = "multi_thread")]
async fn each_occurrence_is_streamed_once() {
    let h = Harness::new();
    h.connect().await;
    h.post("/api/v1/run/start", json!({ "contract": case_study_contract() })).await;
    h.app.join_run().await;
    let events = h.events_since(0).await;
    let (_, commits) = h.get("/api/v1/commits").await;
    let commit_ids: Vec<&str> = commits["commits"].as_array().unwrap().iter().map(|c| c["commit_id"].as_str().unwrap()).collect();
    let streamed: Vec<&str> = events
        .iter()
        .filter(|e| e.kind == "CommitCreated")
        .map(|e| e.payload["commit"]["commit_id"].as_str().unwrap())
        .collect();
    assert_eq!(streamed, commit_ids);
    let iterations: Vec<u64> = events
        .iter()
        .filter(|e| e.kind == "IterationCompleted")
        .map(|e| e.payload["record"]["iteration"].as_u64().unwrap())
        .collect();
    let updated: Vec<u64> =
        events.iter().filter(|e| e.kind == "MetricUpdated").map(|e| e.payload["iteration"].as_u64().unwrap()).collect();
    assert!(!updated.is_empty());
    assert!(updated.windows(2).all(|w| w[0] < w[1]), "{updated:?}");
    assert!(updated.iter().all(|i| iterations.contains(i)), "{updated:?} vs {iterations:?}");
}

#[tokio::test]
async fn shutdown_ends_open_streams() {
    let h = Harness::new();
    let body = open(&h, "/api/v1/events").await;
    h.app.shutdown().await;
    let rest = tokio::time::timeout(Duration::from_secs(5), body.collect()).await;
    assert!(rest.is_ok(), "stream stayed open after shutdown");
}
