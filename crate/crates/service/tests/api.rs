#[path = "../../core/tests/common/mod.rs"]
mod common;
mod support;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::http::StatusCode;
use carecontext_core::config::Config;
use carecontext_core::embedding::MockEmbedder;
use carecontext_core::engine::{Engine, Providers};
use carecontext_core::llm::{ChatProvider, ChatRequest, FnChat, MockChat, Purpose};
use carecontext_core::provider::ProviderMode;
use carecontext_service::LATENCY_HEADER;
use common::scenarios::{fixtures, mock_config, replay_config, transcript, FOLLOW_UP_QUESTION, WALKTHROUGH_QUESTION};
use serde_json::json;
use support::*;

fn seeded_replay(dir: &std::path::Path) -> Engine {
    let engine = Engine::open(replay_config(dir)).unwrap();
    engine.ingest_knowledge_dir(&fixtures().join("knowledge")).unwrap();
    engine
}

#[tokio::test]
async fn onboarding_and_ask_contract() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(seeded_replay(dir.path()));
    let (bytes, _) = transcript("p1_allergy.txt");
    let created = post_text(&app, "/patients?patient_id=p1", &bytes).await;
    assert_eq!(created.status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&created.body));
    let c = created.json();
    assert_eq!(c["patient_id"], "p1");
    assert!(c["sections"]["medications_and_instructions"].as_str().unwrap().contains("EpiPen"));

    let ctx = get(&app, "/patients/p1").await;
    assert_eq!(ctx.status, StatusCode::OK);
    assert_eq!(ctx.json()["sections"], c["sections"]);
    assert_eq!(get(&app, "/patients").await.json()["patients"], json!(["p1"]));

    let ask = post_json(&app, "/patients/p1/ask", json!({ "question": WALKTHROUGH_QUESTION })).await;
    assert_eq!(ask.status, StatusCode::OK, "{}", String::from_utf8_lossy(&ask.body));
    assert!(ask.headers.contains_key(LATENCY_HEADER));
    let a = ask.json();
    assert!(a["answer"].as_str().unwrap().contains("EpiPen"));
    assert!(!a["disclaimer"].as_str().unwrap().is_empty());
    assert!(!a["medical_evidence"].as_array().unwrap().is_empty());
    let provided = provided_ids(&a);
    let citations: Vec<String> = serde_json::from_value(a["citations"].clone()).unwrap();
    assert!(!citations.is_empty());
    assert!(citations.iter().all(|c| provided.contains(c)), "{citations:?} vs {provided:?}");
}

#[tokio::test]
async fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = mock_config(dir.path());
    config.service.max_body_bytes = 4096;
    let app = app(Engine::open(config).unwrap());

    let empty = post_text(&app, "/patients?patient_id=p1", b"   ").await;
    assert_eq!(empty.status, StatusCode::BAD_REQUEST);
    assert_eq!(empty.json()["stage"], "ingestion");

    let big = post_text(&app, "/patients?patient_id=p1", &vec![b'a'; 10_000]).await;
    assert_eq!(big.status, StatusCode::PAYLOAD_TOO_LARGE);

    let bad = post_text(&app, "/patients?patient_id=../x", b"Some transcript.").await;
    assert_eq!(bad.status, StatusCode::BAD_REQUEST);

    let unknown = post_json(&app, "/patients/nobody/ask", json!({ "question": "Hello?" })).await;
    assert_eq!(unknown.status, StatusCode::NOT_FOUND);
    let body = unknown.json();
    assert_eq!(body["stage"], "patient_retrieval");
    assert!(body["trace_id"].as_str().unwrap().starts_with("tr-"));

    let (bytes, _) = transcript("p1_allergy.txt");
    assert_eq!(post_text(&app, "/patients?patient_id=p1", &bytes).await.status, StatusCode::CREATED);
    let blank = post_json(&app, "/patients/p1/ask", json!({ "question": "  \n " })).await;
    assert_eq!(blank.status, StatusCode::UNPROCESSABLE_ENTITY);
    let malformed = call(&app, "POST", "/patients/p1/ask", Some("application/json"), b"{not json".to_vec()).await;
    assert_eq!(malformed.status, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/patients/nobody").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn provider_outage_is_a_staged_502() {
    let dir = tempfile::tempdir().unwrap();
    let providers = Providers {
        embedder: Arc::new(MockEmbedder::new(0, 64).unwrap()),
        chat: Arc::new(|m: &str| Ok(Arc::new(FnChat::failing(m, "forced outage")) as Arc<dyn ChatProvider>)),
        recorder: None,
        configured: true,
    };
    let app = app(Engine::with_providers(mock_config(dir.path()), providers).unwrap());
    let r = post_text(&app, "/patients?patient_id=p1", b"The patient has a rash.").await;
    assert_eq!(r.status, StatusCode::BAD_GATEWAY);
    assert_eq!(r.json()["stage"], "annotation");
}

#[tokio::test]
async fn restart_and_replay_gives_identical_bodies() {
    let dir = tempfile::tempdir().unwrap();
    let first = {
        let app = app(seeded_replay(dir.path()));
        let (bytes, _) = transcript("p1_allergy.txt");
        assert_eq!(post_text(&app, "/patients?patient_id=p1", &bytes).await.status, StatusCode::CREATED);
        let mut bodies = Vec::new();
        for q in [WALKTHROUGH_QUESTION, FOLLOW_UP_QUESTION] {
            bodies.push(post_json(&app, "/patients/p1/ask", json!({ "question": q })).await.body);
        }
        bodies
    };
    // New engine and router over the same data directory.
    let app = app(Engine::open(replay_config(dir.path())).unwrap());
    for (q, before) in [WALKTHROUGH_QUESTION, FOLLOW_UP_QUESTION].iter().zip(first) {
        let again = post_json(&app, "/patients/p1/ask", json!({ "question": q })).await;
        assert_eq!(again.status, StatusCode::OK);
        assert_eq!(again.body, before);
    }
}

#[tokio::test]
async fn knowledge_ingest_counts_and_multi_status() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(Engine::open(mock_config(dir.path())).unwrap());
    let ok = post_json(
        &app,
        "/knowledge/ingest",
        json!({ "documents": [
            { "name": "a.txt", "text": "Hay fever is an allergy to pollen.", "metadata": { "id": "kb-a" } },
            { "name": "b.md", "text": "# Sunscreen\n\nApply sunscreen daily.", "format": "markdown" }
        ]}),
    )
    .await;
    assert_eq!(ok.status, StatusCode::OK);
    let body = ok.json();
    assert_eq!(body["documents"], 2);
    assert!(body["chunks"].as_u64().unwrap() > 0);

    let partial = post_json(
        &app,
        "/knowledge/ingest",
        json!({ "documents": [
            { "name": "good.txt", "text": "Wash hands often." },
            { "name": "blank.txt", "text": "   " }
        ]}),
    )
    .await;
    assert_eq!(partial.status, StatusCode::MULTI_STATUS);
    let items = partial.json()["items"].clone();
    assert_eq!(items[0]["ok"], true);
    assert_eq!(items[1]["ok"], false);
    assert_eq!(items[1]["error"]["stage"], "ingestion");
}

#[tokio::test]
async fn eval_job_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(mock_config(dir.path())).unwrap();
    common::scenarios::seed(&engine, true).unwrap();
    std::fs::copy(fixtures().join("mini_dataset.tsv"), dir.path().join("mini_dataset.tsv")).unwrap();
    let app = app(engine);
    let started = post_json(&app, "/eval/run", json!({ "dataset": "mini_dataset.tsv", "models": ["mock-a", "mock-b"] })).await;
    assert_eq!(started.status, StatusCode::ACCEPTED);
    let job = started.json()["job_id"].as_str().unwrap().to_string();
    let mut status = serde_json::Value::Null;
    for _ in 0..200 {
        status = get(&app, &format!("/eval/jobs/{job}")).await.json();
        if status["status"] == "done" || status["status"] == "failed" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    assert_eq!(status["status"], "done", "{status}");
    let report = get(&app, &format!("/reports/{}", status["report_id"].as_str().unwrap())).await;
    assert_eq!(report.status, StatusCode::OK);
    let r = report.json();
    assert_eq!(r["report"]["models"].as_array().unwrap().len(), 2);
    assert!(r["table"].as_str().unwrap().contains("| similarity | mock-a |"));

    let escape = post_json(&app, "/eval/run", json!({ "dataset": "../etc/passwd", "models": ["m"] })).await;
    assert_eq!(escape.status, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/eval/jobs/job-999").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn health_reports_degraded_without_providers() {
    let dir = tempfile::tempdir().unwrap();
    let config = Config { mode: ProviderMode::Live, ..mock_config(dir.path()) };
    let engine = Engine::with_providers(config.clone(), Providers::unconfigured(&config, "no API key")).unwrap();
    let r = get(&app(engine), "/health").await;
    assert_eq!(r.status, StatusCode::OK);
    let h = r.json();
    assert_eq!(h["status"], "degraded");
    assert!(!h["version"].as_str().unwrap().is_empty());

    let ok = get(&app(Engine::open(mock_config(dir.path())).unwrap()), "/health").await.json();
    assert_eq!(ok["status"], "ok");
}

#[tokio::test]
async fn cors_allow_list_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = mock_config(dir.path());
    config.service.cors_allow = vec!["http://localhost:5173".into()];
    let app = app(Engine::open(config).unwrap());
    let req = axum::http::Request::builder()
        .uri("/health")
        .header("origin", "http://localhost:5173")
        .body(axum::body::Body::empty())
        .unwrap();
    let resp = tower::ServiceExt::oneshot(app, req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "http://localhost:5173");
}

/// Chat whose answer step sleeps, tracking how many run at once.
fn slow_providers(in_flight: Arc<AtomicUsize>, peak: Arc<AtomicUsize>) -> Providers {
    Providers {
        embedder: Arc::new(MockEmbedder::new(0, 256).unwrap()),
        chat: Arc::new(move |m: &str| {
            let (in_flight, peak, mock) = (in_flight.clone(), peak.clone(), MockChat::new(m));
            Ok(Arc::new(FnChat::new(m, move |req: &ChatRequest| {
                if req.purpose == Purpose::Answer {
                    let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(300));
                    in_flight.fetch_sub(1, Ordering::SeqCst);
                }
                mock.complete(req).map(|r| r.content)
            })) as Arc<dyn ChatProvider>)
        }),
        recorder: None,
        configured: true,
    }
}

fn event_time(trace: &str, event: &str) -> chrono::DateTime<chrono::Utc> {
    trace
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|r| r["event"] == event)
        .and_then(|r| r["at"].as_str().map(|s| s.parse().unwrap()))
        .unwrap_or_else(|| panic!("no timestamped {event} event"))
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn third_concurrent_ask_queues() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = mock_config(dir.path());
    config.trace_timestamps = true;
    config.service.max_concurrent_pipelines = 2;
    let (in_flight, peak) = (Arc::new(AtomicUsize::new(0)), Arc::new(AtomicUsize::new(0)));
    let engine = Engine::with_providers(config, slow_providers(in_flight, peak.clone())).unwrap();
    let (bytes, meta) = transcript("p1_allergy.txt");
    engine.add_patient(&bytes, carecontext_core::corpus::DocumentFormat::PlainText, meta).unwrap();
    let app = app(engine);

    let questions = ["How do I use the EpiPen?", "Can I take Keflex?", "What tests were done?"];
    let calls = questions.map(|q| {
        let app = app.clone();
        tokio::spawn(async move { post_json(&app, "/patients/p1/ask", json!({ "question": q })).await })
    });
    let mut spans = Vec::new();
    for c in calls {
        let r = c.await.unwrap();
        assert_eq!(r.status, StatusCode::OK);
        let id = r.json()["trace_id"].as_str().unwrap().to_string();
        let trace = std::fs::read_to_string(dir.path().join("traces").join(format!("{id}.jsonl"))).unwrap();
        spans.push((event_time(&trace, "request"), event_time(&trace, "generation")));
    }
    assert_eq!(peak.load(Ordering::SeqCst), 2, "exactly two pipelines overlapped");
    spans.sort();
    let earliest_end = spans[0].1.min(spans[1].1);
    assert!(spans[2].0 >= earliest_end, "third pipeline started before a slot was free: {spans:?}");
}
