//! In-process HTTP helpers: requests go straight into the router.

#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{HeaderMap, Request, StatusCode};
use axum::Router;
use carecontext_core::engine::Engine;
use carecontext_service::{router, AppState};
use tower::ServiceExt;

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("non-JSON body ({e}): {}", String::from_utf8_lossy(&self.body)))
    }
}

pub fn app(engine: Engine) -> Router {
    router(Arc::new(AppState::new(engine)))
}

pub async fn call(app: &Router, method: &str, uri: &str, content_type: Option<&str>, body: Vec<u8>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(ct) = content_type {
        req = req.header("content-type", ct);
    }
    let resp = app.clone().oneshot(req.body(Body::from(body)).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
    Reply { status, headers, body }
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    call(app, "GET", uri, None, Vec::new()).await
}

pub async fn post_json(app: &Router, uri: &str, body: serde_json::Value) -> Reply {
    call(app, "POST", uri, Some("application/json"), serde_json::to_vec(&body).unwrap()).await
}

pub async fn post_text(app: &Router, uri: &str, body: &[u8]) -> Reply {
    call(app, "POST", uri, Some("text/plain"), body.to_vec()).await
}

/// Entry ids of both evidence lists of an `/ask` body, dropped items excluded.
pub fn provided_ids(ask: &serde_json::Value) -> Vec<String> {
    ["patient_evidence", "medical_evidence"]
        .iter()
        .flat_map(|k| ask[*k].as_array().cloned().unwrap_or_default())
        .filter(|e| !e["dropped"].as_bool().unwrap_or(false))
        .map(|e| e["entry_id"].as_str().unwrap().to_string())
        .collect()
}
