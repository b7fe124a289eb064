#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tempfile::TempDir;
use tower::ServiceExt;

use escalate_core::features::build_training_set;
use escalate_core::forest::train_forest;
use escalate_core::ingestion::generate_mock_repository;
use escalate_core::model::timestamp;
use escalate_core::{ForestModel, MockConfig, RepositorySnapshot, Store, TrainConfig};
use escalate_server::runner::{Clock, ScoringRunner};
use escalate_server::{router, AppState};

pub const NOW: &str = "2018-01-02T09:30:00Z";

pub fn small_repo() -> RepositorySnapshot {
    generate_mock_repository(&MockConfig {
        seed: 5,
        n_customers: 25,
        n_tickets: 300,
        ..MockConfig::default()
    })
    .unwrap()
}

pub fn small_model(repo: &RepositorySnapshot) -> ForestModel {
    let vectors = build_training_set(repo).unwrap();
    train_forest(&vectors, &TrainConfig { n_trees: 15, ..TrainConfig::default() }).unwrap()
}

pub struct Fixture {
    pub dir: TempDir,
    pub repo: Arc<RepositorySnapshot>,
    pub store: Arc<Store>,
    pub state: AppState,
}

impl Fixture {
    pub fn app(&self) -> Router {
        router(self.state.clone())
    }

    pub fn open_ids(&self) -> Vec<String> {
        self.repo.open_tickets().map(|t| t.ticket_id.clone()).collect()
    }
}

pub fn fixture(with_model: bool, delay: Duration) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let repo = Arc::new(small_repo());
    let model = with_model.then(|| Arc::new(small_model(&repo)));
    let store = Arc::new(Store::open(dir.path().join("store.log"), Arc::clone(&repo)).unwrap());
    let now = timestamp::parse(NOW).unwrap();
    let clock: Clock = Arc::new(move || now);
    let runner = Arc::new(ScoringRunner::new(Arc::clone(&store), model, Arc::clone(&clock)).with_delay(delay));
    let state = AppState::new(Arc::clone(&store), runner, clock);
    Fixture { dir, repo, store, state }
}

/// One in-process request. Returns the status and the JSON body (Null when
/// empty).
pub async fn call(app: &Router, method: &str, uri: &str, user: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(u) = user {
        req = req.header("X-User", u);
    }
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let json = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, json)
}

/// Minimal HTTP/1.0 client over a raw socket.
pub fn http(addr: &str, method: &str, path: &str, user: &str) -> (u16, Value) {
    let mut stream = TcpStream::connect(addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(60))).unwrap();
    write!(
        stream,
        "{method} {path} HTTP/1.0\r\nHost: {addr}\r\nX-User: {user}\r\nContent-Length: 0\r\nConnection: close\r\n\r\n"
    )
    .unwrap();
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).unwrap();
    let text = String::from_utf8(raw).unwrap();
    let (head, body) = text.split_once("\r\n\r\n").expect("http response");
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    let json = if body.is_empty() { Value::Null } else { serde_json::from_str(body).unwrap() };
    (status, json)
}
