use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use procut::gateway::{
    Backend, CompletionRequest, GatewayError, MockOracle, OpenAiBackend, Phase, RetryPolicy,
};
use procut::Gateway;
use serde_json::{json, Value};

/// Echoes the prompt back after a pause and records peak concurrency.
#[derive(Default)]
struct Echo {
    active: AtomicUsize,
    peak: AtomicUsize,
    calls: AtomicUsize,
}

impl Backend for Echo {
    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.calls.fetch_add(1, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(10));
        self.active.fetch_sub(1, Ordering::SeqCst);
        Ok(format!("echo {}", req.prompt))
    }
}

#[test]
fn batch_keeps_order_and_bounds_concurrency() {
    let echo = Arc::new(Echo::default());
    let gw = Gateway::new(echo.clone());
    let reqs: Vec<CompletionRequest> = (0..25).map(|i| gw.request(format!("p{i}"))).collect();
    let out = gw.batch_complete(Phase::Evaluation, &reqs, 10).unwrap();
    assert_eq!(out, (0..25).map(|i| format!("echo p{i}")).collect::<Vec<_>>());
    let peak = echo.peak.load(Ordering::SeqCst);
    assert!((2..=10).contains(&peak), "peak {peak}");
    assert_eq!(gw.ledger().evaluation.calls, 25);

    // repeats inside and across batches are served once
    let again: Vec<CompletionRequest> = (0..5).flat_map(|i| [gw.request(format!("p{i}")), gw.request(format!("p{i}"))]).collect();
    gw.batch_complete(Phase::Evaluation, &again, 10).unwrap();
    assert_eq!(echo.calls.load(Ordering::SeqCst), 25);
}

#[test]
fn cache_file_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    let responses: BTreeMap<String, String> = [("a", "1"), ("b", "2")].map(|(k, v)| (k.into(), v.into())).into();

    let first = Gateway::mock(MockOracle::scripted(responses.clone())).with_cache_file(&path).unwrap();
    assert_eq!(first.complete(Phase::Evaluation, &first.request("a")).unwrap(), "1");
    assert_eq!(first.complete(Phase::Evaluation, &first.request("b")).unwrap(), "2");
    drop(first);

    // an empty oracle would miss; the cache must answer
    let second = Gateway::mock(MockOracle::scripted(BTreeMap::new())).with_cache_file(&path).unwrap();
    assert_eq!(second.complete(Phase::Evaluation, &second.request("b")).unwrap(), "2");
    let ledger = second.ledger();
    assert_eq!((ledger.total_calls, ledger.cache_hits), (0, 1));
    assert!(second.complete(Phase::Evaluation, &second.request("c")).is_err());
}

#[derive(Default)]
struct Upstream {
    seen: Mutex<Vec<(Option<String>, Value)>>,
    throttle_first: AtomicUsize,
}

async fn chat(State(up): State<Arc<Upstream>>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let auth = headers.get("authorization").map(|v| v.to_str().unwrap().to_string());
    up.seen.lock().unwrap().push((auth, body.clone()));
    let prompt = body["messages"][0]["content"].as_str().unwrap_or_default().to_string();
    if prompt == "throttle" && up.throttle_first.fetch_add(1, Ordering::SeqCst) == 0 {
        return (StatusCode::TOO_MANY_REQUESTS, Json(json!({"error": "slow down"})));
    }
    match prompt.as_str() {
        "broken" => (StatusCode::BAD_REQUEST, Json(json!({"error": "bad"}))),
        "empty" => (StatusCode::OK, Json(json!({"choices": []}))),
        _ => (StatusCode::OK, Json(json!({"choices": [{"message": {"content": format!("re: {prompt}")}}]}))),
    }
}

fn upstream() -> (String, Arc<Upstream>) {
    let up = Arc::new(Upstream::default());
    let state = up.clone();
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            let app = Router::new().route("/v1/chat/completions", post(chat)).with_state(state);
            axum::serve(listener, app).await.unwrap();
        });
    });
    (format!("http://{}/v1", rx.recv().unwrap()), up)
}

#[test]
fn http_backend_round_trip() {
    let (base, up) = upstream();
    let backend = OpenAiBackend::new(base, Some("sk-test".into()));
    let gw = Gateway::new(Arc::new(backend)).with_model("m1").with_retry(RetryPolicy::no_delay(2));

    assert_eq!(gw.complete(Phase::Evaluation, &gw.request("hello")).unwrap(), "re: hello");
    {
        let seen = up.seen.lock().unwrap();
        let (auth, body) = &seen[0];
        assert_eq!(auth.as_deref(), Some("Bearer sk-test"));
        assert_eq!(body["model"], "m1");
        assert_eq!(body["temperature"], 0.0);
    }

    // a 429 is retried and the retry is counted
    assert_eq!(gw.complete(Phase::Evaluation, &gw.request("throttle")).unwrap(), "re: throttle");
    assert_eq!(gw.ledger().retries, 1);

    let err = gw.complete(Phase::Evaluation, &gw.request("broken")).unwrap_err();
    assert!(matches!(err, GatewayError::Http { status: 400, .. }), "{err:?}");
    let err = gw.complete(Phase::Evaluation, &gw.request("empty")).unwrap_err();
    assert!(matches!(err, GatewayError::Malformed(_)), "{err:?}");
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let gw = Gateway::new(Arc::new(OpenAiBackend::new("http://127.0.0.1:9/v1", None))).with_retry(RetryPolicy::no_delay(1));
    let err = gw.complete(Phase::Evaluation, &gw.request("x")).unwrap_err();
    assert!(err.is_transient(), "{err:?}");
    let ledger = gw.ledger();
    assert_eq!((ledger.total_calls, ledger.retries), (1, 1));
}
