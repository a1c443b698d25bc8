//! Remote backends against a local stub server.

mod common;

use std::time::Duration;

use llm_corrector::embed::{local_hash_embedding, Embedder, EmbedderConfig, RemoteEmbedderConfig};
use llm_corrector::http::RetryPolicy;
use llm_corrector::ingest::TaskSpec;
use llm_corrector::knowledge::{build_database, retrieve, RetrievalStrategy};
use llm_corrector::llmclient::{LlmBackendConfig, LlmClient, QueryMeta, RemoteChatConfig};
use llm_corrector::prompt::{PromptBundle, PromptKind};
use llm_corrector::Error;
use serde_json::{json, Value};

use common::stub_server;

const SECRET: &str = "sk-test-do-not-leak-0123";

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 5,
        base_delay: Duration::from_millis(1),
        factor: 2.0,
    }
}

/// Replies with local-hash vectors so remote and local results can be compared.
fn embedding_reply(body: &str) -> String {
    let req: Value = serde_json::from_str(body).unwrap();
    let data: Vec<Value> = req["input"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| json!({ "embedding": local_hash_embedding(t.as_str().unwrap(), 32, 3).values() }))
        .collect();
    json!({ "data": data }).to_string()
}

fn remote_embedder(url: &str, key_env: &str) -> Embedder {
    let mut cfg = RemoteEmbedderConfig::new(url, "stub-embed", key_env);
    cfg.retry = fast_retry();
    cfg.batch_size = 7;
    Embedder::new(EmbedderConfig::RemoteHttp(cfg)).unwrap()
}

#[test]
fn remote_embedder_matches_local_backend() {
    std::env::set_var("STUB_EMBED_KEY_A", SECRET);
    let server = stub_server(|_, body| (200, embedding_reply(body)));
    let remote = remote_embedder(&server.url, "STUB_EMBED_KEY_A");
    let local = Embedder::new(EmbedderConfig::LocalHash { dim: 32, ngram: 3 }).unwrap();

    let data = common::synthetic(TaskSpec::classification(), 20, 10, 5, 3);
    let texts: Vec<String> = data.bundle.records.iter().map(|r| r.smiles.clone()).collect();
    let a = remote.embed_batch(&texts).unwrap();
    let b = local.embed_batch(&texts).unwrap();
    assert_eq!(a, b, "batches are reassembled in input order");

    // Same retrieval either way (fingerprints differ, contents do not).
    let db_r = build_database(&data.bundle, &data.valid, &remote, false).unwrap();
    let db_l = build_database(&data.bundle, &data.valid, &local, false).unwrap();
    let q = local.embed_text("CCOc1ccccc1").unwrap();
    let ids = |db| retrieve(db, &q, 5, RetrievalStrategy::TopK, None).unwrap().ids();
    assert_eq!(ids(&db_r), ids(&db_l));

    let reqs = server.requests.lock().unwrap();
    assert!(reqs.len() >= 2);
    let first: Value = serde_json::from_str(&reqs[0].body).unwrap();
    assert_eq!(first["model"], "stub-embed");
    assert!(reqs[0]
        .headers
        .iter()
        .any(|h| h.eq_ignore_ascii_case(&format!("authorization: Bearer {SECRET}"))));
}

#[test]
fn remote_embedder_retries_server_errors() {
    std::env::set_var("STUB_EMBED_KEY_B", SECRET);
    let server = stub_server(|n, body| {
        if n < 2 {
            (503, "{}".into())
        } else {
            (200, embedding_reply(body))
        }
    });
    let e = remote_embedder(&server.url, "STUB_EMBED_KEY_B");
    let v = e.embed_text("CCO").unwrap();
    assert_eq!(v, local_hash_embedding("CCO", 32, 3));
    assert_eq!(server.requests.lock().unwrap().len(), 3);
}

#[test]
fn remote_embedder_malformed_body() {
    std::env::set_var("STUB_EMBED_KEY_C", SECRET);
    let server = stub_server(|_, _| (200, json!({ "data": [] }).to_string()));
    let e = remote_embedder(&server.url, "STUB_EMBED_KEY_C");
    assert!(matches!(e.embed_text("CCO"), Err(Error::MalformedBody(_))));
}

fn chat_client(url: &str, key_env: &str) -> LlmClient {
    let mut cfg = RemoteChatConfig::new(url, "stub-chat", key_env);
    cfg.retry = fast_retry();
    LlmClient::new(LlmBackendConfig::RemoteChat(cfg)).unwrap()
}

fn prompt() -> PromptBundle {
    PromptBundle {
        kind: PromptKind::Corrector,
        text: "Question: refine".into(),
        token_estimate: 4,
        context_ids: vec![],
    }
}

fn meta() -> QueryMeta {
    QueryMeta {
        id: "q1".into(),
        task: TaskSpec::regression(),
        primary: Some(1.0),
        truth: None,
    }
}

fn chat_reply(text: &str) -> String {
    json!({ "choices": [{ "message": { "role": "assistant", "content": text } }] }).to_string()
}

#[test]
fn chat_request_shape_and_retry() {
    std::env::set_var("STUB_CHAT_KEY_A", SECRET);
    let server = stub_server(|n, _| match n {
        0 => (429, "{}".into()),
        1 => (500, "{}".into()),
        _ => (200, chat_reply("Prediction: 1.5000")),
    });
    let c = chat_client(&server.url, "STUB_CHAT_KEY_A");
    let x = c.complete(&prompt(), &meta()).unwrap();
    assert_eq!(x.response_text, "Prediction: 1.5000");
    assert_eq!(x.attempts, 3);

    let reqs = server.requests.lock().unwrap();
    let body: Value = serde_json::from_str(&reqs[2].body).unwrap();
    assert_eq!(body["model"], "stub-chat");
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "Question: refine");
    assert_eq!(body["temperature"], 0.0);

    let serialized = serde_json::to_string(&x).unwrap();
    assert!(!serialized.contains(SECRET));
}

#[test]
fn chat_gives_up_after_five_attempts() {
    std::env::set_var("STUB_CHAT_KEY_B", SECRET);
    let server = stub_server(|_, _| (502, "{}".into()));
    let c = chat_client(&server.url, "STUB_CHAT_KEY_B");
    let err = c.complete(&prompt(), &meta()).unwrap_err();
    assert!(matches!(err, Error::Status { status: 502, .. }));
    assert_eq!(server.requests.lock().unwrap().len(), 5);
    assert!(!err.to_string().contains(SECRET));
}

#[test]
fn chat_client_errors_are_not_retried() {
    std::env::set_var("STUB_CHAT_KEY_C", SECRET);
    let server = stub_server(|_, _| (401, "{\"error\":\"bad key\"}".into()));
    let c = chat_client(&server.url, "STUB_CHAT_KEY_C");
    assert!(matches!(
        c.complete(&prompt(), &meta()),
        Err(Error::Status { status: 401, .. })
    ));
    assert_eq!(server.requests.lock().unwrap().len(), 1);
}

#[test]
fn chat_needs_key_in_environment() {
    let c = chat_client("http://127.0.0.1:9/unused", "STUB_CHAT_KEY_UNSET_XYZ");
    assert!(matches!(c.complete(&prompt(), &meta()), Err(Error::MissingKey(_))));
}

#[test]
fn transport_failure_is_reported() {
    std::env::set_var("STUB_CHAT_KEY_D", SECRET);
    // Nothing listens on this port once the listener is dropped.
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let c = chat_client(&format!("http://127.0.0.1:{port}/x"), "STUB_CHAT_KEY_D");
    assert!(matches!(c.complete(&prompt(), &meta()), Err(Error::Transport(_))));
}
