use std::io::{Read, Write};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use hred::corpus::{Tokenizer, Vocabulary, EOS_ID};
use hred::eval::{beam_search, decode, DecodeMode, DecodeSettings};
use hred::models::{Checkpoint, DialogueModel, ModelConfig, Variant};
use hred::service::{router, serve, turn_seed, Service, ServiceConfig};
use hred::tensor::Rng;

const WORDS: [&str; 10] = ["hi", "how", "are", "you", "?", "fine", "thanks", ".", "what", "film"];

fn model_and_vocab() -> (DialogueModel, Vocabulary) {
    let vocab = Vocabulary::from_tokens(&WORDS).unwrap();
    let mut m = DialogueModel::new(ModelConfig::new(Variant::Hred, vocab.len()).dims(6, 8, 8), 3).unwrap();
    // Sharper distributions than the default init, so replies vary.
    let mut rng = Rng::new(4);
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        m.params
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.normal());
    }
    (m, vocab)
}

fn service() -> Arc<Service> {
    let (m, v) = model_and_vocab();
    Arc::new(Service::new(m, v, Tokenizer::new(), ServiceConfig::default()).unwrap())
}

async fn call(svc: &Arc<Service>, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let resp = router(Arc::clone(svc)).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, v)
}

async fn new_session(svc: &Arc<Service>, settings: Option<Value>) -> String {
    let (st, v) = call(svc, Method::POST, "/sessions", settings).await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

fn close(a: &Value, b: f64) -> bool {
    (a.as_f64().unwrap() - b).abs() < 1e-12
}

#[tokio::test]
async fn health_and_model_info() {
    let svc = service();
    let (st, v) = call(&svc, Method::GET, "/healthz", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v, json!({"status": "ok", "sessions": 0}));
    let (st, v) = call(&svc, Method::GET, "/model", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["variant"], "hred");
    assert_eq!(v["vocab_size"], 15);
    assert_eq!(v["d_h"], 8);
    assert_eq!(v["vocab_hash"], svc.vocab().hash_hex());
}

#[tokio::test]
async fn map_turns_match_in_process_beam_search() {
    let svc = service();
    let id = new_session(&svc, None).await;
    let (st, v) = call(
        &svc,
        Method::POST,
        &format!("/sessions/{id}/turns"),
        Some(json!({"utterance": "how are you ?"})),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let vocab = svc.vocab();
    let mut u1 = vocab.encode(&["how", "are", "you", "?"]);
    u1.push(EOS_ID);
    let want = beam_search(svc.model(), &[u1.clone()], 5, 40).unwrap();
    assert_eq!(v["tokens"], json!(want.tokens));
    assert!(close(&v["log_prob"], want.log_prob));
    assert_eq!(v["turn"], 2);
    assert_eq!(v["session_id"], id.as_str());

    // The second reply conditions on the whole exchange so far.
    let (_, v2) = call(
        &svc,
        Method::POST,
        &format!("/sessions/{id}/turns"),
        Some(json!({"utterance": "what film ?"})),
    )
    .await;
    let mut r1 = want.tokens.clone();
    if r1.last() != Some(&EOS_ID) {
        r1.push(EOS_ID);
    }
    let mut u2 = vocab.encode(&["what", "film", "?"]);
    u2.push(EOS_ID);
    let want2 = beam_search(svc.model(), &[u1, r1, u2], 5, 40).unwrap();
    assert_eq!(v2["tokens"], json!(want2.tokens));
    assert!(close(&v2["log_prob"], want2.log_prob));
    assert_eq!(v2["turn"], 4);
}

#[tokio::test]
async fn sampled_turns_are_reproducible_from_the_seed() {
    let svc = service();
    let settings = json!({"mode": "sample", "temperature": 0.7, "seed": 99, "max_len": 8});
    let a = new_session(&svc, Some(settings.clone())).await;
    let b = new_session(&svc, Some(settings)).await;
    let (_, ra) = call(
        &svc,
        Method::POST,
        &format!("/sessions/{a}/turns"),
        Some(json!({"utterance": "hi"})),
    )
    .await;
    let (_, rb) = call(
        &svc,
        Method::POST,
        &format!("/sessions/{b}/turns"),
        Some(json!({"utterance": "hi"})),
    )
    .await;
    assert_eq!(ra["tokens"], rb["tokens"]);
    let want = decode(
        svc.model(),
        &[vec![svc.vocab().encode_token("hi"), EOS_ID]],
        &DecodeSettings {
            mode: DecodeMode::Sample { temperature: 0.7 },
            max_len: 8,
            seed: turn_seed(99, 0),
        },
    )
    .unwrap();
    assert_eq!(ra["tokens"], json!(want.tokens));
    assert!(ra["tokens"].as_array().unwrap().len() <= 8);

    // Per-turn overrides switch the session to beam search.
    let (st, rc) = call(
        &svc,
        Method::POST,
        &format!("/sessions/{a}/turns"),
        Some(json!({"utterance": "fine", "settings": {"mode": "map", "width": 2}})),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{rc}");
    assert_eq!(rc["turn"], 4);
}

#[tokio::test]
async fn errors_are_json_with_matching_status() {
    let svc = service();
    let id = new_session(&svc, None).await;
    let turns = format!("/sessions/{id}/turns");
    let cases = [
        (
            Method::POST,
            "/sessions",
            Some(json!({"width": 0})),
            StatusCode::BAD_REQUEST,
        ),
        (
            Method::POST,
            "/sessions",
            Some(json!({"temperature": -1.0})),
            StatusCode::BAD_REQUEST,
        ),
        (
            Method::POST,
            "/sessions",
            Some(json!({"mode": "greedy"})),
            StatusCode::BAD_REQUEST,
        ),
        (
            Method::POST,
            "/sessions",
            Some(json!({"colour": "red"})),
            StatusCode::BAD_REQUEST,
        ),
        (
            Method::POST,
            turns.as_str(),
            Some(json!({"utterance": "   "})),
            StatusCode::BAD_REQUEST,
        ),
        (
            Method::POST,
            turns.as_str(),
            Some(json!({"text": "hi"})),
            StatusCode::BAD_REQUEST,
        ),
        (Method::POST, turns.as_str(), None, StatusCode::BAD_REQUEST),
        (
            Method::POST,
            "/sessions/nope/turns",
            Some(json!({"utterance": "hi"})),
            StatusCode::NOT_FOUND,
        ),
        (Method::DELETE, "/sessions/nope", None, StatusCode::NOT_FOUND),
    ];
    for (method, uri, body, want) in cases {
        let (st, v) = call(&svc, method.clone(), uri, body.clone()).await;
        assert_eq!(st, want, "{method} {uri} {body:?}: {v}");
        assert!(v["error"].as_str().is_some_and(|e| !e.is_empty()), "{v}");
    }
    let req = Request::builder()
        .method(Method::POST)
        .uri("/sessions")
        .body(Body::from("{not json"))
        .unwrap();
    assert_eq!(
        router(Arc::clone(&svc)).oneshot(req).await.unwrap().status(),
        StatusCode::BAD_REQUEST
    );
    // A rejected turn leaves the history untouched.
    assert_eq!(svc.session_state(&id).unwrap().history.len(), 0);
}

#[tokio::test]
async fn delete_ends_the_session() {
    let svc = service();
    let id = new_session(&svc, None).await;
    let (_, h) = call(&svc, Method::GET, "/healthz", None).await;
    assert_eq!(h["sessions"], 1);
    let (st, v) = call(&svc, Method::DELETE, &format!("/sessions/{id}"), None).await;
    assert_eq!(st, StatusCode::NO_CONTENT);
    assert_eq!(v, Value::Null);
    let (st, _) = call(
        &svc,
        Method::POST,
        &format!("/sessions/{id}/turns"),
        Some(json!({"utterance": "hi"})),
    )
    .await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(svc.session_count(), 0);
}

#[tokio::test]
async fn cross_origin_requests_are_allowed() {
    let svc = service();
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/sessions")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .header("access-control-request-headers", "content-type")
        .body(Body::empty())
        .unwrap();
    let resp = router(svc).oneshot(req).await.unwrap();
    assert!(resp.status().is_success());
    assert!(resp.headers().contains_key("access-control-allow-origin"));
    assert!(resp.headers().contains_key("access-control-allow-methods"));
}

fn http(addr: std::net::SocketAddr, method: &str, path: &str, body: &str) -> String {
    let mut s = std::net::TcpStream::connect(addr).unwrap();
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    out
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn checkpoint_served_over_tcp_matches_in_process_decoding() {
    let (m, vocab) = model_and_vocab();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chat.ckpt");
    let mut ck = Checkpoint::new(m);
    ck.vocab = Some(vocab.tokens().to_vec());
    ck.save(&path).unwrap();
    let svc = Arc::new(
        Service::from_checkpoint(
            Checkpoint::load(&path).unwrap(),
            Tokenizer::new(),
            ServiceConfig::default(),
        )
        .unwrap(),
    );

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(listener, Arc::clone(&svc), async {
        let _ = stopped.await;
    }));

    let reply = tokio::task::spawn_blocking(move || {
        let created = http(addr, "POST", "/sessions", "");
        assert!(created.starts_with("HTTP/1.1 201"), "{created}");
        let body = created.split("\r\n\r\n").nth(1).unwrap();
        let id = serde_json::from_str::<Value>(body).unwrap()["session_id"]
            .as_str()
            .unwrap()
            .to_string();
        let resp = http(
            addr,
            "POST",
            &format!("/sessions/{id}/turns"),
            r#"{"utterance":"hi how are you ?"}"#,
        );
        assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
        serde_json::from_str::<Value>(resp.split("\r\n\r\n").nth(1).unwrap()).unwrap()
    })
    .await
    .unwrap();

    let mut u = vocab.encode(&["hi", "how", "are", "you", "?"]);
    u.push(EOS_ID);
    let (orig, _) = model_and_vocab();
    let want = beam_search(&orig, &[u], 5, 40).unwrap();
    assert_eq!(reply["tokens"], json!(want.tokens));
    assert!(close(&reply["log_prob"], want.log_prob));

    stop.send(()).unwrap();
    server.await.unwrap().unwrap();
}
