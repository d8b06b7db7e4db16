use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use refeednet::datasets::{pnm, synth_scene, TrafficClass};
use refeednet::micronet::{save_checkpoint, Architecture, Model};
use refeednet_service::{bind, router, AppState, ServiceConfig};

fn config(dir: &Path) -> ServiceConfig {
    let mut cfg = ServiceConfig::new(dir);
    cfg.retest_per_class = 3;
    cfg.timestamps = false;
    cfg
}

fn seed_model(dir: &Path) {
    let mut m = Model::<f64>::new(&Architecture::standard(), 11).unwrap();
    m.freeze_base();
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("model.rfn"), save_checkpoint(&m)).unwrap();
}

fn open(cfg: ServiceConfig) -> Arc<AppState> {
    seed_model(&cfg.data_dir);
    AppState::open(cfg).unwrap()
}

async fn call(state: &Arc<AppState>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

async fn json_call(state: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let (status, bytes) = call(state, req).await;
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, v)
}

async fn post_frame(state: &Arc<AppState>, class: TrafficClass, seed: u64) -> Value {
    let bytes = pnm::encode(&synth_scene(class, seed).pixels).unwrap();
    let req = Request::post("/predict").body(Body::from(bytes)).unwrap();
    let (status, body) = call(state, req).await;
    assert_eq!(status, StatusCode::CREATED);
    serde_json::from_slice(&body).unwrap()
}

fn other_label(rec: &Value) -> &'static str {
    let predicted: TrafficClass = rec["predicted"].as_str().unwrap().parse().unwrap();
    TrafficClass::from_index((predicted.index() + 1) % 4).unwrap().name()
}

fn wait_idle(state: &AppState) {
    let start = Instant::now();
    while state.is_busy() {
        assert!(start.elapsed() < Duration::from_secs(120), "cycle did not finish");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[tokio::test]
async fn fresh_service_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let st = open(config(dir.path()));
    let (status, m) = json_call(&st, "GET", "/metrics", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(m["p0"], Value::Null);
    assert_eq!(m["pf"], Value::Null);
    assert_eq!(m["q"], json!(0.7));
    assert_eq!(m["rounds"], json!(0));
    assert_eq!(m["history"], json!([]));
}

#[tokio::test]
async fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let st = open(config(dir.path()));
    let (s, _) = json_call(&st, "POST", "/records/99/review", Some(json!({"verdict": "confirmed"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, body) = json_call(&st, "POST", "/retrain", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(body["error"].as_str().unwrap().contains("stack empty"));

    let rec = post_frame(&st, TrafficClass::Heavy, 1).await;
    let uri = format!("/records/{}/review", rec["id"]);
    let (s, _) = json_call(&st, "POST", &uri, Some(json!({"verdict": "corrected"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = json_call(&st, "POST", &uri, Some(json!({"verdict": "corrected", "label": "Gridlock"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let same = rec["predicted"].clone();
    let (s, _) = json_call(&st, "POST", &uri, Some(json!({"verdict": "corrected", "label": same}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, r) = json_call(&st, "POST", &uri, Some(json!({"verdict": "confirmed"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["review"], "confirmed");
    assert_eq!(r["cycle_started"], false);
    let (s, _) = json_call(&st, "POST", &uri, Some(json!({"verdict": "confirmed"}))).await;
    assert_eq!(s, StatusCode::OK, "repeating a verdict is idempotent");
    let label = other_label(&rec);
    let (s, _) = json_call(&st, "POST", &uri, Some(json!({"verdict": "corrected", "label": label}))).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, _) = call(&st, Request::post("/predict").body(Body::from("not an image")).unwrap()).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn records_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let st = open(config(dir.path()));
    let a = post_frame(&st, TrafficClass::Jam, 2).await;
    let b = post_frame(&st, TrafficClass::Empty, 3).await;
    assert!(b["id"].as_u64() > a["id"].as_u64());
    let (_, list) = json_call(&st, "GET", "/records?status=unreviewed&limit=1", None).await;
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["id"], a["id"]);
    let (s, _) = json_call(&st, "GET", "/records?status=bogus", None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let uri = format!("/images/{}", a["image_ref"].as_str().unwrap());
    let (s, bytes) = call(&st, Request::get(&uri).body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(pnm::decode(&bytes).unwrap().shape(), &[32, 32, 1]);
    let (s, _) = call(&st, Request::get("/images/images/nope.pgm").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&st, Request::get("/images/synth:target:Jam:4").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);

    let (s, info) = json_call(&st, "GET", "/model", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(info["architecture"]["input_shape"], json!([32, 32, 1]));
    assert_eq!(info["checksum"].as_str().unwrap().len(), 8);
    assert_eq!(info["deployed_at"], Value::Null);
}

#[tokio::test]
async fn corrections_then_manual_retrain() {
    let dir = tempfile::tempdir().unwrap();
    let st = open(config(dir.path()));
    for i in 0..5 {
        let rec = post_frame(&st, TrafficClass::ALL[i % 4], 10 + i as u64).await;
        let uri = format!("/records/{}/review", rec["id"]);
        let body = json!({"verdict": "corrected", "label": other_label(&rec)});
        let (s, r) = json_call(&st, "POST", &uri, Some(body)).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(r["review"], "corrected");
    }
    let (_, m) = json_call(&st, "GET", "/metrics", None).await;
    assert_eq!(m["stack"]["prediction"], json!(5));

    let (s, started) = json_call(&st, "POST", "/retrain", None).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!(started["cycle"], json!(1));
    wait_idle(&st);
    let (_, m) = json_call(&st, "GET", "/metrics", None).await;
    assert_eq!(m["rounds"], json!(1));
    assert_eq!(m["stack"], json!({"prediction": 0, "training": 0}));
    let last = &m["history"][0];
    for key in ["p0", "pf", "r", "gain"] {
        assert_eq!(m[key], last[key], "{key}");
    }
    assert!(m["pf"].is_number());
}

#[tokio::test]
async fn auto_cycle_fires_on_nth_correction() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.auto_cycle_every = Some(2);
    let st = open(cfg);
    let mut started = vec![];
    for i in 0..2 {
        let rec = post_frame(&st, TrafficClass::Fluid, 20 + i).await;
        let uri = format!("/records/{}/review", rec["id"]);
        let body = json!({"verdict": "corrected", "label": other_label(&rec)});
        let (_, r) = json_call(&st, "POST", &uri, Some(body)).await;
        started.push(r["cycle_started"].as_bool().unwrap());
    }
    assert_eq!(started, [false, true]);
    wait_idle(&st);
    assert_eq!(st.metrics().current.rounds, 1);
}

#[tokio::test]
async fn crash_restart_reconstructs_state() {
    let dir = tempfile::tempdir().unwrap();
    let st = open(config(dir.path()));
    let mut ids = vec![];
    for i in 0..4 {
        ids.push(post_frame(&st, TrafficClass::ALL[i], 30 + i as u64).await);
    }
    let (_, _) = json_call(&st, "POST", &format!("/records/{}/review", ids[0]["id"]), Some(json!({"verdict": "confirmed"}))).await;
    for rec in &ids[1..3] {
        let body = json!({"verdict": "corrected", "label": other_label(rec)});
        json_call(&st, "POST", &format!("/records/{}/review", rec["id"]), Some(body)).await;
    }
    let before_records = st.records(None, None);
    let before_metrics = st.metrics();
    let before_model = st.model_info();
    let before_stacks = st.stack_lines();
    // Abandon without any shutdown path.
    std::mem::forget(st);

    let st = AppState::open(config(dir.path())).unwrap();
    assert_eq!(st.records(None, None), before_records);
    assert_eq!(st.metrics(), before_metrics);
    assert_eq!(st.model_info(), before_model);
    assert_eq!(st.stack_lines(), before_stacks);
    assert_eq!(st.metrics().stack.prediction, 2);
}

#[tokio::test]
async fn corrupt_state_refuses_to_start() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    drop(open(cfg.clone()));
    std::fs::write(dir.path().join("records.jsonl"), "{not json\n").unwrap();
    let err = AppState::open(cfg.clone()).err().unwrap();
    assert!(err.to_string().contains("records.jsonl"), "{err}");

    std::fs::write(dir.path().join("records.jsonl"), "").unwrap();
    let mut bytes = std::fs::read(dir.path().join("model.rfn")).unwrap();
    bytes[40] ^= 0xff;
    std::fs::write(dir.path().join("model.rfn"), bytes).unwrap();
    assert!(AppState::open(cfg).is_err());
}

#[tokio::test]
async fn bearer_token_guards_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.token = Some("s3cret".into());
    std::fs::create_dir_all(dir.path().join("ui")).unwrap();
    std::fs::write(dir.path().join("ui/index.html"), "<html>ui</html>").unwrap();
    let st = open(cfg);
    let (s, _) = call(&st, Request::get("/metrics").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let req = Request::get("/metrics")
        .header("authorization", "Bearer s3cret")
        .body(Body::empty())
        .unwrap();
    assert_eq!(call(&st, req).await.0, StatusCode::OK);
    let (s, body) = call(&st, Request::get("/ui/").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"<html>ui</html>");
}

#[tokio::test]
async fn port_in_use_is_a_startup_error() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap();
    let err = bind(addr).await.unwrap_err();
    assert_eq!(err.class(), refeednet::ErrorClass::Io);
}

#[tokio::test]
async fn serves_over_tcp() {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let dir = tempfile::tempdir().unwrap();
    let st = open(config(dir.path()));
    let listener = bind("127.0.0.1:0".parse().unwrap()).await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(refeednet_service::serve_on(listener, st, async {
        let _ = rx.await;
    }));
    let mut conn = tokio::net::TcpStream::connect(addr).await.unwrap();
    conn.write_all(b"GET /metrics HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut resp = String::new();
    conn.read_to_string(&mut resp).await.unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("\"rounds\":0"));
    tx.send(()).unwrap();
    server.await.unwrap().unwrap();
}
