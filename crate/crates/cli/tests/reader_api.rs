use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use dcesynth::grid::Grid;
use dcesynth::io::write_gray_png;
use dcesynth::reader::{import_csv, ImagePool, PoolEntry, ReaderService, SyntheticImage};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn write_pool(dir: &Path, n: usize) -> ImagePool {
    let mut entries = Vec::new();
    for i in 0..n {
        let img = |v: f32| Grid::filled(8, 8, v);
        for (name, v) in [("pre", 0.2), ("post", 0.4), ("syn", 0.41)] {
            write_gray_png(&dir.join(format!("images/c{i}_{name}.png")), &img(v)).unwrap();
        }
        entries.push(PoolEntry {
            case_id: format!("c{i}"),
            pre: format!("images/c{i}_pre.png").into(),
            real_post: format!("images/c{i}_post.png").into(),
            synthetic: vec![SyntheticImage {
                variant: "SUB(Vanilla)".into(),
                path: format!("images/c{i}_syn.png").into(),
            }],
        });
    }
    let pool = ImagePool {
        entries,
        root: dir.to_path_buf(),
    };
    pool.save(dir).unwrap();
    ImagePool::load(dir).unwrap()
}

fn app(dir: &Path) -> Router {
    let service = ReaderService::new(write_pool(dir, 12)).with_log(dir.join("responses.jsonl"));
    dcesynth_cli::router(Arc::new(Mutex::new(service)))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

#[tokio::test]
async fn discrimination_session_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (s, info) = call_json(
        &app,
        "POST",
        "/sessions",
        Some(json!({"reader_id": "r1", "task": "discrimination", "seed": 11})),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(info["total_items"], 15);
    let sid = info["session_id"].as_str().unwrap().to_string();

    let mut answered = 0;
    loop {
        let (s, next) = call_json(&app, "GET", &format!("/sessions/{sid}/next"), None).await;
        assert_eq!(s, StatusCode::OK);
        if next["status"] == "complete" {
            assert_eq!(next["answered"], 15);
            break;
        }
        let text = next.to_string();
        for leak in ["truth", "synthetic", "\"real", "variant", "c1_", ".png"] {
            assert!(!text.contains(leak), "{leak} leaked: {text}");
        }
        let images = next["images"].as_array().unwrap();
        assert_eq!(images.len(), 1);
        let (s, png) = call(&app, "GET", images[0]["url"].as_str().unwrap(), None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(&png[1..4], b"PNG");

        let item_id = next["item_id"].as_str().unwrap();
        let body = json!({"item_id": item_id, "answer": "real"});
        let (s, ack) = call_json(&app, "POST", &format!("/sessions/{sid}/responses"), Some(body.clone())).await;
        assert_eq!(s, StatusCode::OK);
        assert!(ack.get("correct").is_none(), "feedback is off by default");
        let (_, again) = call_json(&app, "POST", &format!("/sessions/{sid}/responses"), Some(body)).await;
        assert_eq!(ack, again);
        answered += 1;
    }
    assert_eq!(answered, 15);

    let (s, csv) = call(&app, "GET", &format!("/sessions/{sid}/export.csv"), None).await;
    assert_eq!(s, StatusCode::OK);
    let (rows, summary) = import_csv(std::str::from_utf8(&csv).unwrap()).unwrap();
    assert_eq!(rows.len(), 15);
    assert_eq!(summary["accuracy"], "5/15");
    assert_eq!(rows.iter().filter(|r| r.truth == "synthetic").count(), 10);
    let log = std::fs::read_to_string(dir.path().join("responses.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 15);
}

#[tokio::test]
async fn comparative_payload_has_three_images() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (_, info) = call_json(
        &app,
        "POST",
        "/sessions",
        Some(json!({"reader_id": "r2", "task": "comparative", "seed": 1, "n_items": 4, "feedback": true})),
    )
    .await;
    assert_eq!(info["total_items"], 4);
    let sid = info["session_id"].as_str().unwrap();
    let (_, next) = call_json(&app, "GET", &format!("/sessions/{sid}/next"), None).await;
    let labels: Vec<&str> = next["images"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["label"].as_str().unwrap())
        .collect();
    assert_eq!(labels, ["pre", "left", "right"]);
    let item = next["item_id"].as_str().unwrap();
    let (_, ack) = call_json(
        &app,
        "POST",
        &format!("/sessions/{sid}/responses"),
        Some(json!({"item_id": item, "answer": "left"})),
    )
    .await;
    assert!(ack["correct"].is_boolean());
    let (_, revisit) = call_json(&app, "GET", &format!("/sessions/{sid}/items/{item}"), None).await;
    assert_eq!(revisit["submitted"]["answer"], "left");
}

#[tokio::test]
async fn errors_map_to_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (s, _) = call(&app, "GET", "/sessions/missing/next", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/images/0123", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({"reader_id": "r", "task": "annotation"})),
    )
    .await;
    assert!(s.is_client_error(), "seed is mandatory");
    let (_, info) = call_json(
        &app,
        "POST",
        "/sessions",
        Some(json!({"reader_id": "r", "task": "annotation", "seed": 2})),
    )
    .await;
    let sid = info["session_id"].as_str().unwrap();
    let (_, next) = call_json(&app, "GET", &format!("/sessions/{sid}/next"), None).await;
    let item = next["item_id"].as_str().unwrap();
    let (s, body) = call_json(
        &app,
        "POST",
        &format!("/sessions/{sid}/responses"),
        Some(json!({"item_id": item})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("realism_score"));
    let (s, _) = call(
        &app,
        "POST",
        &format!("/sessions/{sid}/responses"),
        Some(json!({"item_id": "item-99", "realism_score": 4})),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}
