use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use cfx_core::cohort::{apply_filters, FilterClause};
use cfx_core::gateway::Gateway;
use cfx_core::io::{write_dataset, Dataset};
use cfx_core::synth::{self, SyntheticConfig};
use cfx_server::{router, AppState, DIGEST_HEADER};

struct Fixture {
    _dir: tempfile::TempDir,
    dataset: Dataset,
    app: Router,
}

fn fixture(n: usize, seed: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ds");
    let data = synth::generate(&SyntheticConfig::new(n, seed)).unwrap();
    write_dataset(&root, &data, Some(seed)).unwrap();
    let dataset = Dataset::load(&root).unwrap();
    let gateway = Gateway::synthetic(data.constants.clone());
    let state = AppState::new(Dataset::load(&root).unwrap(), gateway, 2, Some(dir.path().join("runs")));
    Fixture {
        _dir: dir,
        dataset,
        app: router(state, None),
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, String, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let digest = resp
        .headers()
        .get(DIGEST_HEADER)
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, digest, bytes)
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, _, b) = call(app, "GET", uri, None).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn ids_with_label(ds: &Dataset, label: u8, n: usize) -> Vec<String> {
    ds.records
        .iter()
        .filter(|r| r.predicted_label == label)
        .take(n)
        .map(|r| r.id.clone())
        .collect()
}

#[tokio::test]
async fn reads_carry_digest_and_are_stable() {
    let f = fixture(30, 1);
    let (s, digest, a) = call(&f.app, "GET", "/api/subjects", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(digest, f.dataset.digest);
    let (_, _, b) = call(&f.app, "GET", "/api/subjects", None).await;
    assert_eq!(a, b);
    let v: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["dataset_digest"], f.dataset.digest.as_str());
    assert_eq!(v["data"].as_array().unwrap().len(), 30);
    assert_eq!(v["data"][0]["id"], "s01");

    let (_, schema) = get_json(&f.app, "/api/schema").await;
    assert_eq!(schema["data"][2]["name"], "rv_cavity");
}

#[tokio::test]
async fn frames_render_and_404() {
    let f = fixture(6, 2);
    let (s, digest, plain) = call(&f.app, "GET", "/api/subjects/s01/frames/0", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(digest, f.dataset.digest);
    assert_eq!(&plain[1..4], b"PNG");
    let (_, _, tinted) = call(&f.app, "GET", "/api/subjects/s01/frames/0?overlay=1", None).await;
    assert_ne!(plain, tinted);
    let (_, _, again) = call(&f.app, "GET", "/api/subjects/s01/frames/0?overlay=1", None).await;
    assert_eq!(tinted, again);
    assert_eq!(call(&f.app, "GET", "/api/subjects/s01/frames/1", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&f.app, "GET", "/api/subjects/zz/frames/0", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn filters_match_library() {
    let f = fixture(40, 3);
    let clauses = vec![
        FilterClause::range("age", 50.0, 70.0).unwrap(),
        FilterClause::categories("sex", ["female"]).unwrap(),
    ];
    let (s, _, body) = call(&f.app, "POST", "/api/filters", Some(json!({ "clauses": clauses }))).await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    let expected = apply_filters(&f.dataset.records, &f.dataset.manifest.variables, &clauses).unwrap();
    assert_eq!(v["data"], serde_json::to_value(&expected).unwrap());

    let bad = json!({ "clauses": [{ "variable": "height", "kind": "range", "lo": 1, "hi": 2 }] });
    let (s, _, body) = call(&f.app, "POST", "/api/filters", Some(bad)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["error"]["fields"][0]["field"], "clauses[0]");
}

#[tokio::test]
async fn distribution_endpoint() {
    let f = fixture(20, 4);
    let (s, v) = get_json(&f.app, "/api/distribution?variable=age&bins=5").await;
    assert_eq!(s, StatusCode::OK);
    let total: u64 = v["data"]["bins"].as_array().unwrap().iter().map(|b| b["count"].as_u64().unwrap()).sum();
    assert_eq!(total + v["data"]["missing"].as_u64().unwrap(), 20);
    let (_, v) = get_json(&f.app, "/api/distribution?variable=sex").await;
    assert!(v["data"]["counts"].is_object());
    let (s, _) = get_json(&f.app, "/api/distribution?variable=nope").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn run_lifecycle() {
    let f = fixture(40, 5);
    let targets = ids_with_label(&f.dataset, 1, 5);
    let sources = ids_with_label(&f.dataset, 0, 8);
    let (s, _, body) = call(
        &f.app,
        "POST",
        "/api/runs",
        Some(json!({ "targets": targets, "sources": sources, "segments": "all" })),
    )
    .await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let v: Value = serde_json::from_slice(&body).unwrap();
    let id = v["data"]["run_id"].as_str().unwrap().to_string();

    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let (_, v) = get_json(&f.app, &format!("/api/runs/{id}")).await;
        match v["data"]["status"].as_str().unwrap() {
            "complete" => {
                assert_eq!(v["data"]["results"], 280);
                break;
            }
            "failed" => panic!("run failed: {v}"),
            _ => {
                assert!(Instant::now() < deadline, "run did not finish");
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        }
    }

    let (_, v) = get_json(&f.app, &format!("/api/runs/{id}/summary")).await;
    let rows = v["data"].as_array().unwrap();
    assert_eq!(rows.len(), 7);
    let total: u64 = rows
        .iter()
        .map(|r| r["counterfactuals"].as_u64().unwrap() + r["unchanged"].as_u64().unwrap() + r["skipped"].as_u64().unwrap())
        .sum();
    assert_eq!(total, 280);

    let (_, v) = get_json(&f.app, &format!("/api/runs/{id}/results?offset=270&limit=500")).await;
    assert_eq!(v["data"]["limit"], 50);
    assert_eq!(v["data"]["items"].as_array().unwrap().len(), 10);
    let (_, v) = get_json(&f.app, &format!("/api/runs/{id}/results?limit=500")).await;
    assert_eq!(v["data"]["items"].as_array().unwrap().len(), 50);
    assert_eq!(v["data"]["items"][0]["spec"]["target"], targets.iter().min().unwrap().as_str());

    let (s, _, png) = call(&f.app, "GET", &format!("/api/runs/{id}/recombined/3/frames/0?overlay=1"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&png[1..4], b"PNG");
    assert_eq!(
        call(&f.app, "GET", &format!("/api/runs/{id}/recombined/280/frames/0"), None).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(get_json(&f.app, "/api/runs/ffff/summary").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn run_validation_errors_name_fields() {
    let f = fixture(20, 6);
    let pos = ids_with_label(&f.dataset, 1, 2);
    let neg = ids_with_label(&f.dataset, 0, 2);

    let (s, _, body) = call(
        &f.app,
        "POST",
        "/api/runs",
        Some(json!({ "targets": pos, "sources": [pos[0], "ghost"], "selections": [1] })),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&body).unwrap();
    let fields: Vec<&str> = v["error"]["fields"].as_array().unwrap().iter().map(|e| e["field"].as_str().unwrap()).collect();
    assert!(fields.contains(&"sources"));
    let msg = v["error"]["message"].as_str().unwrap();
    assert!(msg.contains("ghost") && msg.contains(&pos[0]), "{msg}");

    let (s, _, body) = call(
        &f.app,
        "POST",
        "/api/runs",
        Some(json!({ "targets": pos, "sources": neg, "selections": [64] })),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["error"]["fields"][0]["field"], "selections[0]");

    let (s, _, _) = call(&f.app, "POST", "/api/runs", Some(json!({ "targets": pos, "sources": neg }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn completed_runs_reload_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ds");
    let data = synth::generate(&SyntheticConfig::new(16, 8)).unwrap();
    write_dataset(&root, &data, Some(8)).unwrap();
    let runs = dir.path().join("runs");
    let make = || {
        let state = AppState::new(
            Dataset::load(&root).unwrap(),
            Gateway::synthetic(data.constants.clone()),
            1,
            Some(runs.clone()),
        );
        router(Arc::clone(&state), None)
    };
    let app = make();
    let ds = Dataset::load(&root).unwrap();
    let body = json!({
        "targets": ids_with_label(&ds, 1, 2),
        "sources": ids_with_label(&ds, 0, 2),
        "selections": [["rv_cavity"]],
    });
    let (_, _, b) = call(&app, "POST", "/api/runs", Some(body)).await;
    let id = serde_json::from_slice::<Value>(&b).unwrap()["data"]["run_id"].as_str().unwrap().to_string();
    let deadline = Instant::now() + Duration::from_secs(30);
    while get_json(&app, &format!("/api/runs/{id}")).await.1["data"]["status"] != "complete" {
        assert!(Instant::now() < deadline);
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    let fresh = make();
    let (s, v) = get_json(&fresh, &format!("/api/runs/{id}/summary")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["data"][0]["counterfactuals"], 0);
}
