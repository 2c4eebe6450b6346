mod common;

use std::collections::BTreeMap;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use forge_cli::server::{router, AppState};
use forge_core::analytics::cohens_kappa;
use forge_core::config::RunConfig;
use forge_core::pipeline::Pipeline;

use common::{forge, stdout_json, workspace};

fn app(cfg: &std::path::Path) -> Router {
    let pipeline = Pipeline::offline(RunConfig::load(cfg).unwrap()).unwrap();
    router(AppState::new(pipeline), None)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn parse(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

#[tokio::test]
async fn group_assignment_persists() {
    let d = tempfile::tempdir().unwrap();
    let cfg = workspace(d.path(), 3);
    let (s, body) = call(&app(&cfg), "POST", "/api/sources/misc/group", Some(json!({"group": "A"}))).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    assert_eq!(parse(&body)["group"], "A");

    let (_, body) = call(&app(&cfg), "GET", "/api/sources", None).await;
    let sources = parse(&body);
    let misc = sources.as_array().unwrap().iter().find(|s| s["source_id"] == "misc").unwrap();
    assert_eq!(misc["group"], "A");

    let ing = stdout_json(&forge(&cfg, &["ingest"]));
    assert_eq!((ing["group_a"].as_u64(), ing["group_b"].as_u64()), (Some(3), Some(6)));
}

#[tokio::test]
async fn screening_batch_is_seeded() {
    let d = tempfile::tempdir().unwrap();
    let cfg = workspace(d.path(), 30);
    let app = app(&cfg);
    let (s, a) = call(&app, "GET", "/api/sources/misc/samples?n=4&seed=9", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(parse(&a).as_array().unwrap().len(), 4);
    assert_eq!(call(&app, "GET", "/api/sources/misc/samples?n=4&seed=9", None).await.1, a);
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let d = tempfile::tempdir().unwrap();
    let cfg = workspace(d.path(), 2);
    stdout_json(&forge(&cfg, &["ingest"]));
    let app = app(&cfg);
    let cases = [
        ("GET", "/api/sources/nope/samples", None, StatusCode::NOT_FOUND),
        ("POST", "/api/sources/nope/group", Some(json!({"group": "A"})), StatusCode::NOT_FOUND),
        ("POST", "/api/sources/misc/group", Some(json!({"group": "Z"})), StatusCode::BAD_REQUEST),
        ("GET", "/api/samples/nope/lineage", None, StatusCode::NOT_FOUND),
        ("POST", "/api/labels", Some(json!({"sample_id": "x"})), StatusCode::BAD_REQUEST),
        ("POST", "/api/labels", Some(json!({"sample_id": "x", "rater_id": "ann", "label": "good"})), StatusCode::NOT_FOUND),
    ];
    for (method, uri, body, want) in cases {
        let (got, bytes) = call(&app, method, uri, body).await;
        assert_eq!(got, want, "{method} {uri}");
        assert!(parse(&bytes)["error"].is_string());
    }
}

fn group_b_ids(dir: &std::path::Path) -> Vec<String> {
    let text = std::fs::read_to_string(dir.join("out/samples/group_b.jsonl")).unwrap();
    text.lines().map(|l| parse(l.as_bytes())["id"].as_str().unwrap().to_string()).collect()
}

#[tokio::test]
async fn labels_feed_agreement() {
    let d = tempfile::tempdir().unwrap();
    let cfg = workspace(d.path(), 30);
    stdout_json(&forge(&cfg, &["ingest"]));
    let ids = group_b_ids(d.path());
    assert_eq!(ids.len(), 60);
    let app = app(&cfg);

    let (s, _) = call(&app, "POST", "/api/labels", Some(json!({"sample_id": ids[0], "rater_id": "model", "label": "good"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let mut rng = 0x9e37_79b9_7f4a_7c15u64;
    let mut next = || {
        rng ^= rng << 13;
        rng ^= rng >> 7;
        rng ^= rng << 17;
        if rng.is_multiple_of(3) { "bad" } else { "good" }
    };
    let mut by_rater: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for rater in ["ann", "bo"] {
        for id in &ids {
            let label = next();
            let (s, body) = call(&app, "POST", "/api/labels", Some(json!({"sample_id": id, "rater_id": rater, "label": label}))).await;
            assert_eq!(s, StatusCode::CREATED);
            assert_eq!(parse(&body)["label"], label);
            by_rater.entry(rater).or_default().push(label);
        }
    }
    let expected = cohens_kappa(&by_rater["ann"], &by_rater["bo"]).unwrap().kappa;

    let (_, body) = call(&app, "GET", "/api/agreement", None).await;
    let report = parse(&body);
    assert_eq!(report["item_counts"]["ann"], 60);
    let got = report["matrix"]["values"][0][1].as_f64().unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");

    let cli = forge(&cfg, &["analyze", "kappa"]);
    assert_eq!(cli.stdout, body);
}

#[tokio::test]
async fn reports_match_the_cli_byte_for_byte() {
    let d = tempfile::tempdir().unwrap();
    let cfg = workspace(d.path(), 5);
    for stage in ["ingest", "rewrite", "judge", "score"] {
        stdout_json(&forge(&cfg, &[stage]));
    }
    let app = app(&cfg);
    for (route, analysis) in [("filter-rates", "filter-rates"), ("lengths", "lengths"), ("scores", "scores")] {
        let (s, body) = call(&app, "GET", &format!("/api/reports/{route}"), None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(forge(&cfg, &["analyze", analysis]).stdout, body, "{route}");
    }

    let rewritten = std::fs::read_to_string(d.path().join("out/samples/rewritten.jsonl")).unwrap();
    let child = parse(rewritten.lines().next().unwrap().as_bytes())["id"].as_str().unwrap().to_string();
    let (s, body) = call(&app, "GET", &format!("/api/samples/{child}/lineage"), None).await;
    assert_eq!(s, StatusCode::OK);
    let l = parse(&body);
    assert!(l["rewritten"].as_array().unwrap().iter().any(|r| r["id"] == child.as_str()));
    assert_eq!(l["verdicts"].as_array().unwrap().len(), 1);
}
