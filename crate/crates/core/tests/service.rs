mod common;

use std::sync::Arc;
use std::time::Duration;

use anylevel::imageio::{decode_png, encode_png};
use anylevel::layout::format::{encode_rle, LayoutDocument};
use anylevel::layout::{BinaryMask, Layout, Region};
use anylevel::service::{router, AppState, ServiceConfig};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn state(with_model: bool, capacity: usize) -> Arc<AppState> {
    let config = ServiceConfig { workers: 1, queue_capacity: capacity, default_steps: 4, ..ServiceConfig::default() };
    AppState::new(with_model.then(|| common::tiny_model(20)), config)
}

async fn call(state: &Arc<AppState>, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn layout_doc() -> Value {
    let layout = Layout::new(3, vec![Region::new(BinaryMask::rect(8, 0, 0, 4, 8), "red circle", 3)]);
    serde_json::to_value(LayoutDocument::from_layout(&layout)).unwrap()
}

async fn wait_done(state: &Arc<AppState>, id: &str) -> Value {
    for _ in 0..600 {
        let (status, body) = call(state, "GET", &format!("/jobs/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        let job = json_of(&body);
        if job["status"] == "done" || job["status"] == "failed" {
            return job;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("job {id} did not finish");
}

#[tokio::test]
async fn concepts_lists_the_vocabulary() {
    let s = state(true, 4);
    let (status, body) = call(&s, "GET", "/concepts", None).await;
    assert_eq!(status, StatusCode::OK);
    let v = json_of(&body);
    assert_eq!(v["canvas_exponent"], 3);
    assert_eq!(v["concepts"].as_array().unwrap().len(), 8);
    assert_eq!(v["concepts"][0]["name"], "red circle");
}

#[tokio::test]
async fn missing_checkpoint_is_unavailable() {
    let s = state(false, 4);
    assert_eq!(call(&s, "GET", "/concepts", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
    let body = json!({ "layout": layout_doc() }).to_string();
    assert_eq!(call(&s, "POST", "/generate", Some(body)).await.0, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn validate_reports_violations() {
    let s = state(true, 4);
    let (status, body) = call(&s, "POST", "/layouts/validate", Some(layout_doc().to_string())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body)["ok"], true);

    let mut bad = layout_doc();
    bad["regions"][0]["text"] = json!("purple elephant");
    bad["regions"][0]["precision"] = json!(2);
    let (status, body) = call(&s, "POST", "/layouts/validate", Some(bad.to_string())).await;
    assert_eq!(status, StatusCode::OK);
    let v = json_of(&body);
    assert_eq!(v["ok"], false);
    assert!(v["violations"].as_array().unwrap().len() >= 2, "{v}");
}

#[tokio::test]
async fn malformed_json_points_at_the_error() {
    let s = state(true, 4);
    let (status, body) = call(&s, "POST", "/generate", Some("{\n  \"layout\": [".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let v = json_of(&body);
    assert_eq!(v["line"], 2);
    assert!(v["column"].as_u64().unwrap() > 0);
}

#[tokio::test]
async fn generate_runs_to_completion_and_is_reproducible() {
    let s = state(true, 4);
    let body = json!({ "layout": layout_doc(), "seed": 9, "samples": 2, "steps": 3 }).to_string();
    let mut images = Vec::new();
    for _ in 0..2 {
        let (status, resp) = call(&s, "POST", "/generate", Some(body.clone())).await;
        assert_eq!(status, StatusCode::ACCEPTED);
        let v = json_of(&resp);
        assert_eq!(v["seed"], 9);
        let id = v["job_id"].as_str().unwrap().to_string();
        let job = wait_done(&s, &id).await;
        assert_eq!(job["status"], "done", "{job}");
        assert_eq!(job["progress"]["completed"], job["progress"]["total"]);
        assert_eq!(job["progress"]["total"], 6);
        let (status, png) = call(&s, "GET", &format!("/results/{id}/1"), None).await;
        assert_eq!(status, StatusCode::OK);
        let img = decode_png(&png).unwrap();
        assert_eq!((img.height(), img.width()), (8, 8));
        images.push(png);
        assert_eq!(call(&s, "GET", &format!("/results/{id}/2"), None).await.0, StatusCode::NOT_FOUND);
    }
    assert_eq!(images[0], images[1]);
}

#[tokio::test]
async fn generate_rejects_bad_requests() {
    let s = state(true, 4);
    let cases = [
        json!({ "layout": layout_doc(), "samples": 0 }),
        json!({ "layout": layout_doc(), "samples": 17 }),
        json!({ "layout": layout_doc(), "keep_noise": true }),
        json!({ "layout": layout_doc(), "steps": 0 }),
        json!({ "layout": layout_doc(), "drop_levels": [9] }),
        json!({ "layout": layout_doc(), "bogus": 1 }),
    ];
    for case in cases {
        assert_eq!(call(&s, "POST", "/generate", Some(case.to_string())).await.0, StatusCode::BAD_REQUEST, "{case}");
    }
    let mut bad = layout_doc();
    bad["regions"][0]["text"] = json!("purple elephant");
    let (status, body) = call(&s, "POST", "/generate", Some(json!({ "layout": bad }).to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(!json_of(&body)["violations"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn job_lookup_errors() {
    let s = state(true, 4);
    assert_eq!(call(&s, "GET", "/jobs/not-a-job", None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&s, "GET", "/jobs/job-0123456789abcdef", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&s, "GET", "/results/job-0123456789abcdef/0", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn finished_jobs_expire() {
    let config = ServiceConfig { workers: 1, ttl: 0, default_steps: 2, ..ServiceConfig::default() };
    let s = AppState::new(Some(common::tiny_model(20)), config);
    let body = json!({ "layout": layout_doc(), "seed": 1 }).to_string();
    let (_, resp) = call(&s, "POST", "/generate", Some(body)).await;
    let id = json_of(&resp)["job_id"].as_str().unwrap().to_string();
    let mut status = StatusCode::OK;
    for _ in 0..600 {
        status = call(&s, "GET", &format!("/jobs/{id}"), None).await.0;
        if status != StatusCode::OK {
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert_eq!(status, StatusCode::GONE);
}

#[tokio::test]
async fn full_queue_is_rejected() {
    let s = state(true, 1);
    let body = json!({ "layout": layout_doc(), "seed": 1, "samples": 16, "steps": 20 }).to_string();
    let mut codes = Vec::new();
    for _ in 0..6 {
        codes.push(call(&s, "POST", "/generate", Some(body.clone())).await.0);
    }
    assert!(codes.contains(&StatusCode::TOO_MANY_REQUESTS), "{codes:?}");
    assert_eq!(codes[0], StatusCode::ACCEPTED);
}

#[tokio::test]
async fn inpaint_keeps_the_unmasked_region() {
    let s = state(true, 4);
    let model = common::tiny_model(20);
    let (c, h, w) = model.image_shape();
    let original = anylevel::diffusion::Tensor::from_vec(c, h, w, (0..c * h * w).map(|i| if i % 2 == 0 { 0.6 } else { -0.6 }).collect());
    let png = encode_png(&original).unwrap();
    let mask = BinaryMask::rect(8, 0, 0, 4, 8);
    let body = json!({
        "image": base64::engine::general_purpose::STANDARD.encode(&png),
        "mask": encode_rle(&mask),
        "layout": layout_doc(),
        "seed": 3,
        "steps": 3,
    })
    .to_string();
    let (status, resp) = call(&s, "POST", "/inpaint", Some(body)).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&resp));
    let id = json_of(&resp)["job_id"].as_str().unwrap().to_string();
    assert_eq!(wait_done(&s, &id).await["status"], "done");
    let out = decode_png(&call(&s, "GET", &format!("/results/{id}/0"), None).await.1).unwrap();
    let before = decode_png(&png).unwrap();
    for y in 0..8 {
        for x in 4..8 {
            for k in 0..3 {
                assert_eq!(out.get(k, y, x), before.get(k, y, x));
            }
        }
    }

    let small = BinaryMask::zeros(4);
    let body = json!({
        "image": base64::engine::general_purpose::STANDARD.encode(&png),
        "mask": encode_rle(&small),
        "layout": layout_doc(),
    })
    .to_string();
    assert_eq!(call(&s, "POST", "/inpaint", Some(body)).await.0, StatusCode::BAD_REQUEST);
}
