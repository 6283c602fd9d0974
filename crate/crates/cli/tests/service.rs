mod common;

use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use common::{decode, fixture, mean_abs_diff, ok, s};
use dynfield_cli::avatar::{Avatar, Info};
use dynfield_cli::service::{router, ServiceState, MULTIPART_BOUNDARY};
use serde_json::json;
use tempfile::TempDir;
use tower::ServiceExt;

fn ready() -> Arc<ServiceState> {
    let f = fixture();
    ServiceState::ready(Avatar::load(&f.ckpt, &f.data).unwrap(), 2)
}

async fn call(state: &Arc<ServiceState>, request: Request<Body>) -> (StatusCode, String, Vec<u8>) {
    let response = router(state.clone()).oneshot(request).await.unwrap();
    let status = response.status();
    let kind = response
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    let body = to_bytes(response.into_body(), usize::MAX).await.unwrap().to_vec();
    (status, kind, body)
}

fn info_request() -> Request<Body> {
    Request::get("/info").body(Body::empty()).unwrap()
}

fn render_request(body: serde_json::Value) -> Request<Body> {
    Request::post("/render")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

#[tokio::test]
async fn answers_503_until_loaded() {
    let state = ServiceState::loading(1);
    assert_eq!(call(&state, info_request()).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(
        call(&state, render_request(json!({}))).await.0,
        StatusCode::SERVICE_UNAVAILABLE
    );
    let f = fixture();
    state.set_avatar(Avatar::load(&f.ckpt, &f.data).unwrap());
    assert_eq!(call(&state, info_request()).await.0, StatusCode::OK);
}

#[tokio::test]
async fn info_describes_the_model_and_is_stable() {
    let state = ready();
    let (status, kind, body) = call(&state, info_request()).await;
    assert_eq!(status, StatusCode::OK);
    assert!(kind.starts_with("application/json"));
    let info: Info = serde_json::from_slice(&body).unwrap();
    assert_eq!(info.expr_dim, 4);
    assert_eq!(info.latent_dim, 8);
    assert_eq!(info.frame_count, 38);
    assert_eq!((info.min_resolution, info.max_resolution), (16, 512));
    assert!(!info.blendshape_hints.is_empty());
    assert_eq!(call(&state, info_request()).await.2, body);
}

#[tokio::test]
async fn default_render_matches_the_cli_bit_for_bit() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("cli.png");
    ok(&[
        "render",
        "--ckpt",
        s(&f.ckpt),
        "--data",
        s(&f.data),
        "--frame",
        "0",
        "--out",
        s(&out),
    ]);
    let state = ready();
    let (status, kind, body) = call(&state, render_request(json!({"base_frame": 0, "expression": {}}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(kind, "image/png");
    assert_eq!(body, std::fs::read(out).unwrap());
}

#[tokio::test]
async fn concurrent_identical_requests_get_identical_bytes() {
    let state = ready();
    let req = || render_request(json!({"base_frame": 3, "pose_delta": {"yaw": 12.0, "tx": 0.02}, "resolution": 32}));
    let (a, b, c) = tokio::join!(call(&state, req()), call(&state, req()), call(&state, req()));
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(a.2, b.2);
    assert_eq!(a.2, c.2);
}

#[tokio::test]
async fn expression_overrides_change_the_image() {
    let state = ready();
    let render = |v: f64| call(&state, render_request(json!({"expression": {"0": v}})));
    let (plus, minus) = tokio::join!(render(0.4), render(-0.4));
    assert!(mean_abs_diff(&decode(&plus.2), &decode(&minus.2)) > 0.0);
    // a full vector equal to the overridden base is the same request
    let dataset = dynfield::data::load_dataset(&fixture().data).unwrap();
    let mut full = dataset.frames[0].record.expression.clone();
    full[0] = 0.4;
    let (_, _, body) = call(&state, render_request(json!({ "expression": full }))).await;
    assert_eq!(body, plus.2);
}

#[tokio::test]
async fn several_outputs_come_back_as_multipart() {
    let state = ready();
    let (status, kind, body) = call(
        &state,
        render_request(json!({"outputs": ["color", "depth", "normals", "alpha"], "resolution": 20})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(kind, format!("multipart/mixed; boundary={MULTIPART_BOUNDARY}"));
    let text = String::from_utf8_lossy(&body);
    for name in ["color", "depth", "normals", "alpha"] {
        assert!(text.contains(&format!("name=\"{name}\"")), "missing {name}");
    }
    assert_eq!(text.matches(&format!("--{MULTIPART_BOUNDARY}\r\n")).count(), 4);
    assert!(text.ends_with(&format!("--{MULTIPART_BOUNDARY}--\r\n")));
}

#[tokio::test]
async fn invalid_requests_get_400() {
    let state = ready();
    for bad in [
        json!({"resolution": 8}),
        json!({"resolution": 1024}),
        json!({"base_frame": 999}),
        json!({"expression": [0.1]}),
        json!({"expression": {"9": 1.0}}),
        json!({"expression": {"x": 1.0}}),
        json!({"outputs": []}),
        json!({"outputs": ["color", "color"]}),
        json!({"outputs": ["sparkles"]}),
        json!({"unknown_field": 1}),
    ] {
        let (status, _, body) = call(&state, render_request(bad.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
        let err: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert!(err["error"].is_string());
    }
    let garbled = Request::post("/render").body(Body::from("{not json")).unwrap();
    assert_eq!(call(&state, garbled).await.0, StatusCode::BAD_REQUEST);
}
