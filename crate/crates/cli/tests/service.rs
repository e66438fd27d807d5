use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::{Rgb, RgbImage};
use serde_json::{json, Value};
use tower::ServiceExt;

use semlink::codec::{param_count, CodecConfig, CodecParams};
use semlink::dataset::synthetic_images;
use semlink::harness::System;
use semlink_cli::service::{png_base64, router, AppState, SweepResponse, TransmitResponse, MAX_BODY_BYTES};

fn app(cfg: &CodecConfig) -> Router {
    let params = CodecParams::<f32>::init(cfg, 3).unwrap();
    router(Arc::new(AppState::new(params, "test".into())), None)
}

fn photo(w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        Rgb([
            (x * 255 / w.max(1)) as u8,
            (y * 255 / h.max(1)) as u8,
            ((x ^ y) & 0xff) as u8,
        ])
    })
}

fn b64(img: &RgbImage) -> String {
    png_base64(img).unwrap()
}

fn decode(s: &str) -> RgbImage {
    let bytes = STANDARD.decode(s).unwrap();
    image::load_from_memory(&bytes).unwrap().to_rgb8()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, bytes.to_vec())
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Vec<u8>) {
    call(app, "POST", uri, Some(body.to_string())).await
}

fn without_timing(body: &[u8]) -> Value {
    let mut v: Value = serde_json::from_slice(body).unwrap();
    v.as_object_mut().unwrap().remove("timing_ms");
    v
}

#[tokio::test]
async fn noiseless_qam_is_pixel_identical() {
    let app = app(&CodecConfig::tiny());
    let img = synthetic_images(1, 8).remove(0).to_rgb_image();
    let (status, body) = post(
        &app,
        "/api/transmit",
        json!({"image": b64(&img), "snr_db": "inf", "channel": "awgn", "systems": ["qam256"]}),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let r: TransmitResponse = serde_json::from_slice(&body).unwrap();
    let q = &r.results[&System::Qam256];
    assert_eq!(decode(&q.reconstruction), img);
    assert_eq!(decode(&r.original_processed), img);
    assert_eq!(q.ssim, 1.0);
    assert_eq!(q.psnr_db.0, f64::INFINITY);
    assert_eq!(r.tiles, 1);
    assert!(!r.results.contains_key(&System::Dnn));
    let raw: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(raw["results"]["qam256"]["psnr_db"], "inf");
}

#[tokio::test]
async fn seeded_requests_repeat_exactly() {
    let app = app(&CodecConfig::tiny());
    let req = json!({
        "image": b64(&photo(64, 32)),
        "snr_db": 7.5,
        "channel": "rayleigh",
        "systems": ["dnn", "qam256"],
        "seed": 1234
    });
    let (s1, a) = post(&app, "/api/transmit", req.clone()).await;
    let (s2, b) = post(&app, "/api/transmit", req.clone()).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(without_timing(&a), without_timing(&b));
    assert_eq!(without_timing(&a)["seed"], 1234);

    let (c, d) = tokio::join!(post(&app, "/api/transmit", req.clone()), post(&app, "/api/transmit", req));
    assert_eq!(without_timing(&c.1), without_timing(&d.1));
    assert_eq!(without_timing(&c.1), without_timing(&a));
}

#[tokio::test]
async fn missing_seed_is_fresh_and_echoed() {
    let app = app(&CodecConfig::tiny());
    let req = json!({"image": b64(&photo(32, 32)), "snr_db": 10, "channel": "awgn", "systems": ["qam256"]});
    let (_, a) = post(&app, "/api/transmit", req.clone()).await;
    let (_, b) = post(&app, "/api/transmit", req).await;
    let a: TransmitResponse = serde_json::from_slice(&a).unwrap();
    let b: TransmitResponse = serde_json::from_slice(&b).unwrap();
    assert_ne!(a.seed, b.seed);
}

#[tokio::test]
async fn large_photo_is_tiled_into_64() {
    let app = app(&CodecConfig::tiny());
    let (status, body) = post(
        &app,
        "/api/transmit",
        json!({"image": b64(&photo(256, 256)), "snr_db": 20, "channel": "rayleigh", "systems": ["dnn", "qam256"], "seed": 1}),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let r: TransmitResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!((r.width, r.height, r.tiles), (256, 256, 64));
    for res in r.results.values() {
        assert_eq!(decode(&res.reconstruction).dimensions(), (256, 256));
        assert!((-1.0..=1.0).contains(&res.ssim));
    }
}

#[tokio::test]
async fn uploads_are_resized_to_tile_multiples() {
    let app = app(&CodecConfig::tiny());
    let (_, body) = post(
        &app,
        "/api/transmit",
        json!({"image": format!("data:image/png;base64,{}", b64(&photo(1000, 300))), "snr_db": "inf", "channel": "awgn", "systems": ["qam256"], "seed": 2}),
    )
    .await;
    let r: TransmitResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!((r.width, r.height), (512, 128));
    let reference = decode(&r.original_processed);
    assert_eq!(reference.dimensions(), (512, 128));
    assert_eq!(decode(&r.results[&System::Qam256].reconstruction), reference);
}

#[tokio::test]
async fn info_reports_model_and_is_stable() {
    let cfg = CodecConfig::tiny();
    let app = app(&cfg);
    let (status, a) = call(&app, "GET", "/api/info", None).await;
    assert_eq!(status, StatusCode::OK);
    let (_, b) = call(&app, "GET", "/api/info", None).await;
    assert_eq!(a, b);
    let v: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["param_count"], param_count(&cfg));
    assert_eq!(v["channels"], json!(["awgn", "rayleigh"]));
    assert_eq!(v["systems"], json!(["dnn", "qam256"]));
    assert_eq!(v["checkpoint_id"], "test");
    assert_eq!(v["codec"], serde_json::to_value(cfg).unwrap());
}

#[tokio::test]
async fn sweep_scores_every_point_and_system() {
    let app = app(&CodecConfig::tiny());
    let (status, body) = post(
        &app,
        "/api/sweep",
        json!({"image": b64(&photo(32, 32)), "channel": "rayleigh", "grid": [0, 20, 40], "seed": 5}),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let r: SweepResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.points.len(), 3);
    assert!(r.points.iter().all(|p| p.ssim.len() == 2 && p.psnr_db.len() == 2));
}

#[tokio::test]
async fn sweep_qam_improves_with_snr() {
    let app = app(&CodecConfig::tiny());
    let (_, body) = post(
        &app,
        "/api/sweep",
        json!({"image": b64(&photo(64, 64)), "channel": "awgn", "grid": [0, 40], "systems": ["qam256"], "seed": 11, "repeats": 8}),
    )
    .await;
    let r: SweepResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.repeats, 8);
    let at = |i: usize| r.points[i].ssim[&System::Qam256];
    assert!(at(1) >= at(0), "{} < {}", at(1), at(0));
}

#[tokio::test]
async fn bad_requests_are_rejected() {
    let app = app(&CodecConfig::tiny());
    let img = b64(&photo(32, 32));
    let cases = [
        ("/api/sweep", json!({"image": img, "channel": "awgn", "grid": []})),
        ("/api/sweep", json!({"image": img, "channel": "awgn", "grid": vec![10; 17]})),
        ("/api/sweep", json!({"image": img, "channel": "awgn", "grid": [10], "repeats": 0})),
        ("/api/transmit", json!({"image": "!!notbase64", "snr_db": 10, "channel": "awgn", "systems": ["qam256"]})),
        ("/api/transmit", json!({"image": STANDARD.encode(b"GIF89a"), "snr_db": 10, "channel": "awgn", "systems": ["qam256"]})),
        ("/api/transmit", json!({"image": img, "snr_db": 10, "channel": "awgn", "systems": []})),
        ("/api/transmit", json!({"image": img, "snr_db": 10, "channel": "awgn", "systems": ["fm"]})),
        ("/api/transmit", json!({"image": img, "snr_db": 10, "channel": "rician", "systems": ["qam256"]})),
        ("/api/transmit", json!({"image": img, "snr_db": 500, "channel": "awgn", "systems": ["qam256"]})),
        ("/api/transmit", json!({"image": img, "snr_db": "loud", "channel": "awgn", "systems": ["qam256"]})),
        ("/api/transmit", json!({"snr_db": 10, "channel": "awgn", "systems": ["qam256"]})),
    ];
    for (uri, body) in cases {
        let (status, resp) = post(&app, uri, body.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        let v: Value = serde_json::from_slice(&resp).unwrap();
        assert!(v["error"].as_str().is_some_and(|m| !m.is_empty()));
    }
    let (status, _) = call(&app, "POST", "/api/transmit", Some("{not json".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn oversize_uploads_get_413() {
    let app = app(&CodecConfig::tiny());
    let body = format!("{{\"image\":\"{}\"}}", "A".repeat(MAX_BODY_BYTES + 1));
    let (status, _) = call(&app, "POST", "/api/transmit", Some(body)).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);

    // Tiny file, huge declared canvas.
    let wide = image::GrayImage::new(9000, 1);
    let mut png = Vec::new();
    wide.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png).unwrap();
    let (status, _) = post(
        &app,
        "/api/transmit",
        json!({"image": STANDARD.encode(png), "snr_db": 10, "channel": "awgn", "systems": ["qam256"]}),
    )
    .await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn cross_origin_requests_are_allowed() {
    let app = app(&CodecConfig::tiny());
    let req = Request::builder()
        .uri("/api/info")
        .header("origin", "http://example.com")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
}

#[tokio::test]
async fn ui_directory_is_served_at_root() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>demo</h1>").unwrap();
    let params = CodecParams::<f32>::init(&CodecConfig::tiny(), 3).unwrap();
    let app = router(Arc::new(AppState::new(params, "t".into())), Some(dir.path().to_path_buf()));
    let (status, body) = call(&app, "GET", "/", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<h1>demo</h1>");
    let (status, _) = call(&app, "GET", "/api/info", None).await;
    assert_eq!(status, StatusCode::OK);
}
