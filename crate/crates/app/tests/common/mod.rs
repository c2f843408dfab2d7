#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::Duration;

use aiv_app::server::{router, AppState};
use aiv_core::detect::{write_detection_stream, DetectionStream, StreamHeader};
use aiv_core::synth::Scene;
use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Copies a fixture into `dir`, so tests can write sidecar files next to it.
pub fn copy_fixture(name: &str, dir: &Path) -> PathBuf {
    let dest = dir.join(name);
    std::fs::copy(fixture(name), &dest).unwrap();
    dest
}

/// Writes a scene's detections as a stream file and, when it has pixels,
/// its frames as numbered PNGs. Returns `(detections, frames dir)`.
pub fn write_scene(scene: &Scene, dir: &Path) -> (PathBuf, Option<PathBuf>) {
    let dets = dir.join("scene.jsonl");
    let stream = DetectionStream {
        header: Some(StreamHeader::new(scene.info.width, scene.info.height, scene.info.nominal_fps)),
        detections: scene.detections.clone(),
    };
    std::fs::write(&dets, write_detection_stream(&stream)).unwrap();
    let frames = scene.frames.as_ref().map(|frames| {
        let fdir = dir.join("frames");
        std::fs::create_dir_all(&fdir).unwrap();
        for (i, img) in frames.iter().enumerate() {
            img.save(fdir.join(format!("frame_{i:04}.png"))).unwrap();
        }
        fdir
    });
    (dets, frames)
}

pub fn app(root: &Path) -> Router {
    router(AppState::open(root).unwrap())
}

pub async fn call_raw(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req.header("content-type", "application/json").body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call_raw(app, method, uri, body).await;
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, value)
}

/// Polls the session until it leaves `Running`.
pub async fn wait_idle(app: &Router, id: &str) -> Value {
    for _ in 0..1000 {
        let (_, v) = call(app, Method::GET, &format!("/api/sessions/{id}"), None).await;
        if v["state"] != "Running" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("session {id} still running");
}
