mod common;

use std::collections::BTreeSet;
use std::time::Duration;

use aiv_app::server::{router, AppState, StatusEvent};
use aiv_core::counting::ZoneConfig;
use aiv_core::detect::{Detection, GtRecord, VehicleClass, VideoInfo};
use aiv_core::geom::BBox;
use aiv_core::synth::{self, Scene};
use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use common::*;
use futures::future::join_all;
use http_body_util::BodyExt;
use image::{Rgb, RgbImage};
use serde_json::{json, Value};
use tower::ServiceExt;

fn planted_request() -> Value {
    json!({
        "detections": fixture("planted_dets.jsonl"),
        "tracker": { "min_hits": 1, "max_time_lost": 2 },
    })
}

fn planted_zones() -> Value {
    serde_json::from_slice(&std::fs::read(fixture("planted_zones.json")).unwrap()).unwrap()
}

async fn create(app: &axum::Router, body: Value) -> String {
    let (status, v) = call(app, Method::POST, "/api/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

async fn run_to_cache(app: &axum::Router, id: &str) -> Value {
    let (status, _) = call(app, Method::POST, &format!("/api/sessions/{id}/run"), None).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    wait_idle(app, id).await
}

fn session_dirs(root: &std::path::Path) -> usize {
    std::fs::read_dir(root).unwrap().count()
}

#[tokio::test]
async fn create_valid_session_starts_created() {
    let root = tempfile::tempdir().unwrap();
    let app = app(root.path());
    let id = create(&app, planted_request()).await;
    let (status, v) = call(&app, Method::GET, &format!("/api/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["state"], "Created");
    assert_eq!(v["config"]["video"]["frame_count"], 10);
    assert_eq!(v["config"]["video"]["width"], 320);
    assert_eq!(v["has_cache"], false);
    assert_eq!(v["mask"], json!([]));
    for f in ["config.json", "state.json", "mask.json", "zones.json"] {
        assert!(root.path().join(&id).join(f).is_file(), "{f}");
    }
}

#[tokio::test]
async fn missing_source_allocates_nothing() {
    let root = tempfile::tempdir().unwrap();
    let app = app(root.path());
    let (status, v) =
        call(&app, Method::POST, "/api/sessions", Some(json!({ "detections": root.path().join("nope.jsonl") }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{v}");
    assert!(v["error"].as_str().unwrap().contains("nope.jsonl"));
    assert_eq!(session_dirs(root.path()), 0);
}

#[tokio::test]
async fn invalid_params_report_fields() {
    let root = tempfile::tempdir().unwrap();
    let app = app(root.path());
    let body = json!({
        "detections": fixture("planted_dets.jsonl"),
        "tracker": { "iou_threshold": 1.5, "appearance": true },
    });
    let (status, v) = call(&app, Method::POST, "/api/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let fields: BTreeSet<&str> = v["fields"].as_array().unwrap().iter().map(|f| f["field"].as_str().unwrap()).collect();
    assert_eq!(fields, BTreeSet::from(["tracker.iou_threshold", "tracker.appearance"]));
    assert_eq!(session_dirs(root.path()), 0);

    let (status, _) = call(&app, Method::POST, "/api/sessions", Some(json!({ "detections": "x", "bogus": 1 }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn saved_mask_is_loaded_by_later_sessions() {
    let root = tempfile::tempdir().unwrap();
    let media = tempfile::tempdir().unwrap();
    let dets = copy_fixture("planted_dets.jsonl", media.path());
    let app = app(root.path());
    let first = create(&app, json!({ "detections": dets })).await;
    let mask = json!([{ "vertices": [[0.0, 0.0], [50.5, 0.0], [50.5, 240.0], [0.0, 240.0]] }]);
    let (status, v) = call(&app, Method::PUT, &format!("/api/sessions/{first}/mask"), Some(mask.clone())).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert!(media.path().join("planted_dets.jsonl.mask.json").is_file());

    let second = create(&app, json!({ "detections": dets })).await;
    let (_, v) = call(&app, Method::GET, &format!("/api/sessions/{second}"), None).await;
    assert_eq!(v["mask"], mask);

    let (status, _) = call(
        &app,
        Method::PUT,
        &format!("/api/sessions/{second}/mask"),
        Some(json!([{ "vertices": [[0, 0], [1, 1]] }])),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn mask_change_discards_cache() {
    let root = tempfile::tempdir().unwrap();
    let media = tempfile::tempdir().unwrap();
    let dets = copy_fixture("planted_dets.jsonl", media.path());
    let app = app(root.path());
    let id = create(&app, json!({ "detections": dets, "tracker": { "min_hits": 1 } })).await;
    assert_eq!(run_to_cache(&app, &id).await["state"], "Cached");
    let mask = json!([{ "vertices": [[0, 0], [10, 0], [10, 10]] }]);
    let (_, v) = call(&app, Method::PUT, &format!("/api/sessions/{id}/mask"), Some(mask.clone())).await;
    assert_eq!(v["cache_discarded"], true);
    let (_, v) = call(&app, Method::GET, &format!("/api/sessions/{id}"), None).await;
    assert_eq!((v["state"].as_str(), v["has_cache"].as_bool()), (Some("Created"), Some(false)));
    // same mask again changes nothing
    let (_, v) = call(&app, Method::PUT, &format!("/api/sessions/{id}/mask"), Some(mask)).await;
    assert_eq!(v["changed"], false);
}

#[tokio::test]
async fn run_reaches_cached_and_quick_equals_full() {
    let root = tempfile::tempdir().unwrap();
    let app = app(root.path());
    let id = create(&app, planted_request()).await;
    let v = run_to_cache(&app, &id).await;
    assert_eq!(v["state"], "Cached", "{v}");
    assert!(root.path().join(&id).join("cache.aiv").is_file());
    assert_eq!(v["progress"]["frame"], 9);

    let (status, v) = call(&app, Method::PUT, &format!("/api/sessions/{id}/zones"), Some(planted_zones())).await;
    assert_eq!((status, v["changed"].as_bool()), (StatusCode::OK, Some(true)));
    let (status, quick) =
        call(&app, Method::POST, &format!("/api/sessions/{id}/count"), Some(json!({ "mode": "quick" }))).await;
    assert_eq!(status, StatusCode::OK, "{quick}");
    let (status, full) =
        call(&app, Method::POST, &format!("/api/sessions/{id}/count"), Some(json!({ "mode": "full" }))).await;
    assert_eq!(status, StatusCode::OK, "{full}");
    assert_eq!(quick["result"], full["result"]);
    let events = &quick["result"]["finish_line"]["events"];
    assert_eq!(
        events,
        &json!([
            { "track_id": 2, "class": "truck", "frame": 4, "method": "finish_line" },
            { "track_id": 1, "class": "car", "frame": 6, "method": "finish_line" },
        ])
    );
    let (_, v) = call(&app, Method::GET, &format!("/api/sessions/{id}"), None).await;
    assert_eq!(v["state"], "Done");
}

#[tokio::test]
async fn quick_count_before_run_points_to_run() {
    let root = tempfile::tempdir().unwrap();
    let app = app(root.path());
    let id = create(&app, planted_request()).await;
    call(&app, Method::PUT, &format!("/api/sessions/{id}/zones"), Some(planted_zones())).await;
    let (status, v) =
        call(&app, Method::POST, &format!("/api/sessions/{id}/count"), Some(json!({ "mode": "quick" }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(v["error"].as_str().unwrap().contains("start a run"), "{v}");
    let (_, v) = call(&app, Method::GET, &format!("/api/sessions/{id}"), None).await;
    assert_eq!(v["state"], "Created");
}

#[tokio::test]
async fn successive_counts_keep_independent_ledgers() {
    let root = tempfile::tempdir().unwrap();
    let app = app(root.path());
    let id = create(&app, planted_request()).await;
    run_to_cache(&app, &id).await;
    let wide = planted_zones();
    let narrow =
        json!({ "finish_line": { "region": { "vertices": [[0, 0], [80, 0], [80, 240], [0, 240]] }, "dwell": 5 } });
    for zones in [&wide, &narrow] {
        let (status, v) = call(
            &app,
            Method::POST,
            &format!("/api/sessions/{id}/count"),
            Some(json!({ "mode": "quick", "zones": zones })),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{v}");
    }
    let (_, v) = call(&app, Method::GET, &format!("/api/sessions/{id}/counts"), None).await;
    let history = v["history"].as_array().unwrap();
    assert_eq!(history.len(), 2);
    let zones_of = |v: &Value| serde_json::from_value::<ZoneConfig>(v.clone()).unwrap();
    assert_eq!(zones_of(&history[0]["zones"]), zones_of(&wide));
    assert_eq!(history[0]["result"]["finish_line"]["events"].as_array().unwrap().len(), 2);
    // car centers sit at x = 40 + 10f, inside x <= 80 for frames 0-4; the truck never enters
    assert_eq!(
        history[1]["result"]["finish_line"]["events"],
        json!([{ "track_id": 1, "class": "car", "frame": 4, "method": "finish_line" }])
    );
    assert_eq!(v["latest"], history[1]);
    assert!(root.path().join(&id).join("ledgers/run-0002.json").is_file());
    assert!(root.path().join(&id).join("ledgers/run-0001-finish_line.csv").is_file());

    let (status, _) =
        call(&app, Method::POST, &format!("/api/sessions/{id}/count"), Some(json!({ "method": "motion_vector" })))
            .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn identical_zone_put_is_a_no_op() {
    let root = tempfile::tempdir().unwrap();
    let app = app(root.path());
    let id = create(&app, planted_request()).await;
    let uri = format!("/api/sessions/{id}/zones");
    let (_, first) = call(&app, Method::PUT, &uri, Some(planted_zones())).await;
    assert_eq!(first["changed"], true);
    let path = root.path().join(&id).join("zones.json");
    let before = (std::fs::read(&path).unwrap(), std::fs::metadata(&path).unwrap().modified().unwrap());
    std::thread::sleep(Duration::from_millis(20));
    let (status, again) = call(&app, Method::PUT, &uri, Some(planted_zones())).await;
    assert_eq!((status, again["changed"].as_bool()), (StatusCode::OK, Some(false)));
    let after = (std::fs::read(&path).unwrap(), std::fs::metadata(&path).unwrap().modified().unwrap());
    assert_eq!(before, after);

    let bad = json!({ "finish_line": { "region": { "vertices": [[0, 0], [5, 0], [5, 5]] }, "dwell": 0 } });
    let (status, v) = call(&app, Method::PUT, &uri, Some(bad)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("dwell"));
}

#[tokio::test]
async fn get_endpoints_do_not_change_the_session() {
    let root = tempfile::tempdir().unwrap();
    let app = app(root.path());
    let id = create(&app, planted_request()).await;
    run_to_cache(&app, &id).await;
    let snapshot = |root: &std::path::Path| -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(root.join(&id)).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                out.push((p.display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
        out.sort();
        out
    };
    let before = snapshot(root.path());
    for uri in ["", "/counts", "/gallery"] {
        let (status, _) = call(&app, Method::GET, &format!("/api/sessions/{id}{uri}"), None).await;
        assert_eq!(status, StatusCode::OK, "{uri}");
    }
    assert_eq!(snapshot(root.path()), before);
    let (status, _) = call(&app, Method::GET, "/api/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_starts_admit_one_run() {
    let root = tempfile::tempdir().unwrap();
    let app = app(root.path());
    let mut body = planted_request();
    body["simulated_latency_ms"] = json!(30);
    let id = create(&app, body).await;
    let uri = format!("/api/sessions/{id}/run");
    let results = join_all((0..8).map(|_| call(&app, Method::POST, &uri, None))).await;
    let accepted = results.iter().filter(|(s, _)| *s == StatusCode::ACCEPTED).count();
    let rejected = results.iter().filter(|(s, _)| *s == StatusCode::CONFLICT).count();
    assert_eq!((accepted, rejected), (1, 7));
    // a start while running is rejected and leaves the run alone
    let (status, v) = call(&app, Method::POST, &uri, None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(v["error"].as_str().unwrap().contains("Running"));
    let v = wait_idle(&app, &id).await;
    assert_eq!(v["state"], "Cached");
    assert_eq!(v["progress"]["frame"], 9);
}

#[tokio::test]
async fn adapter_failure_marks_session_failed_with_frame() {
    let root = tempfile::tempdir().unwrap();
    let media = tempfile::tempdir().unwrap();
    let model = media.path().join("model.bin");
    std::fs::write(&model, b"weights").unwrap();
    let script = "for f in 0 1 2; do echo \"{\\\"frame\\\":$f,\\\"cls\\\":0,\\\"score\\\":0.9,\\\"box\\\":[10,10,20,20]}\"; done; echo garbage";
    let app = app(root.path());
    let id = create(
        &app,
        json!({
            "adapter": { "program": "sh", "args": ["-c", script], "model": model },
            "width": 320, "height": 240, "frame_count": 10,
        }),
    )
    .await;
    let v = run_to_cache(&app, &id).await;
    assert_eq!(v["state"], "Failed");
    let msg = v["message"].as_str().unwrap();
    assert!(msg.contains("frame 3"), "{msg}");
    assert!(msg.contains("record 4"), "{msg}");

    let (status, v) = call(
        &app,
        Method::POST,
        "/api/sessions",
        Some(json!({ "adapter": { "program": "sh", "model": media.path().join("missing.bin") }, "width": 1, "height": 1, "frame_count": 1 })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("missing.bin"));
}

#[tokio::test]
async fn eval_reports_planted_errors() {
    let root = tempfile::tempdir().unwrap();
    let app = app(root.path());
    let id = create(&app, planted_request()).await;
    let uri = format!("/api/sessions/{id}/eval");
    let (status, _) = call(&app, Method::POST, &uri, Some(json!({ "gt_path": fixture("planted_gt.jsonl") }))).await;
    assert_eq!(status, StatusCode::CONFLICT, "eval needs a cache");
    run_to_cache(&app, &id).await;
    call(
        &app,
        Method::POST,
        &format!("/api/sessions/{id}/count"),
        Some(json!({ "mode": "quick", "zones": planted_zones() })),
    )
    .await;

    let (status, v) = call(&app, Method::POST, &uri, Some(json!({ "gt_path": fixture("planted_gt.jsonl") }))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["overall"]["fp"], 2);
    assert_eq!(v["overall"]["ids"], 1);
    assert_eq!(v["overall"]["fn"], 0);
    assert_eq!(v["overall"]["counting_accuracy_pct"], 100.0);
    assert!(root.path().join(&id).join("report.json").is_file());

    let (status, v) = call(&app, Method::POST, &uri, Some(json!({ "gt_path": "/nonexistent/gt.jsonl" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("gt.jsonl"));

    let long_gt = root.path().join("long_gt.jsonl");
    let mut text = std::fs::read_to_string(fixture("planted_gt.jsonl")).unwrap();
    text.push_str("{\"frame\":10,\"gt_id\":1,\"cls\":0,\"box\":[0,0,5,5]}\n");
    std::fs::write(&long_gt, text).unwrap();
    let (status, v) = call(&app, Method::POST, &uri, Some(json!({ "gt_path": long_gt }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("10 frames"), "{v}");
}

#[tokio::test]
async fn frames_are_served_as_png() {
    let root = tempfile::tempdir().unwrap();
    let media = tempfile::tempdir().unwrap();
    let scene = synth::bouncing_pair();
    let (dets, frames) = write_scene(&scene, media.path());
    let app = app(root.path());
    let id = create(&app, json!({ "detections": dets, "frames": frames })).await;
    let (status, png) = call_raw(&app, Method::GET, &format!("/api/sessions/{id}/frame/10"), None).await;
    assert_eq!(status, StatusCode::OK);
    let img = image::load_from_memory_with_format(&png, image::ImageFormat::Png).unwrap().to_rgb8();
    assert_eq!(img, scene.frames.as_ref().unwrap()[10]);
    let (status, _) = call_raw(&app, Method::GET, &format!("/api/sessions/{id}/frame/21"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let headless = create(&app, planted_request()).await;
    let (status, _) = call_raw(&app, Method::GET, &format!("/api/sessions/{headless}/frame/0"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

/// Red and blue cars large enough for template crops, driving apart.
fn two_large_cars() -> Scene {
    let mut detections = Vec::new();
    let mut frames = Vec::new();
    for f in 0..6u32 {
        let mut img = RgbImage::from_pixel(320, 240, Rgb(synth::BACKGROUND));
        let red = BBox::new(20.0 + 8.0 * f as f64, 20.0, 60.0, 40.0).unwrap();
        let blue = BBox::new(200.0 - 8.0 * f as f64, 150.0, 60.0, 40.0).unwrap();
        synth::fill(&mut img, &red, synth::RED);
        synth::fill(&mut img, &blue, synth::BLUE);
        frames.push(img);
        for bbox in [red, blue] {
            detections.push(Detection { frame: f, cls: VehicleClass::Car, score: 0.9, bbox });
        }
    }
    let gt: Vec<GtRecord> = Vec::new();
    Scene {
        info: VideoInfo { frame_count: 6, width: 320, height: 240, nominal_fps: 30.0 },
        detections,
        gt,
        frames: Some(frames),
    }
}

#[tokio::test]
async fn gallery_index_lists_registered_templates() {
    let root = tempfile::tempdir().unwrap();
    let media = tempfile::tempdir().unwrap();
    let (dets, frames) = write_scene(&two_large_cars(), media.path());
    let app = app(root.path());
    let id = create(&app, json!({ "detections": dets, "frames": frames, "gallery": true })).await;
    assert_eq!(run_to_cache(&app, &id).await["state"], "Cached");
    let (status, v) = call(&app, Method::GET, &format!("/api/sessions/{id}/gallery"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["enabled"], true);
    let templates = v["templates"].as_array().unwrap();
    assert_eq!(templates.len(), 2, "{v}");
    assert!(templates.iter().all(|t| t["cls"] == "car"));
    let tracks: BTreeSet<u64> = templates.iter().map(|t| t["track_id"].as_u64().unwrap()).collect();
    assert_eq!(tracks, BTreeSet::from([1, 2]));

    let plain = create(&app, planted_request()).await;
    let (_, v) = call(&app, Method::GET, &format!("/api/sessions/{plain}/gallery"), None).await;
    assert_eq!(v, json!({ "enabled": false, "templates": [] }));

    let (status, _) =
        call(&app, Method::POST, "/api/sessions", Some(json!({ "detections": dets, "gallery": true }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn event_stream_replays_run_history() {
    let root = tempfile::tempdir().unwrap();
    let app = app(root.path());
    let id = create(&app, planted_request()).await;
    run_to_cache(&app, &id).await;

    let req = Request::builder().uri(format!("/api/sessions/{id}/events")).body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let mut body = resp.into_body();
    let mut text = String::new();
    while !text.contains("run finished") {
        let frame =
            tokio::time::timeout(Duration::from_secs(5), body.frame()).await.expect("event in time").unwrap().unwrap();
        if let Ok(data) = frame.into_data() {
            text.push_str(std::str::from_utf8(&data).unwrap());
        }
    }
    let events: Vec<StatusEvent> =
        text.lines().filter_map(|l| l.strip_prefix("data: ")).map(|d| serde_json::from_str(d).unwrap()).collect();
    let messages: Vec<&str> = events.iter().map(|e| e.message.as_str()).collect();
    assert_eq!(messages.first(), Some(&"session created"));
    assert!(messages.contains(&"run started"));
    let progress: Vec<_> = events.iter().filter(|e| e.frame.is_some()).collect();
    assert_eq!(progress.last().unwrap().frame, Some(9), "last frame always reported");
    assert!(progress.iter().all(|e| e.fps.is_some_and(|f| f > 0.0)));
    assert!(events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    assert!(events.iter().all(|e| e.session_id == id));
}

#[tokio::test]
async fn restart_reloads_sessions_and_fails_interrupted_runs() {
    let root = tempfile::tempdir().unwrap();
    let (done, stuck) = {
        let app = app(root.path());
        let done = create(&app, planted_request()).await;
        run_to_cache(&app, &done).await;
        call(
            &app,
            Method::POST,
            &format!("/api/sessions/{done}/count"),
            Some(json!({ "mode": "quick", "zones": planted_zones() })),
        )
        .await;
        let stuck = create(&app, planted_request()).await;
        (done, stuck)
    };
    // simulate a process killed mid-run
    std::fs::write(root.path().join(&stuck).join("state.json"), r#"{"state":"Running"}"#).unwrap();

    let app = router(AppState::open(root.path()).unwrap());
    let (_, v) = call(&app, Method::GET, &format!("/api/sessions/{done}"), None).await;
    assert_eq!((v["state"].as_str(), v["count_runs"].as_u64()), (Some("Done"), Some(1)));
    let (_, v) = call(&app, Method::GET, &format!("/api/sessions/{done}/counts"), None).await;
    assert_eq!(v["latest"]["result"]["finish_line"]["totals"], json!({ "car": 1, "truck": 1 }));
    let (_, v) = call(&app, Method::GET, &format!("/api/sessions/{stuck}"), None).await;
    assert_eq!(v["state"], "Failed");
    assert!(v["message"].as_str().unwrap().contains("interrupted"));
    // a failed session may run again
    assert_eq!(run_to_cache(&app, &stuck).await["state"], "Cached");
}
