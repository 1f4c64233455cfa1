use std::path::Path;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use dragedit_core::bank::read_bank;
use dragedit_core::image::RgbImage;
use dragedit_core::mask::Mask;
use dragedit_core::pipeline;
use dragedit_core::sampler::{NoObserver, StepRecord};
use dragedit_core::tasks::EditRequest;
use dragedit_service::jobs::{Job, Phase};
use dragedit_service::{router, AppState, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

const KINDS: [&str; 5] = ["moving", "resizing", "replacing", "pasting", "dragging"];

fn start(dir: &Path) -> (Arc<AppState>, Router) {
    let config = ServiceConfig {
        storage_dir: dir.into(),
        ..ServiceConfig::default()
    };
    let state = AppState::start(config).unwrap();
    (Arc::clone(&state), router(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: impl Into<Body>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).body(body.into()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Value) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body.to_string()).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn image_png(seed: u8) -> Vec<u8> {
    let data = (0..16 * 16 * 3)
        .map(|i| ((i * 7 + seed as usize * 31) % 200 + 20) as u8)
        .collect();
    RgbImage::new(16, 16, data).unwrap().to_png().unwrap()
}

async fn upload(app: &Router, seed: u8) -> String {
    let (status, body) = call(app, "POST", "/images", image_png(seed)).await;
    assert_eq!(status, StatusCode::CREATED);
    serde_json::from_slice::<Value>(&body).unwrap()["id"].as_str().unwrap().to_string()
}

async fn make_bank(app: &Router, steps: usize, with_ref: bool) -> String {
    let image = upload(app, 1).await;
    let mut body = json!({"v": 1, "image": image, "prompt": "a photo", "steps": steps});
    if with_ref {
        body["reference"] = upload(app, 2).await.into();
    }
    let (status, info) = call_json(app, "POST", "/banks", body).await;
    assert!(status == StatusCode::CREATED || status == StatusCode::OK, "{info}");
    info["id"].as_str().unwrap().to_string()
}

fn golden(kind: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("tests/golden/{kind}.json"));
    std::fs::read_to_string(path).unwrap()
}

fn moving(dy: i64, dx: i64) -> Value {
    let mask = Mask::rect(16, 16, 4, 4, 8, 8);
    json!({"v": 1, "kind": "moving", "object_mask": mask, "offset": {"dy": dy, "dx": dx}})
}

async fn submit(app: &Router, bank: &str, edit: Value, config: Value) -> (StatusCode, Value) {
    call_json(app, "POST", "/edits", json!({"v": 1, "bank": bank, "edit": edit, "config": config})).await
}

/// Parses a finished SSE body into (event name, data) pairs.
fn sse_events(body: &[u8]) -> Vec<(String, Value)> {
    let text = std::str::from_utf8(body).unwrap();
    let mut out = Vec::new();
    for frame in text.split("\n\n") {
        let (mut name, mut data) = (None, String::new());
        for line in frame.lines() {
            if let Some(n) = line.strip_prefix("event: ") {
                name = Some(n.to_string());
            } else if let Some(d) = line.strip_prefix("data: ") {
                data += d;
            }
        }
        if let Some(name) = name {
            out.push((name, serde_json::from_str(&data).unwrap()));
        }
    }
    out
}

async fn events(app: &Router, id: &str) -> Vec<(String, Value)> {
    let (status, body) = call(app, "GET", &format!("/edits/{id}/events"), Body::empty()).await;
    assert_eq!(status, StatusCode::OK);
    sse_events(&body)
}

async fn job(app: &Router, id: &str) -> Job {
    let (status, body) = call(app, "GET", &format!("/edits/{id}"), Body::empty()).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_slice(&body).unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn fifty_step_job_streams_fifty_step_records_then_done() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = start(dir.path());
    let bank = make_bank(&app, 50, false).await;
    let (status, created) = submit(&app, &bank, moving(2, 3), json!({})).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{created}");
    let id = created["id"].as_str().unwrap();

    let evs = events(&app, id).await;
    let (last, done) = evs.last().unwrap();
    assert_eq!(last, "done");
    let records: Vec<StepRecord> = evs
        .iter()
        .filter(|(n, _)| n == "step")
        .map(|(_, d)| serde_json::from_value(d["record"].clone()).unwrap())
        .collect();
    assert_eq!(records.len(), 50);

    let (_, log) = call(&app, "GET", &format!("/edits/{id}/steps"), Body::empty()).await;
    let logged: Vec<StepRecord> = std::str::from_utf8(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records, logged);

    let phases: Vec<&str> = evs
        .iter()
        .filter(|(n, _)| n == "phase")
        .map(|(_, d)| d["phase"].as_str().unwrap())
        .collect();
    assert_eq!(phases, ["inverting", "sampling"]);

    let finished: Job = serde_json::from_value(done["job"].clone()).unwrap();
    assert_eq!(finished.phase, Phase::Done);
    assert_eq!(finished.steps_done, 50);
    assert!(finished.timings.preparing_seconds > 0.0 && finished.timings.inference_seconds > 0.0);
    assert_eq!(finished.artifacts.previews.len(), 5);

    let (status, result) = call(&app, "GET", &format!("/edits/{id}/result"), Body::empty()).await;
    assert_eq!(status, StatusCode::OK);
    let previews: Vec<&Value> = evs.iter().filter(|(n, _)| n == "preview").map(|(_, d)| d).collect();
    let ts: Vec<u64> = previews.iter().map(|p| p["t"].as_u64().unwrap()).collect();
    assert_eq!(ts, [41, 31, 21, 11, 1, 0]);
    let terminal = base64::engine::general_purpose::STANDARD
        .decode(previews.last().unwrap()["png"].as_str().unwrap())
        .unwrap();
    assert_eq!(terminal, result);

    let (status, frame) = call(&app, "GET", &format!("/edits/{id}/previews/11"), Body::empty()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(RgbImage::from_png(&frame).unwrap().width, 16);
}

#[tokio::test(flavor = "multi_thread")]
async fn out_of_bounds_move_names_the_offset() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = start(dir.path());
    let bank = make_bank(&app, 5, false).await;
    let (status, body) = submit(&app, &bank, moving(0, 9), json!({"n_gated": 2})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["v"], 1);
    assert_eq!(body["error"]["field"], "offset");
}

#[tokio::test(flavor = "multi_thread")]
async fn malformed_bodies_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = start(dir.path());
    let bank = make_bank(&app, 5, false).await;

    let (status, body) = call(&app, "POST", "/images", b"not a png".to_vec()).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["error"]["field"], "image");

    let (status, body) = call_json(&app, "POST", "/edits", json!({"v": 2, "bank": bank, "edit": moving(1, 1)})).await;
    assert_eq!((status, body["error"]["field"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("v")));

    let mut edit = moving(1, 1);
    edit["offset"]["dx"] = "one".into();
    let (status, body) = submit(&app, &bank, edit, json!({})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["field"], "edit");
    assert!(body["error"]["message"].as_str().unwrap().contains("invalid type"));

    let (status, body) = submit(&app, &bank, moving(1, 1), json!({"eta": "fast"})).await;
    assert_eq!((status, body["error"]["field"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("config.eta")));

    let (status, body) = submit(&app, &bank, moving(1, 1), json!({"n_gated": 6})).await;
    assert_eq!((status, body["error"]["field"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("n_gated")));

    let (status, body) = submit(&app, &bank, json!(serde_json::from_str::<Value>(&golden("pasting")).unwrap()), json!({"n_gated": 2})).await;
    assert_eq!((status, body["error"]["field"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("bank")));

    let (status, _) = call_json(&app, "POST", "/banks", json!({"v": 1, "image": "feed"})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread")]
async fn identical_requests_share_one_job() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = start(dir.path());
    let bank = make_bank(&app, 6, false).await;
    assert_eq!(make_bank(&app, 6, false).await, bank);
    let config = json!({"n_gated": 3});
    let (s1, a) = submit(&app, &bank, moving(1, 2), config.clone()).await;
    let (s2, b) = submit(&app, &bank, moving(1, 2), config.clone()).await;
    assert_eq!((s1, s2), (StatusCode::ACCEPTED, StatusCode::OK));
    assert_eq!(a["id"], b["id"]);
    let (_, c) = submit(&app, &bank, moving(1, 2), json!({"n_gated": 4})).await;
    assert_ne!(a["id"], c["id"]);
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_ids_and_finished_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = start(dir.path());
    for uri in ["/edits/nope", "/edits/nope/result", "/edits/nope/events", "/banks/nope"] {
        let (status, _) = call(&app, "GET", uri, Body::empty()).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
    }
    let (status, _) = call(&app, "POST", "/edits/nope/cancel", Body::empty()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let bank = make_bank(&app, 4, false).await;
    let (_, created) = submit(&app, &bank, moving(0, 1), json!({"n_gated": 2})).await;
    let id = created["id"].as_str().unwrap();
    assert_eq!(events(&app, id).await.last().unwrap().0, "done");
    let (status, body) = call(&app, "POST", &format!("/edits/{id}/cancel"), Body::empty()).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["error"]["code"], "conflict");
}

#[tokio::test(flavor = "multi_thread")]
async fn queued_job_is_cancelled_before_it_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = start(dir.path());
    let bank = make_bank(&app, 50, false).await;
    let (_, busy) = submit(&app, &bank, moving(1, 0), json!({})).await;
    let (_, waiting) = submit(&app, &bank, moving(0, 1), json!({})).await;
    let id = waiting["id"].as_str().unwrap();
    let (status, body) = call(&app, "POST", &format!("/edits/{id}/cancel"), Body::empty()).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["phase"], "cancelled");
    let evs = events(&app, id).await;
    assert_eq!(evs.iter().map(|e| e.0.as_str()).collect::<Vec<_>>(), ["cancelled"]);
    let (status, _) = call(&app, "GET", &format!("/edits/{id}/result"), Body::empty()).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(events(&app, busy["id"].as_str().unwrap()).await.last().unwrap().0, "done");
}

#[tokio::test(flavor = "multi_thread")]
async fn golden_payloads_are_accepted_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = start(dir.path());
    let bank = make_bank(&app, 6, true).await;
    for kind in KINDS {
        let text = golden(kind);
        let (status, body) = call(&app, "POST", "/validate", text.clone()).await;
        assert_eq!(status, StatusCode::OK, "{kind}: {}", String::from_utf8_lossy(&body));
        let derived: Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(derived["kind"], kind);

        let wrapped = format!(r#"{{"v":1,"bank":"{bank}","edit":{text},"config":{{"n_gated":3}}}}"#);
        let (status, created) = call(&app, "POST", "/edits", wrapped).await;
        assert_eq!(status, StatusCode::ACCEPTED, "{kind}: {}", String::from_utf8_lossy(&created));
        let id = serde_json::from_slice::<Value>(&created).unwrap()["id"].as_str().unwrap().to_string();
        assert_eq!(events(&app, &id).await.last().unwrap().0, "done", "{kind}");
    }
}

#[test]
fn golden_mask_pngs_round_trip_bitwise() {
    let engine = base64::engine::general_purpose::STANDARD;
    for kind in KINDS {
        let payload: Value = serde_json::from_str(&golden(kind)).unwrap();
        let request = EditRequest::from_json(&golden(kind)).unwrap();
        assert_eq!(serde_json::to_value(&request).unwrap()["kind"], kind);
        for key in ["object_mask", "reference_mask", "target_mask", "share_mask"] {
            let Some(text) = payload[key].as_str() else { continue };
            let png = engine.decode(text).unwrap();
            let (w, h, raster) = dragedit_core::image::gray_from_png(&png).unwrap();
            let mask = Mask::from_png(&png).unwrap();
            assert_eq!(mask.to_raster(), raster, "{kind}.{key}");
            assert!(raster.iter().all(|v| *v == 0 || *v == 255));
            let again = Mask::from_png(&mask.to_png().unwrap()).unwrap();
            assert_eq!(again, mask);
            assert_eq!(again.to_raster(), raster);
            assert_eq!((w, h), (16, 16));
        }
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn result_replays_bit_for_bit_from_the_stored_bank() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = start(dir.path());
    let bank = make_bank(&app, 8, true).await;
    let payload: Value = serde_json::from_str(&golden("replacing")).unwrap();
    let (_, created) = submit(&app, &bank, payload, json!({"n_gated": 4})).await;
    let id = created["id"].as_str().unwrap();
    events(&app, id).await;
    let job = job(&app, id).await;
    let (_, result) = call(&app, "GET", &format!("/edits/{id}/result"), Body::empty()).await;

    let stored = read_bank(state.store.bank_dir(&bank)).unwrap();
    let replay = pipeline::edit(state.backend.as_ref(), &stored, &job.spec, &job.config, &mut NoObserver).unwrap();
    assert_eq!(replay.image.to_png().unwrap(), result);
}

#[tokio::test(flavor = "multi_thread")]
async fn jobs_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (id, bank, result) = {
        let (_, app) = start(dir.path());
        let bank = make_bank(&app, 6, false).await;
        let (_, created) = submit(&app, &bank, moving(2, 2), json!({"n_gated": 3})).await;
        let id = created["id"].as_str().unwrap().to_string();
        events(&app, &id).await;
        let (_, result) = call(&app, "GET", &format!("/edits/{id}/result"), Body::empty()).await;
        (id, bank, result)
    };

    let (_, app) = start(dir.path());
    let restored = job(&app, &id).await;
    assert_eq!(restored.phase, Phase::Done);
    assert_eq!(events(&app, &id).await.iter().filter(|e| e.0 == "step").count(), 6);
    let (status, again) = submit(&app, &bank, moving(2, 2), json!({"n_gated": 3})).await;
    assert_eq!((status, again["id"].as_str()), (StatusCode::OK, Some(id.as_str())));

    // Simulate a crash mid-sampling: the job is queued again and rerun.
    let job_path = dir.path().join("jobs").join(&id).join("job.json");
    let mut stored: Value = serde_json::from_slice(&std::fs::read(&job_path).unwrap()).unwrap();
    stored["phase"] = "sampling".into();
    std::fs::write(&job_path, stored.to_string()).unwrap();
    drop(app);

    let (_, app) = start(dir.path());
    let evs = events(&app, &id).await;
    assert_eq!(evs.iter().filter(|e| e.0 == "step").count(), 6);
    assert_eq!(evs.last().unwrap().0, "done");
    let rerun = job(&app, &id).await;
    assert_eq!((rerun.phase, rerun.attempt), (Phase::Done, 1));
    let (_, replayed) = call(&app, "GET", &format!("/edits/{id}/result"), Body::empty()).await;
    assert_eq!(replayed, result);
}

#[tokio::test(flavor = "multi_thread")]
async fn health_reports_the_backend() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = start(dir.path());
    let (status, body) = call(&app, "GET", "/healthz", Body::empty()).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["v"], 1);
    assert_eq!(v["image_size"], json!([16, 16]));
}
