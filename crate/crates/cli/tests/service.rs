use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use iceedit_cli::service::{router, router_with_assets, to_gray, AppState, Export, ServiceConfig};
use iceedit_core::engines::{Engine, TinyCnn};
use iceedit_core::harness::{generate_case, save_engine, CorpusSpec, EngineId, ExperimentConfig, NamedEngine};
use iceedit_core::interaction::{select_test_edit, PixelScribble};
use iceedit_core::phantom::{save_case, CaseBundle, PhantomParams};
use iceedit_core::session::{Session, SessionLog};
use iceedit_core::volume::{signed_distance, BinaryMask};

const CASE: &str = "test-000";

fn tiny_case() -> CaseBundle {
    let spec = CorpusSpec {
        n_train: 1,
        n_test: 1,
        dims: [32, 32, 32],
        phantom: PhantomParams {
            base_radii: [8.0, 7.0, 7.0],
            n_frames: 6,
            ..PhantomParams::default()
        },
        error_level: 2.0,
        ..CorpusSpec::default()
    };
    let mut case = generate_case(&spec, CASE, 1, 0).unwrap();
    // a uniformly shrunk initial mask, so every scribble on the truth pulls outward
    let phi = signed_distance(&case.y).unwrap();
    case.y_init = BinaryMask::from_fn(*case.y.meta(), |v| phi.get(v) <= -2.0);
    case
}

struct Fixture {
    dir: tempfile::TempDir,
    case: CaseBundle,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let case = tiny_case();
        save_case(&case, &dir.path().join("cases").join(CASE)).unwrap();
        Self { dir, case }
    }

    fn config(&self) -> ServiceConfig {
        let mut c = ServiceConfig::new(self.dir.path().join("cases"));
        c.checkpoint_dir = Some(self.dir.path().join("models"));
        c
    }

    fn add_checkpoint(&self, id: EngineId) {
        let named = NamedEngine {
            id,
            engine: Engine::Cnn {
                name: id.as_str().into(),
                model: Box::new(TinyCnn::new(&[3, 8, 8, 1], 0).unwrap()),
            },
            report: None,
        };
        save_engine(&ExperimentConfig::default(), &named, &self.dir.path().join("models")).unwrap();
    }

    /// The harness's test-time edit for the initial segmentation.
    fn scribble(&self) -> PixelScribble {
        let planes = self.case.frames.planes();
        let cfg = ServiceConfig::new("").edit;
        let e = select_test_edit(&self.case.y_init, &self.case.cas_contours, &self.case.frames, &planes, &BTreeSet::new(), &cfg)
            .unwrap();
        PixelScribble::from_scribble(&e.scribble, &self.case.frames).unwrap()
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req.header("content-type", "application/json").body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn create(app: &Router, engine: &str) -> String {
    let (s, v) = call_json(app, "POST", "/api/sessions", Some(json!({"case": CASE, "engine": engine}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn engines_and_session_creation() {
    let fx = Fixture::new();
    let app = router(AppState::new(fx.config()));
    let (_, v) = call_json(&app, "GET", "/api/engines", None).await;
    assert_eq!(v, json!(["no_edit", "geometric"]));

    let (s, v) = call_json(&app, "POST", "/api/sessions", Some(json!({"case": CASE, "engine": "foo"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "unknown_engine");
    assert!(v["message"].as_str().unwrap().contains("geometric"));
    // a learned engine without a checkpoint is unknown too
    let (s, _) = call_json(&app, "POST", "/api/sessions", Some(json!({"case": CASE, "engine": "editing"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, v) = call_json(&app, "POST", "/api/sessions", Some(json!({"case": "nope"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "unknown_case");
    let (s, _) = call_json(&app, "POST", "/api/sessions", Some(json!({"case": "../cases"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    fx.add_checkpoint(EngineId::Editing);
    let (_, v) = call_json(&app, "GET", "/api/engines", None).await;
    assert_eq!(v, json!(["no_edit", "geometric", "editing"]));
    let a = create(&app, "editing").await;
    let b = create(&app, "geometric").await;
    assert_ne!(a, b);
    let (s, v) = call_json(&app, "GET", "/api/sessions/zzz/frames", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "unknown_session");
}

#[tokio::test]
async fn frames_images_and_contours() {
    let fx = Fixture::new();
    let app = router(AppState::new(fx.config()));
    let id = create(&app, "geometric").await;
    let (_, frames) = call_json(&app, "GET", &format!("/api/sessions/{id}/frames"), None).await;
    let frames = frames.as_array().unwrap();
    assert_eq!(frames.len(), 6);
    let f = &frames[2];
    let (rows, cols) = (f["rows"].as_u64().unwrap() as usize, f["cols"].as_u64().unwrap() as usize);

    let (s, png_bytes) = call(&app, "GET", &format!("/api/sessions/{id}/frames/2/image.png"), None).await;
    assert_eq!(s, StatusCode::OK);
    let decoder = png::Decoder::new(png_bytes.as_slice());
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!((info.height as usize, info.width as usize), (rows, cols));
    assert_eq!(info.color_type, png::ColorType::Grayscale);

    let (_, grid) = call_json(&app, "GET", &format!("/api/sessions/{id}/frames/2/image"), None).await;
    let values: Vec<f64> = serde_json::from_value(grid["values"].clone()).unwrap();
    assert_eq!(values.len(), rows * cols);
    let expect: Vec<u8> = values.iter().map(|&v| to_gray(v)).collect();
    assert_eq!(&buf[..rows * cols], expect.as_slice());
    assert!(values.iter().any(|&v| v > 0.0));

    let (_, c) = call_json(&app, "GET", &format!("/api/sessions/{id}/frames/2/contours"), None).await;
    for key in ["cas", "current", "initial"] {
        assert!(!c[key].as_array().unwrap().is_empty(), "{key}");
    }
    // fresh session: current equals initial
    assert_eq!(c["current"], c["initial"]);

    let (s, v) = call_json(&app, "GET", &format!("/api/sessions/{id}/frames/99/contours"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "unknown_frame");
    let (s, _) = call(&app, "GET", &format!("/api/sessions/{id}/frames/99/image.png"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[test]
fn gray_levels_round_half_up() {
    assert_eq!(to_gray(0.0), 0);
    assert_eq!(to_gray(1.0), 255);
    assert_eq!(to_gray(0.5 / 255.0), 1);
    assert_eq!(to_gray(0.49 / 255.0), 0);
    assert_eq!(to_gray(-1.0), 0);
    assert_eq!(to_gray(2.0), 255);
}

async fn export(app: &Router, id: &str) -> Export {
    let (s, b) = call(app, "GET", &format!("/api/sessions/{id}/export"), None).await;
    assert_eq!(s, StatusCode::OK);
    serde_json::from_slice(&b).unwrap()
}

#[tokio::test]
async fn edit_undo_and_resubmit() {
    let fx = Fixture::new();
    let app = router(AppState::new(fx.config()));
    let id = create(&app, "geometric").await;
    let other = create(&app, "geometric").await;
    let before = export(&app, &id).await;
    let scribble = serde_json::to_value(fx.scribble()).unwrap();

    let (s, first) = call(&app, "POST", &format!("/api/sessions/{id}/edits"), Some(scribble.clone())).await;
    assert_eq!(s, StatusCode::OK);
    let out: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(out["t"], 0);
    assert!(out["metrics"]["overall_p95_mm"].as_f64().unwrap().is_finite());
    assert!(!out["changed_frames"].as_array().unwrap().is_empty());
    let after = export(&app, &id).await;
    assert_ne!(after.mask_crc32, before.mask_crc32);
    assert_eq!(after.log.scribbles.len(), 1);
    assert!(export(&app, &other).await.log.scribbles.is_empty());

    let (_, m) = call_json(&app, "GET", &format!("/api/sessions/{id}/metrics"), None).await;
    assert_eq!(m["iterations"].as_array().unwrap().len(), 1);
    assert_eq!(m["iterations"][0]["metrics"], out["metrics"]);

    let (s, u) = call_json(&app, "POST", &format!("/api/sessions/{id}/undo"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(u["t"], Value::Null);
    assert_eq!(export(&app, &id).await, before);
    let (s, v) = call_json(&app, "POST", &format!("/api/sessions/{id}/undo"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["code"], "nothing_to_undo");

    // the same scribble again gives the same response body
    let (_, again) = call(&app, "POST", &format!("/api/sessions/{id}/edits"), Some(scribble.clone())).await;
    assert_eq!(again, first);
    let (_, second) = call_json(&app, "POST", &format!("/api/sessions/{id}/edits"), Some(scribble)).await;
    assert_eq!(second["t"], 1);
}

#[tokio::test]
async fn malformed_scribbles_are_rejected() {
    let fx = Fixture::new();
    let app = router(AppState::new(fx.config()));
    let id = create(&app, "geometric").await;
    let uri = format!("/api/sessions/{id}/edits");
    let (s, v) = call_json(&app, "POST", &uri, Some(json!({"frame_id": 0, "path": [[10.0, 10.0]]}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "invalid_scribble");
    let (s, _) = call_json(&app, "POST", &uri, Some(json!({"frame_id": 0, "path": [[5.0, 5.0], [25.0, 30.0]]}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, v) = call_json(&app, "POST", &uri, Some(json!({"frame_id": 42, "path": [[5.0, 5.0], [5.0, 6.0]]}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "unknown_frame");
    // nothing was recorded
    assert!(export(&app, &id).await.log.scribbles.is_empty());
}

#[tokio::test]
async fn concurrent_edit_gets_conflict() {
    let fx = Fixture::new();
    let state = AppState::new(fx.config());
    let app = router(state.clone());
    let id = create(&app, "geometric").await;
    let handle = state.session_handle(&id).unwrap();
    let guard = handle.lock().await;
    let body = serde_json::to_value(fx.scribble()).unwrap();
    let (s, v) = call_json(&app, "POST", &format!("/api/sessions/{id}/edits"), Some(body.clone())).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["code"], "conflict");
    drop(guard);
    let (s, _) = call_json(&app, "POST", &format!("/api/sessions/{id}/edits"), Some(body)).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn persisted_log_replays_bit_exact() {
    let fx = Fixture::new();
    let mut config = fx.config();
    let logs = fx.dir.path().join("sessions");
    config.session_dir = Some(logs.clone());
    let app = router(AppState::new(config));
    let id = create(&app, "geometric").await;
    let body = serde_json::to_value(fx.scribble()).unwrap();
    let (s, _) = call_json(&app, "POST", &format!("/api/sessions/{id}/edits"), Some(body)).await;
    assert_eq!(s, StatusCode::OK);
    let exported = export(&app, &id).await;

    let log: SessionLog = serde_json::from_slice(&std::fs::read(logs.join(format!("{id}.json"))).unwrap()).unwrap();
    assert_eq!(log, exported.log);
    let replayed = Session::replay(&log, Arc::new(fx.case.clone()), Arc::new(Engine::Geometric)).unwrap();
    assert_eq!(crc32fast::hash(replayed.current().as_bytes()), exported.mask_crc32);
}

#[tokio::test]
async fn static_assets_fall_back_outside_api() {
    let fx = Fixture::new();
    let assets = fx.dir.path().join("static");
    std::fs::create_dir_all(&assets).unwrap();
    std::fs::write(assets.join("index.html"), "<html></html>").unwrap();
    let app = router_with_assets(AppState::new(fx.config()), Some(Path::new(&assets)));
    let (s, b) = call(&app, "GET", "/index.html", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b, b"<html></html>");
    let (s, _) = call(&app, "GET", "/api/engines", None).await;
    assert_eq!(s, StatusCode::OK);
}
