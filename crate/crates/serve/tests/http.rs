use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use reqwest::StatusCode;
use serde_json::{json, Value};
use spillsense_core::bench::{ModelError, SpillClassifier};
use spillsense_core::frame::{Frame, Modality};
use spillsense_serve::session::{read_log, LogRecord};
use spillsense_serve::{router, start, AppState, BoxedModel, ModelLoader, ServiceConfig};

/// Confidence is the mean red value over 255, after an optional delay.
struct Stub {
    modality: Modality,
    delay: Duration,
}

impl SpillClassifier for Stub {
    fn name(&self) -> &str {
        "stub"
    }

    fn modality(&self) -> Modality {
        self.modality
    }

    fn predict(&self, frames: &[Frame]) -> Result<Vec<f32>, ModelError> {
        std::thread::sleep(self.delay);
        Ok(frames
            .iter()
            .map(|f| {
                let sum: f64 = f.pixels().iter().step_by(3).map(|v| *v as f64).sum();
                (sum / (f.width() * f.height()) as f64 / 255.0) as f32
            })
            .collect())
    }
}

fn stub_loader(modality: Modality, delay: Duration, load_time: Duration) -> ModelLoader {
    Box::new(move || {
        std::thread::sleep(load_time);
        Ok(Box::new(Stub { modality, delay }) as BoxedModel)
    })
}

async fn serve(state: Arc<AppState>) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
    format!("http://{addr}")
}

async fn wait_ready(client: &reqwest::Client, base: &str) -> Value {
    for _ in 0..200 {
        let r = client.get(format!("{base}/health")).send().await.unwrap();
        if r.status() == StatusCode::OK {
            return r.json().await.unwrap();
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    panic!("service never became ready");
}

fn config(root: &Path, modality: Modality) -> ServiceConfig {
    ServiceConfig::new(root.join("model"), modality, root.join("sessions"))
}

fn thermal_png(dir: &Path, name: &str, level: u8) -> PathBuf {
    let path = dir.join(name);
    Frame::filled(160, 120, Modality::Thermal, [level; 3]).save_png(&path).unwrap();
    path
}

#[tokio::test]
async fn capture_session_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let state = start(
        config(dir.path(), Modality::Thermal),
        stub_loader(Modality::Thermal, Duration::ZERO, Duration::ZERO),
    )
    .unwrap();
    let base = serve(state).await;
    let c = reqwest::Client::new();

    let health = wait_ready(&c, &base).await;
    assert_eq!(health["model"], "stub");
    assert_eq!(health["modality"], "thermal");
    assert!(health["uptime"].as_f64().unwrap() >= 0.0);

    let r = c.get(format!("{base}/verdict/latest")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    let r = c.post(format!("{base}/capture")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);
    let r = c.post(format!("{base}/session/label")).json(&json!({"class_label": "spill"})).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);
    let r = c
        .post(format!("{base}/session/start"))
        .header("content-type", "application/json")
        .body("{\"room\":")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let body: Value = r.json().await.unwrap();
    assert!(body["error"].is_string());

    let r = c
        .post(format!("{base}/session/start"))
        .json(&json!({"room": "atrium", "liquid": "water"}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let session_id = r.json::<Value>().await.unwrap()["session_id"].as_str().unwrap().to_string();
    let r = c.post(format!("{base}/session/label")).json(&json!({"class_label": "spill"})).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);

    let mut verdicts = Vec::new();
    for i in 0..5 {
        let r = c.post(format!("{base}/capture")).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::OK);
        let body: Value = r.json().await.unwrap();
        assert_eq!(body["pair_index"], i + 1);
        assert!(Path::new(body["thermal_path"].as_str().unwrap()).is_file());
        assert!(Path::new(body["rgb_path"].as_str().unwrap()).is_file());
        verdicts.push(body["verdict"].clone());
    }
    let latest: Value = c.get(format!("{base}/verdict/latest")).send().await.unwrap().json().await.unwrap();
    assert_eq!(latest, verdicts[4]);

    // three right, two wrong
    let mut last = Value::Null;
    for (i, v) in verdicts.iter().enumerate() {
        let predicted = v["label"].as_str().unwrap();
        let truth = match (i < 3, predicted) {
            (true, p) => p,
            (false, "spill") => "no_spill",
            (false, _) => "spill",
        };
        let r = c
            .post(format!("{base}/demo/outcome"))
            .json(&json!({"frame_ref": v["frame_ref"], "ground_truth": truth}))
            .send()
            .await
            .unwrap();
        assert_eq!(r.status(), StatusCode::OK);
        last = r.json().await.unwrap();
    }
    assert!((last["demo_accuracy"].as_f64().unwrap() - 0.6).abs() < 1e-12);

    let r = c
        .post(format!("{base}/demo/outcome"))
        .json(&json!({"frame_ref": 999, "ground_truth": "spill"}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);

    let log = read_log(&dir.path().join("sessions").join(&session_id)).unwrap();
    let n_verdicts = log.iter().filter(|r| matches!(r, LogRecord::Verdict { .. })).count();
    let n_outcomes = log.iter().filter(|r| matches!(r, LogRecord::Outcome { .. })).count();
    assert_eq!((n_verdicts, n_outcomes), (5, 5));
}

#[tokio::test]
async fn not_ready_until_model_loads() {
    let dir = tempfile::tempdir().unwrap();
    let state = start(
        config(dir.path(), Modality::Thermal),
        stub_loader(Modality::Thermal, Duration::ZERO, Duration::from_millis(600)),
    )
    .unwrap();
    let base = serve(state).await;
    let c = reqwest::Client::new();
    let r = c.get(format!("{base}/health")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::SERVICE_UNAVAILABLE);
    let r = c.post(format!("{base}/capture")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::SERVICE_UNAVAILABLE);
    wait_ready(&c, &base).await;
}

#[tokio::test]
async fn modality_mismatch_keeps_service_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    let state = start(
        config(dir.path(), Modality::Thermal),
        stub_loader(Modality::Rgb, Duration::ZERO, Duration::ZERO),
    )
    .unwrap();
    let base = serve(state.clone()).await;
    let c = reqwest::Client::new();
    for _ in 0..100 {
        if matches!(state.readiness(), spillsense_serve::Readiness::Failed(_)) {
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let r = c.get(format!("{base}/health")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::SERVICE_UNAVAILABLE);
    let body: Value = r.json().await.unwrap();
    assert!(body["error"].as_str().unwrap().contains("rgb"), "{body}");
}

#[tokio::test]
async fn missing_model_dir_reports_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), Modality::Thermal);
    let loader = spillsense_serve::trained_model_loader(&cfg.model_dir);
    let state = start(cfg, loader).unwrap();
    for _ in 0..100 {
        if matches!(state.readiness(), spillsense_serve::Readiness::Failed(_)) {
            return;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("loader never failed: {:?}", state.readiness());
}

#[test]
fn combined_without_calibration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let err = start(
        config(dir.path(), Modality::Combined),
        stub_loader(Modality::Combined, Duration::ZERO, Duration::ZERO),
    )
    .err()
    .expect("config error");
    assert!(err.to_string().contains("calib"), "{err}");
}

#[tokio::test]
async fn classify_matches_model_output() {
    let dir = tempfile::tempdir().unwrap();
    let state = start(
        config(dir.path(), Modality::Thermal),
        stub_loader(Modality::Thermal, Duration::ZERO, Duration::ZERO),
    )
    .unwrap();
    let base = serve(state).await;
    let c = reqwest::Client::new();
    wait_ready(&c, &base).await;
    for (name, level, label) in [("hot.png", 200u8, "spill"), ("cold.png", 40, "no_spill")] {
        let path = thermal_png(dir.path(), name, level);
        let v: Value = c
            .post(format!("{base}/classify"))
            .json(&json!({"path": path}))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        assert_eq!(v["label"], label);
        assert!((v["confidence"].as_f64().unwrap() - level as f64 / 255.0).abs() < 1e-6);
    }
    let r = c
        .post(format!("{base}/classify"))
        .json(&json!({"path": dir.path().join("absent.png")}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_queue_rejects_with_429() {
    let dir = tempfile::tempdir().unwrap();
    let state = start(
        config(dir.path(), Modality::Thermal),
        stub_loader(Modality::Thermal, Duration::from_millis(300), Duration::ZERO),
    )
    .unwrap();
    let base = serve(state).await;
    let c = reqwest::Client::new();
    wait_ready(&c, &base).await;
    let path = thermal_png(dir.path(), "f.png", 100);
    let mut handles = Vec::new();
    for _ in 0..12 {
        let (c, url, path) = (c.clone(), format!("{base}/classify"), path.clone());
        handles.push(tokio::spawn(async move {
            c.post(url).json(&json!({"path": path})).send().await.unwrap().status()
        }));
    }
    let mut codes = Vec::new();
    for h in handles {
        codes.push(h.await.unwrap());
    }
    let ok = codes.iter().filter(|s| **s == StatusCode::OK).count();
    let busy = codes.iter().filter(|s| **s == StatusCode::TOO_MANY_REQUESTS).count();
    assert_eq!(ok + busy, 12, "{codes:?}");
    assert!(ok >= 1 && busy >= 1, "{codes:?}");
    assert!(ok <= 1 + spillsense_serve::QUEUE_DEPTH, "{codes:?}");
}
