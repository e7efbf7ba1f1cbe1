//! The single inference worker and its bounded queue.

use std::sync::{Arc, RwLock};
use std::time::Instant;

use chrono::Utc;
use spillsense_core::bench::SpillClassifier;
use spillsense_core::frame::{ClassLabel, Frame, FramePair, Modality};
use spillsense_core::geometry::{align_rgb, fuse_side_by_side, Calibration};
use tokio::sync::{mpsc, oneshot};

use crate::session::ClassVerdict;

/// Requests waiting behind the one in progress.
pub const QUEUE_DEPTH: usize = 4;

pub type BoxedModel = Box<dyn SpillClassifier + Send>;
pub type ModelLoader = Box<dyn FnOnce() -> Result<BoxedModel, String> + Send>;

#[derive(Debug, Clone)]
pub enum Input {
    Frame(Frame),
    Pair(FramePair),
}

pub struct Job {
    pub input: Input,
    pub frame_ref: u64,
    pub reply: oneshot::Sender<Result<ClassVerdict, String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Readiness {
    Loading,
    Ready { model: String, modality: Modality },
    Failed(String),
}

/// Build the frame the model consumes.
pub fn model_input(input: Input, modality: Modality, calib: Option<&Calibration>) -> Result<Frame, String> {
    match (input, modality) {
        (Input::Frame(f), m) if f.modality == m => Ok(f),
        (Input::Frame(f), m) => Err(format!("service expects {m} frames, got {}", f.modality)),
        (Input::Pair(p), Modality::Thermal) => Ok(p.thermal().clone()),
        (Input::Pair(p), Modality::Rgb) => Ok(p.rgb().clone()),
        (Input::Pair(p), Modality::Combined) => {
            let calib = calib.ok_or("combined inference needs a calibration")?;
            let aligned = align_rgb(p.rgb(), calib).map_err(|e| e.to_string())?;
            fuse_side_by_side(p.thermal(), &aligned).map_err(|e| e.to_string())
        }
    }
}

fn classify(model: &dyn SpillClassifier, job_input: Input, frame_ref: u64, calib: Option<&Calibration>) -> Result<ClassVerdict, String> {
    let start = Instant::now();
    let frame = model_input(job_input, model.modality(), calib)?;
    let probs = model.predict(std::slice::from_ref(&frame)).map_err(|e| e.to_string())?;
    let confidence = *probs.first().ok_or("model returned no output")?;
    let label = ClassLabel::from_confidence(confidence);
    Ok(ClassVerdict {
        label,
        confidence,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        frame_ref,
        timestamp: Utc::now(),
    })
}

/// Spawn the worker thread. It loads the model, checks the modality and
/// then serves jobs until every sender is dropped.
pub fn spawn(
    loader: ModelLoader,
    expected: Modality,
    calib: Option<Calibration>,
    readiness: Arc<RwLock<Readiness>>,
) -> mpsc::Sender<Job> {
    let (tx, mut rx) = mpsc::channel::<Job>(QUEUE_DEPTH);
    std::thread::Builder::new()
        .name("inference".into())
        .spawn(move || {
            let set = |r: Readiness| *readiness.write().expect("readiness lock") = r;
            let model = match loader() {
                Ok(m) if m.modality() == expected => m,
                Ok(m) => {
                    set(Readiness::Failed(format!(
                        "model was trained on {} but the service is configured for {expected}",
                        m.modality()
                    )));
                    return;
                }
                Err(e) => {
                    set(Readiness::Failed(e));
                    return;
                }
            };
            set(Readiness::Ready {
                model: model.name().to_string(),
                modality: model.modality(),
            });
            while let Some(job) = rx.blocking_recv() {
                let verdict = classify(model.as_ref(), job.input, job.frame_ref, calib.as_ref());
                let _ = job.reply.send(verdict);
            }
        })
        .expect("spawn inference thread");
    tx
}
