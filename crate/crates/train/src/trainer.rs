//! The fine-tuning loop.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spillsense_core::dataset::{DatasetManifest, Split};
use spillsense_core::frame::{ClassLabel, Frame, Liquid, Modality, Room};

pub use crate::augment::AugmentConfig;
use crate::augment::augment;
use crate::classifier::{Provenance, TrainedModel, TrainedOn, HISTORY_FILE, PROVENANCE_FILE, WEIGHTS_FILE};
use crate::early_stop::{early_stop_update, EarlyStopState, StopDecision, StopReason};
use crate::model::SpillNet;
use crate::optim::RmsProp;
use crate::preprocess::preprocess_batch;
use crate::registry::find_backbone;
use crate::weights::WeightsStore;
use crate::{TrainError, TRAINABLE_TAIL_LAYERS};

/// Probability clip used by the loss, as in the common Keras backend.
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub backbone: String,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_train: usize,
    pub batch_val: usize,
    pub batch_test: usize,
    pub trainable_tail_layers: usize,
    pub aug: AugmentConfig,
    pub seed: u64,
    /// Subset filters the manifest was narrowed with; recorded only.
    pub room: Option<Room>,
    pub liquid: Option<Liquid>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone: "VGG19".into(),
            learning_rate: 1e-5,
            patience: 5,
            max_epochs: 50,
            batch_train: 8,
            batch_val: 8,
            batch_test: 2,
            trainable_tail_layers: TRAINABLE_TAIL_LAYERS,
            aug: AugmentConfig::default(),
            seed: 0,
            room: None,
            liquid: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        find_backbone(&self.backbone)?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::Config("max_epochs must be >= 1".into()));
        }
        if self.batch_train == 0 || self.batch_val == 0 || self.batch_test == 0 {
            return Err(TrainError::Config("batch sizes must be >= 1".into()));
        }
        if self.trainable_tail_layers != TRAINABLE_TAIL_LAYERS {
            return Err(TrainError::Config(format!(
                "the recipe fine-tunes exactly {TRAINABLE_TAIL_LAYERS} backbone layers"
            )));
        }
        self.aug.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochMetrics>,
    /// Last epoch run.
    pub stopped_epoch: usize,
    /// Epoch whose weights were kept.
    pub restored_epoch: usize,
    /// None when the run reached `max_epochs`.
    pub stop_reason: Option<StopReason>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,train_acc,val_acc\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.9},{:.9},{:.6},{:.6}",
                e.epoch, e.train_loss, e.val_loss, e.train_acc, e.val_acc
            );
        }
        out
    }

    /// Epoch with the lowest recorded val_loss (first on ties).
    pub fn argmin_val_loss(&self) -> Option<usize> {
        self.epochs
            .iter()
            .fold(None::<&EpochMetrics>, |best, e| match best {
                Some(b) if b.val_loss <= e.val_loss => Some(b),
                _ => Some(e),
            })
            .map(|e| e.epoch)
    }

    pub fn final_val_acc(&self) -> Option<f64> {
        self.epochs.iter().find(|e| e.epoch == self.restored_epoch).map(|e| e.val_acc)
    }
}

/// Observes (and may rewrite) each epoch's metrics before the stopping
/// decision is taken.
pub trait EpochHook {
    fn after_epoch(&mut self, metrics: &mut EpochMetrics, model: &SpillNet);
}

impl<F: FnMut(&mut EpochMetrics, &SpillNet)> EpochHook for F {
    fn after_epoch(&mut self, metrics: &mut EpochMetrics, model: &SpillNet) {
        self(metrics, model)
    }
}

/// Per-sample clipped binary cross-entropy, averaged.
pub fn bce_loss(probs: &Tensor, targets: &Tensor) -> Result<Tensor, TrainError> {
    let p = probs.clamp(BCE_EPSILON as f32, 1.0 - BCE_EPSILON as f32)?;
    let pos = (targets * p.log()?)?;
    let neg = (targets.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.neg()?.mean_all()?)
}

struct Sample {
    frame: Frame,
    label: ClassLabel,
}

fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<Sample>, TrainError> {
    manifest
        .split(split)
        .map(|e| {
            let path = manifest.absolute_path(e);
            let frame = Frame::load_png(&path, e.modality)?;
            Ok(Sample {
                frame,
                label: e.class_label,
            })
        })
        .collect()
}

fn targets(labels: &[ClassLabel], device: &candle_core::Device) -> Result<Tensor, TrainError> {
    let t: Vec<f32> = labels.iter().map(|l| l.target() as f32).collect();
    Ok(Tensor::from_vec(t, (labels.len(), 1), device)?)
}

fn correct(probs: &Tensor, labels: &[ClassLabel]) -> Result<usize, TrainError> {
    let p: Vec<f32> = probs.flatten_all()?.to_vec1()?;
    Ok(p.iter()
        .zip(labels)
        .filter(|(p, l)| ClassLabel::from_confidence(**p) == **l)
        .count())
}

fn available_memory() -> Option<u64> {
    let text = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = text.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Training run with optional injection points.
pub struct Trainer<'a> {
    config: TrainConfig,
    store: WeightsStore,
    hook: Option<Box<dyn EpochHook + 'a>>,
    memory_limit: Option<u64>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig) -> Self {
        Self {
            config,
            store: WeightsStore::from_env(),
            hook: None,
            memory_limit: None,
        }
    }

    pub fn with_store(mut self, store: WeightsStore) -> Self {
        self.store = store;
        self
    }

    pub fn with_hook(mut self, hook: impl EpochHook + 'a) -> Self {
        self.hook = Some(Box::new(hook));
        self
    }

    /// Override the detected available memory (bytes).
    pub fn with_memory_limit(mut self, bytes: u64) -> Self {
        self.memory_limit = Some(bytes);
        self
    }

    pub fn run(mut self, manifest: &DatasetManifest, out_dir: &Path) -> Result<(TrainedModel, TrainHistory), TrainError> {
        let cfg = self.config.clone();
        cfg.validate()?;
        let spec = find_backbone(&cfg.backbone)?;

        let counts = manifest.split_counts();
        if counts.get(&Split::Unassigned).copied().unwrap_or(0) == manifest.len() {
            return Err(TrainError::Unsplit);
        }
        let modalities: BTreeSet<Modality> = manifest
            .entries
            .iter()
            .filter(|e| e.split != Split::Unassigned)
            .map(|e| e.modality)
            .collect();
        if modalities.len() != 1 {
            let names: Vec<_> = modalities.iter().map(|m| m.as_str()).collect();
            return Err(TrainError::MixedModality(names.join(", ")));
        }
        let modality = *modalities.iter().next().expect("one modality");
        if manifest.split(Split::Train).next().is_none() {
            return Err(TrainError::EmptySplit("train"));
        }
        if manifest.split(Split::Val).next().is_none() {
            return Err(TrainError::EmptySplit("val"));
        }

        let net = SpillNet::build(&spec, &self.store, cfg.seed)?;
        let needed = net.activation_bytes(cfg.batch_train)?;
        if let Some(avail) = self.memory_limit.or_else(available_memory) {
            if needed > avail {
                let per_sample = needed / cfg.batch_train as u64;
                return Err(TrainError::OutOfMemory {
                    needed_mb: needed / 1_000_000,
                    available_mb: avail / 1_000_000,
                    suggested_batch: (avail / per_sample.max(1)).max(1) as usize,
                });
            }
        }

        let train = load_split(manifest, Split::Train)?;
        let val = load_split(manifest, Split::Val)?;
        let device = net.device().clone();

        // Validation frames are never augmented, so the frozen prefix output
        // is fixed for the whole run.
        let mut val_batches = Vec::new();
        for chunk in val.chunks(cfg.batch_val) {
            let frames: Vec<&Frame> = chunk.iter().map(|s| &s.frame).collect();
            let labels: Vec<ClassLabel> = chunk.iter().map(|s| s.label).collect();
            let features = net.forward_prefix(&preprocess_batch(&frames, &spec, &device)?)?;
            val_batches.push((features, targets(&labels, &device)?, labels));
        }

        std::fs::create_dir_all(out_dir).map_err(|e| TrainError::io(out_dir, e))?;
        let mut opt = RmsProp::new(net.vars().to_vec(), cfg.learning_rate)?;
        let mut state = EarlyStopState::default();
        let mut best = net.snapshot()?;
        let mut history = TrainHistory {
            epochs: Vec::new(),
            stopped_epoch: 0,
            restored_epoch: 0,
            stop_reason: None,
        };
        let mut order: Vec<usize> = (0..train.len()).collect();

        for epoch in 1..=cfg.max_epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(epoch as u64);
            order.sort_unstable();
            order.shuffle(&mut rng);

            let (mut loss_sum, mut hits) = (0.0f64, 0usize);
            for batch in order.chunks(cfg.batch_train) {
                let frames: Vec<Frame> = batch.iter().map(|&i| augment(&train[i].frame, &cfg.aug, &mut rng)).collect();
                let labels: Vec<ClassLabel> = batch.iter().map(|&i| train[i].label).collect();
                let refs: Vec<&Frame> = frames.iter().collect();
                let x = preprocess_batch(&refs, &spec, &device)?;
                let probs = candle_nn::ops::sigmoid(&net.forward_tail(&net.forward_prefix(&x)?)?)?;
                let loss = bce_loss(&probs, &targets(&labels, &device)?)?;
                opt.step(&loss.backward()?)?;
                loss_sum += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * batch.len() as f64;
                hits += correct(&probs, &labels)?;
            }

            let (mut val_loss_sum, mut val_hits) = (0.0f64, 0usize);
            for (features, t, labels) in &val_batches {
                let probs = candle_nn::ops::sigmoid(&net.forward_tail(features)?)?;
                let loss = bce_loss(&probs, t)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                val_loss_sum += loss * labels.len() as f64;
                val_hits += correct(&probs, labels)?;
            }

            let mut metrics = EpochMetrics {
                epoch,
                train_loss: loss_sum / train.len() as f64,
                val_loss: val_loss_sum / val.len() as f64,
                train_acc: hits as f64 / train.len() as f64,
                val_acc: val_hits as f64 / val.len() as f64,
            };
            if let Some(hook) = self.hook.as_mut() {
                hook.after_epoch(&mut metrics, &net);
            }
            log::info!(
                "epoch {epoch}: loss {:.6} acc {:.4} val_loss {:.6} val_acc {:.4}",
                metrics.train_loss,
                metrics.train_acc,
                metrics.val_loss,
                metrics.val_acc
            );
            history.epochs.push(metrics);
            history.stopped_epoch = epoch;

            let (next, decision) = early_stop_update(state, epoch, metrics.val_loss, cfg.patience);
            if next.best_epoch == epoch {
                best = net.snapshot()?;
            }
            state = next;
            if let StopDecision::Stop(reason) = decision {
                history.stop_reason = Some(reason);
                break;
            }
        }

        if state.best_epoch > 0 {
            net.restore(&best)?;
            history.restored_epoch = state.best_epoch;
        } else {
            // every epoch was non-finite; keep the initial weights
            net.restore(&best)?;
            history.restored_epoch = 0;
        }
        log::info!(
            "stopped after epoch {}, restored epoch {}",
            history.stopped_epoch,
            history.restored_epoch
        );

        let weights_path = out_dir.join(WEIGHTS_FILE);
        net.save(&weights_path)?;
        let size_bytes = std::fs::metadata(&weights_path)
            .map_err(|e| TrainError::io(&weights_path, e))?
            .len();
        let history_path = out_dir.join(HISTORY_FILE);
        std::fs::write(&history_path, history.to_csv()).map_err(|e| TrainError::io(&history_path, e))?;

        let provenance = Provenance {
            backbone: spec.name.to_string(),
            input_shape: [3, spec.native_input.1 as usize, spec.native_input.0 as usize],
            preprocess_id: spec.preprocess_id,
            trained_on: TrainedOn {
                modality,
                room: cfg.room.clone(),
                liquid: cfg.liquid.clone(),
                manifest_hash: manifest.content_hash(),
                seed: cfg.seed,
            },
            config: cfg,
            freeze_report: net.freeze_report(),
            stopped_epoch: history.stopped_epoch,
            restored_epoch: history.restored_epoch,
            restore_best_weights: true,
            size_bytes,
        };
        provenance.save(&out_dir.join(PROVENANCE_FILE))?;
        let model = TrainedModel::from_parts(net, provenance, PathBuf::from(&weights_path));
        Ok((model, history))
    }
}

/// Train with default weights store and no hooks.
pub fn train(config: TrainConfig, manifest: &DatasetManifest, out_dir: &Path) -> Result<(TrainedModel, TrainHistory), TrainError> {
    Trainer::new(config).run(manifest, out_dir)
}
