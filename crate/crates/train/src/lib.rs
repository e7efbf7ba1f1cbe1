//! Backbone registry, fine-tuning harness and trained spill classifiers.
//!
//! Training freezes every backbone layer except the last five, appends a
//! global-average-pool + sigmoid head and optimises binary cross-entropy
//! with RMSprop under early stopping.

pub mod arch;
pub mod augment;
pub mod classifier;
pub mod early_stop;
pub mod model;
pub mod optim;
pub mod preprocess;
pub mod registry;
pub mod trainer;
pub mod weights;

pub use classifier::TrainedModel;
pub use early_stop::{early_stop_update, EarlyStopState, StopDecision};
pub use model::{FreezeReport, SpillNet};
pub use registry::{find_backbone, list_backbones, BackboneSpec, PreprocessId};
pub use trainer::{train, AugmentConfig, TrainConfig, TrainHistory};
pub use weights::WeightsStore;

/// Layers left trainable at the end of the backbone.
pub const TRAINABLE_TAIL_LAYERS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),
    #[error("unknown preprocessing `{0}`")]
    UnknownPreprocess(String),
    #[error("pretrained weights for {backbone} are not available at {path} and generation is disabled")]
    WeightsUnavailable { backbone: String, path: String },
    #[error("weights file {path} does not match {backbone}: {reason}")]
    WeightsMismatch { backbone: String, path: String, reason: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("manifest has not been split")]
    Unsplit,
    #[error("training needs a single modality, manifest has {0}")]
    MixedModality(String),
    #[error(
        "estimated {needed_mb} MB for training exceeds {available_mb} MB available; try --batch {suggested_batch}"
    )]
    OutOfMemory {
        needed_mb: u64,
        available_mb: u64,
        suggested_batch: usize,
    },
    #[error("frame must have 3 channels")]
    Channels,
    #[error("i/o on {path}: {message}")]
    Io { path: String, message: String },
    #[error("failed to save weights to {path}: {message}")]
    Save { path: String, message: String },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Geometry(#[from] spillsense_core::geometry::GeometryError),
    #[error(transparent)]
    Frame(#[from] spillsense_core::frame::FrameError),
}

impl TrainError {
    pub(crate) fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        TrainError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}
