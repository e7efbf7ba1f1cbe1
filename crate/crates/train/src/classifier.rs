//! A trained model on disk and in memory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spillsense_core::bench::{ModelError, SpillClassifier};
use spillsense_core::frame::{ClassLabel, Frame, Liquid, Modality, Room};

use crate::model::{FreezeReport, SpillNet};
use crate::preprocess::preprocess_batch;
use crate::registry::{find_backbone, PreprocessId};
use crate::trainer::TrainConfig;
use crate::TrainError;

pub const WEIGHTS_FILE: &str = "model.weights";
pub const HISTORY_FILE: &str = "history.csv";
pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedOn {
    pub modality: Modality,
    pub room: Option<Room>,
    pub liquid: Option<Liquid>,
    pub manifest_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub backbone: String,
    /// (channels, height, width)
    pub input_shape: [usize; 3],
    pub preprocess_id: PreprocessId,
    pub trained_on: TrainedOn,
    pub config: TrainConfig,
    #[serde(skip_deserializing, default = "empty_report")]
    pub freeze_report: FreezeReport,
    pub stopped_epoch: usize,
    pub restored_epoch: usize,
    pub restore_best_weights: bool,
    pub size_bytes: u64,
}

fn empty_report() -> FreezeReport {
    FreezeReport {
        backbone: String::new(),
        layers: Vec::new(),
        head_params: 0,
    }
}

impl Provenance {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| TrainError::io(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| TrainError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| TrainError::io(path, e))
    }
}

#[derive(Debug)]
pub struct TrainedModel {
    net: SpillNet,
    provenance: Provenance,
    weights_path: PathBuf,
}

impl TrainedModel {
    pub(crate) fn from_parts(net: SpillNet, provenance: Provenance, weights_path: PathBuf) -> Self {
        Self {
            net,
            provenance,
            weights_path,
        }
    }

    /// Load `model.weights` + `provenance.json` from a training output dir.
    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let mut provenance = Provenance::load(&dir.join(PROVENANCE_FILE))?;
        let spec = find_backbone(&provenance.backbone)?;
        let weights_path = dir.join(WEIGHTS_FILE);
        let net = SpillNet::load(&spec, &weights_path)?;
        provenance.freeze_report = net.freeze_report();
        Ok(Self {
            net,
            provenance,
            weights_path,
        })
    }

    pub fn backbone_name(&self) -> &str {
        &self.provenance.backbone
    }

    pub fn weights_path(&self) -> &Path {
        &self.weights_path
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.provenance.input_shape
    }

    pub fn trained_on(&self) -> &TrainedOn {
        &self.provenance.trained_on
    }

    pub fn size_bytes(&self) -> u64 {
        self.provenance.size_bytes
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn net(&self) -> &SpillNet {
        &self.net
    }

    pub fn probabilities(&self, frames: &[Frame]) -> Result<Vec<f32>, TrainError> {
        if let Some(f) = frames.iter().find(|f| f.modality != self.trained_on().modality) {
            return Err(TrainError::Config(format!(
                "model was trained on {} frames, got {}",
                self.trained_on().modality,
                f.modality
            )));
        }
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        let refs: Vec<&Frame> = frames.iter().collect();
        let x = preprocess_batch(&refs, self.net.spec(), self.net.device())?;
        Ok(self.net.forward(&x)?.flatten_all()?.to_vec1()?)
    }

    /// Label and sigmoid confidence for one frame.
    pub fn classify(&self, frame: &Frame) -> Result<(ClassLabel, f32), TrainError> {
        let p = self.probabilities(std::slice::from_ref(frame))?[0];
        Ok((ClassLabel::from_confidence(p), p))
    }
}

impl SpillClassifier for TrainedModel {
    fn name(&self) -> &str {
        self.backbone_name()
    }

    fn modality(&self) -> Modality {
        self.trained_on().modality
    }

    fn predict(&self, frames: &[Frame]) -> Result<Vec<f32>, ModelError> {
        self.probabilities(frames).map_err(|e| Box::new(e) as ModelError)
    }
}
