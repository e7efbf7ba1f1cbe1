//! Live capture sessions and their append-only verdict log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use spillsense_core::frame::{ClassLabel, FramePair, SessionMeta};
use spillsense_core::store::{PairStore, StoreError};

pub const VERDICT_LOG: &str = "verdicts.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassVerdict {
    pub label: ClassLabel,
    pub confidence: f32,
    pub latency_ms: f64,
    pub frame_ref: u64,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Verdict {
        verdict: ClassVerdict,
        class_label: ClassLabel,
        thermal_path: PathBuf,
        rgb_path: PathBuf,
    },
    Outcome {
        frame_ref: u64,
        ground_truth: ClassLabel,
        timestamp: DateTime<Utc>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("no verdict with frame_ref {0} in this session")]
    UnknownFrame(u64),
    #[error("session log {path}: {source}")]
    Log {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug)]
pub struct Session {
    meta: SessionMeta,
    dir: PathBuf,
    store: PairStore,
    counts: BTreeMap<ClassLabel, usize>,
    verdicts: Vec<ClassVerdict>,
    outcomes: BTreeMap<u64, ClassLabel>,
    log: File,
}

impl Session {
    /// Open (or create) `<root>/<session_id>/`.
    pub fn open(root: &Path, meta: SessionMeta) -> Result<Self, SessionError> {
        let dir = root.join(&meta.session_id);
        let log_path = dir.join(VERDICT_LOG);
        let io = |source| SessionError::Log {
            path: log_path.clone(),
            source,
        };
        std::fs::create_dir_all(&dir).map_err(io)?;
        let log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(io)?;
        let store = PairStore::open(&dir)?;
        Ok(Self {
            meta,
            dir,
            store,
            counts: BTreeMap::new(),
            verdicts: Vec::new(),
            outcomes: BTreeMap::new(),
            log,
        })
    }

    pub fn meta(&self) -> &SessionMeta {
        &self.meta
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn set_label(&mut self, label: ClassLabel) {
        self.meta.class_label = label;
    }

    pub fn counts(&self) -> &BTreeMap<ClassLabel, usize> {
        &self.counts
    }

    pub fn verdicts(&self) -> &[ClassVerdict] {
        &self.verdicts
    }

    /// Persist a pair under the current class label.
    pub fn save_pair(&mut self, pair: &FramePair) -> Result<(u64, PathBuf, PathBuf), SessionError> {
        let saved = self.store.save_pair(pair, &self.meta)?;
        *self.counts.entry(self.meta.class_label).or_default() += 1;
        Ok(saved)
    }

    fn append(&mut self, record: &LogRecord) -> Result<(), SessionError> {
        let path = self.dir.join(VERDICT_LOG);
        let mut line = serde_json::to_string(record).expect("log records serialize");
        line.push('\n');
        self.log
            .write_all(line.as_bytes())
            .and_then(|_| self.log.sync_data())
            .map_err(|source| SessionError::Log { path, source })
    }

    pub fn record_verdict(
        &mut self,
        verdict: ClassVerdict,
        thermal_path: PathBuf,
        rgb_path: PathBuf,
    ) -> Result<(), SessionError> {
        self.append(&LogRecord::Verdict {
            verdict: verdict.clone(),
            class_label: self.meta.class_label,
            thermal_path,
            rgb_path,
        })?;
        self.verdicts.push(verdict);
        Ok(())
    }

    /// Record operator ground truth; a second label for the same frame
    /// replaces the first.
    pub fn record_outcome(&mut self, frame_ref: u64, ground_truth: ClassLabel) -> Result<Option<f64>, SessionError> {
        if !self.verdicts.iter().any(|v| v.frame_ref == frame_ref) {
            return Err(SessionError::UnknownFrame(frame_ref));
        }
        self.append(&LogRecord::Outcome {
            frame_ref,
            ground_truth,
            timestamp: Utc::now(),
        })?;
        if let Some(previous) = self.outcomes.insert(frame_ref, ground_truth) {
            log::warn!("frame {frame_ref} relabelled from {previous} to {ground_truth}; keeping the latest");
        }
        Ok(self.demo_accuracy())
    }

    /// Fraction of labelled verdicts that match the operator; None when
    /// nothing has been labelled.
    pub fn demo_accuracy(&self) -> Option<f64> {
        demo_accuracy(&self.verdicts, &self.outcomes)
    }
}

pub fn demo_accuracy(verdicts: &[ClassVerdict], outcomes: &BTreeMap<u64, ClassLabel>) -> Option<f64> {
    let labelled: Vec<bool> = verdicts
        .iter()
        .filter_map(|v| outcomes.get(&v.frame_ref).map(|gt| *gt == v.label))
        .collect();
    if labelled.is_empty() {
        return None;
    }
    Some(labelled.iter().filter(|c| **c).count() as f64 / labelled.len() as f64)
}

/// Read a session log back.
pub fn read_log(dir: &Path) -> Result<Vec<LogRecord>, SessionError> {
    let path = dir.join(VERDICT_LOG);
    let text = std::fs::read_to_string(&path).map_err(|source| SessionError::Log {
        path: path.clone(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| SessionError::Log {
                path: path.clone(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })
        })
        .collect()
}
