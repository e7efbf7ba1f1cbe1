//! On-disk pair layout: `<root>/<modality>/<spill|no_spill>/pair_<NNNNNN>_<modality>.png`.
//!
//! Both files of a pair are written to temporaries and renamed into place;
//! a failure at any step removes whatever was already written. Each saved
//! pair also appends one line to the `pairs.jsonl` sidecar, which carries
//! the room/liquid/session that the directory layout cannot.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::frame::{ClassLabel, Frame, FramePair, Liquid, Modality, Room, SessionMeta};

pub const SIDECAR_FILE: &str = "pairs.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("write failed for {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("read failed for {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("pair index {index} already present at {path}")]
    IndexCollision { index: u64, path: PathBuf },
    #[error("malformed sidecar line {line} in {path}: {message}")]
    Sidecar {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// One line of the `pairs.jsonl` sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub index: u64,
    pub session_id: String,
    pub room: Room,
    pub liquid: Liquid,
    pub class_label: ClassLabel,
    pub skew_ms: u64,
}

pub fn pair_file_name(index: u64, modality: Modality) -> String {
    format!("pair_{index:06}_{}.png", modality.as_str())
}

/// Inverse of [`pair_file_name`]; `None` for anything off-pattern.
pub fn parse_pair_file_name(name: &str) -> Option<(u64, Modality)> {
    let stem = name.strip_prefix("pair_")?.strip_suffix(".png")?;
    let (digits, modality) = stem.split_once('_')?;
    if digits.len() < 6 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((digits.parse().ok()?, modality.parse().ok()?))
}

pub fn pair_path(root: &Path, modality: Modality, label: ClassLabel, index: u64) -> PathBuf {
    root.join(modality.as_str())
        .join(label.as_str())
        .join(pair_file_name(index, modality))
}

/// Highest pair index present under `root`, scanning every modality/class
/// directory.
pub fn max_index(root: &Path) -> Result<u64, StoreError> {
    let mut max = 0;
    for modality in Modality::ALL {
        for label in ClassLabel::ALL {
            let dir = root.join(modality.as_str()).join(label.as_str());
            let entries = match fs::read_dir(&dir) {
                Ok(e) => e,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
                Err(source) => return Err(StoreError::Read { path: dir, source }),
            };
            for entry in entries.flatten() {
                if let Some((idx, _)) = entry.file_name().to_str().and_then(parse_pair_file_name) {
                    max = max.max(idx);
                }
            }
        }
    }
    Ok(max)
}

pub fn read_sidecar(root: &Path) -> Result<Vec<PairRecord>, StoreError> {
    let path = root.join(SIDECAR_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(StoreError::Read { path, source }),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Sidecar {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Write every `(path, frame)` or none of them.
pub fn write_frames_atomic(frames: &[(PathBuf, &Frame)]) -> Result<(), StoreError> {
    for (path, _) in frames {
        if path.exists() {
            let index = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(parse_pair_file_name)
                .map_or(0, |(i, _)| i);
            return Err(StoreError::IndexCollision {
                index,
                path: path.clone(),
            });
        }
    }
    let mut temps: Vec<PathBuf> = Vec::new();
    let cleanup = |paths: &[PathBuf]| {
        for p in paths {
            let _ = fs::remove_file(p);
        }
    };
    for (path, frame) in frames {
        let dir = path.parent().expect("pair paths have a parent");
        if let Err(source) = fs::create_dir_all(dir) {
            cleanup(&temps);
            return Err(StoreError::Write {
                path: dir.to_path_buf(),
                source,
            });
        }
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("frame");
        let tmp = dir.join(format!(".{name}.tmp"));
        let encoded = encode_png(frame);
        if let Err(source) = fs::write(&tmp, encoded) {
            let _ = fs::remove_file(&tmp);
            cleanup(&temps);
            return Err(StoreError::Write { path: tmp, source });
        }
        temps.push(tmp);
    }
    let mut placed: Vec<PathBuf> = Vec::new();
    for ((path, _), tmp) in frames.iter().zip(&temps) {
        if let Err(source) = fs::rename(tmp, path) {
            cleanup(&temps);
            cleanup(&placed);
            return Err(StoreError::Write {
                path: path.clone(),
                source,
            });
        }
        placed.push(path.clone());
    }
    Ok(())
}

fn encode_png(frame: &Frame) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    frame
        .to_image()
        .write_to(&mut buf, image::ImageFormat::Png)
        .expect("in-memory PNG encoding of a valid RGB buffer");
    buf.into_inner()
}

/// Sequential writer for one dataset root.
#[derive(Debug)]
pub struct PairStore {
    root: PathBuf,
    next_index: u64,
}

impl PairStore {
    /// Resume numbering after the highest index already on disk.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let next_index = max_index(&root)? + 1;
        Ok(Self { root, next_index })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn next_index(&self) -> u64 {
        self.next_index
    }

    /// Persist both frames under the session's class folder with a shared
    /// index. Returns `(index, thermal_path, rgb_path)`.
    pub fn save_pair(
        &mut self,
        pair: &FramePair,
        meta: &SessionMeta,
    ) -> Result<(u64, PathBuf, PathBuf), StoreError> {
        let index = self.next_index;
        let t_path = pair_path(&self.root, Modality::Thermal, meta.class_label, index);
        let r_path = pair_path(&self.root, Modality::Rgb, meta.class_label, index);
        write_frames_atomic(&[(t_path.clone(), pair.thermal()), (r_path.clone(), pair.rgb())])?;

        let record = PairRecord {
            index,
            session_id: meta.session_id.clone(),
            room: meta.room.clone(),
            liquid: meta.liquid.clone(),
            class_label: meta.class_label,
            skew_ms: pair.skew_ms(),
        };
        if let Err(e) = self.append_record(&record) {
            let _ = fs::remove_file(&t_path);
            let _ = fs::remove_file(&r_path);
            return Err(e);
        }
        self.next_index += 1;
        Ok((index, t_path, r_path))
    }

    fn append_record(&self, record: &PairRecord) -> Result<(), StoreError> {
        let path = self.root.join(SIDECAR_FILE);
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(|source| StoreError::Write { path, source })
    }
}
