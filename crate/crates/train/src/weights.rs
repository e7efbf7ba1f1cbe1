//! Pretrained backbone weights.
//!
//! No network fetch is available, so "pretrained" weights are a
//! deterministic surrogate derived from the backbone name and cached as
//! safetensors. A cache miss with generation disabled is the offline
//! failure path.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::arch::{layers_for, LayerDef};
use crate::registry::BackboneSpec;
use crate::TrainError;

pub const WEIGHTS_DIR_ENV: &str = "SPILLSENSE_WEIGHTS_DIR";
/// Set to `1` to forbid generating missing weights.
pub const OFFLINE_ENV: &str = "SPILLSENSE_WEIGHTS_OFFLINE";

/// Gain applied on top of He initialisation so deep stacks keep a
/// bounded activation scale.
const SURROGATE_GAIN: f64 = 1.15;

pub fn kernel_key(layer: &str, conv: usize) -> String {
    format!("{layer}/conv{conv}/kernel")
}

pub fn bias_key(layer: &str, conv: usize) -> String {
    format!("{layer}/conv{conv}/bias")
}

#[derive(Debug, Clone)]
pub struct WeightsStore {
    dir: PathBuf,
    allow_generate: bool,
}

impl WeightsStore {
    pub fn new(dir: impl Into<PathBuf>, allow_generate: bool) -> Self {
        Self {
            dir: dir.into(),
            allow_generate,
        }
    }

    /// `$SPILLSENSE_WEIGHTS_DIR`, else `~/.cache/spillsense/weights`.
    pub fn from_env() -> Self {
        let dir = std::env::var_os(WEIGHTS_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| {
                let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
                home.join(".cache/spillsense/weights")
            });
        let offline = std::env::var(OFFLINE_ENV).is_ok_and(|v| v == "1");
        Self::new(dir, !offline)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, spec: &BackboneSpec) -> PathBuf {
        self.dir.join(format!("{}.safetensors", spec.name))
    }

    /// Backbone tensors keyed by [`kernel_key`] / [`bias_key`].
    pub fn load(&self, spec: &BackboneSpec, device: &Device) -> Result<HashMap<String, Tensor>, TrainError> {
        let path = self.path_for(spec);
        let layers = layers_for(spec);
        if path.exists() {
            let tensors = candle_core::safetensors::load(&path, device)?;
            match check_shapes(&layers, &tensors) {
                Ok(()) => return Ok(tensors),
                Err(reason) if !self.allow_generate => {
                    return Err(TrainError::WeightsMismatch {
                        backbone: spec.name.to_string(),
                        path: path.display().to_string(),
                        reason,
                    })
                }
                Err(reason) => log::warn!("regenerating {}: {reason}", path.display()),
            }
        } else if !self.allow_generate {
            return Err(TrainError::WeightsUnavailable {
                backbone: spec.name.to_string(),
                path: path.display().to_string(),
            });
        }
        let tensors = surrogate_weights(spec, &layers, device)?;
        std::fs::create_dir_all(&self.dir).map_err(|e| TrainError::io(&self.dir, e))?;
        // write-then-rename so concurrent runs never see a torn file
        let tmp = self.dir.join(format!(".{}.{}.tmp", spec.name, std::process::id()));
        candle_core::safetensors::save(&tensors, &tmp).map_err(|e| TrainError::Save {
            path: tmp.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::rename(&tmp, &path).map_err(|e| TrainError::io(&path, e))?;
        Ok(tensors)
    }
}

fn check_shapes(layers: &[LayerDef], tensors: &HashMap<String, Tensor>) -> Result<(), String> {
    for l in layers {
        for (i, c) in l.convs.iter().enumerate() {
            let (o, ci, kh, kw) = c.kernel_shape();
            let k = tensors
                .get(&kernel_key(&l.name, i))
                .ok_or_else(|| format!("missing {}", kernel_key(&l.name, i)))?;
            if k.dims() != [o, ci, kh, kw] {
                return Err(format!("{} has shape {:?}", kernel_key(&l.name, i), k.dims()));
            }
            let b = tensors
                .get(&bias_key(&l.name, i))
                .ok_or_else(|| format!("missing {}", bias_key(&l.name, i)))?;
            if b.dims() != [o] {
                return Err(format!("{} has shape {:?}", bias_key(&l.name, i), b.dims()));
            }
        }
    }
    Ok(())
}

fn name_seed(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// He-normal kernels and zero biases from a per-backbone seed.
pub fn surrogate_weights(
    spec: &BackboneSpec,
    layers: &[LayerDef],
    device: &Device,
) -> Result<HashMap<String, Tensor>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(spec.name));
    let mut out = HashMap::new();
    for l in layers {
        for (i, c) in l.convs.iter().enumerate() {
            let std = SURROGATE_GAIN * (2.0 / c.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let (o, ci, kh, kw) = c.kernel_shape();
            let data: Vec<f32> = (0..o * ci * kh * kw).map(|_| normal.sample(&mut rng) as f32).collect();
            out.insert(kernel_key(&l.name, i), Tensor::from_vec(data, (o, ci, kh, kw), device)?);
            out.insert(bias_key(&l.name, i), Tensor::zeros(o, candle_core::DType::F32, device)?);
        }
    }
    Ok(out)
}
