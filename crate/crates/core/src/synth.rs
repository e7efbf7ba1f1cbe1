//! Deterministic synthetic spill / no-spill scenes.
//!
//! No-spill thermal frames are a homogeneous background plus Gaussian noise;
//! spill frames add an elliptical blob offset by `blob_delta` with a 3 px
//! linear edge ramp outside the blob boundary. The RGB view is a procedural
//! floor texture with a faint darkened blob at the corresponding location.
//! The generator's labels and masks are the ground truth for every
//! downstream accuracy check.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{self, DatasetError, DatasetManifest};
use crate::frame::{
    ClassLabel, Frame, FramePair, Liquid, Modality, Room, SessionMeta, RGB_RAW_DIMS, THERMAL_DIMS,
};
use crate::store::{PairStore, StoreError};

/// Width of the soft edge around a blob, in thermal pixels.
pub const EDGE_RAMP_PX: f64 = 3.0;

/// Darkening factor applied to the RGB floor inside the spill.
const RGB_SPILL_GAIN: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloorTexture {
    Tile,
    Concrete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Separable,
    Hard,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "separable" => Ok(Profile::Separable),
            "hard" => Ok(Profile::Hard),
            other => Err(format!("unknown synth profile `{other}`")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Spec(String),
    #[error("need at least 2 pairs per class, got {0}")]
    TooFew(usize),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub background_mean: f64,
    pub background_noise_sigma: f64,
    pub blob_delta: f64,
    /// Inclusive range for the blob's major semi-axis, thermal pixels.
    pub blob_radius_px: (f64, f64),
    pub rgb_texture: FloorTexture,
    pub seed: u64,
    /// Room/liquid combinations assigned round-robin by [`gen_dataset`].
    pub combos: Vec<(Room, Liquid)>,
}

impl SynthSpec {
    pub fn profile(profile: Profile, seed: u64) -> Self {
        let (sigma, delta) = match profile {
            Profile::Separable => (2.0, 40.0),
            Profile::Hard => (8.0, 8.0),
        };
        Self {
            background_mean: 100.0,
            background_noise_sigma: sigma,
            blob_delta: delta,
            blob_radius_px: (8.0, 60.0),
            rgb_texture: FloorTexture::Tile,
            seed,
            combos: vec![(Room::Atrium, Liquid::Water)],
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..=255.0).contains(&self.background_mean) {
            return Err(SynthError::Spec("background_mean must lie in [0, 255]".into()));
        }
        if self.background_noise_sigma < 0.0 || !self.background_noise_sigma.is_finite() {
            return Err(SynthError::Spec("noise sigma must be finite and >= 0".into()));
        }
        let (lo, hi) = self.blob_radius_px;
        if !(lo > 0.0 && lo <= hi) {
            return Err(SynthError::Spec("blob radius range must satisfy 0 < lo <= hi".into()));
        }
        if self.combos.is_empty() {
            return Err(SynthError::Spec("at least one room/liquid combination required".into()));
        }
        Ok(())
    }

    /// `|blob_delta| >= 3 sigma`, the contract of the separable profile.
    pub fn is_separable(&self) -> bool {
        self.blob_delta.abs() >= 3.0 * self.background_noise_sigma
    }
}

/// Binary mask in thermal pixel coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center: (f64, f64),
    pub semi_major: f64,
    pub semi_minor: f64,
    pub angle: f64,
    /// Part of the ellipse falls outside the frame.
    pub clipped: bool,
}

impl Blob {
    /// Approximate signed distance to the boundary in pixels, positive inside.
    fn signed_distance(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let rho = ((u / self.semi_major).powi(2) + (v / self.semi_minor).powi(2)).sqrt();
        (1.0 - rho) * (self.semi_major * self.semi_minor).sqrt()
    }

    /// Blend weight of the spill offset: 1 inside, linear ramp to 0 outside.
    fn weight(&self, x: f64, y: f64) -> f64 {
        let d = self.signed_distance(x, y);
        if d >= 0.0 {
            1.0
        } else {
            (1.0 + d / EDGE_RAMP_PX).max(0.0)
        }
    }

    fn scaled(&self, sx: f64, sy: f64) -> Blob {
        // Anisotropic scale applied to an axis-aligned approximation keeps
        // the blob centered on the same floor location in the RGB view.
        Blob {
            center: (self.center.0 * sx, self.center.1 * sy),
            semi_major: self.semi_major * (sx * sy).sqrt(),
            semi_minor: self.semi_minor * (sx * sy).sqrt(),
            angle: self.angle,
            clipped: self.clipped,
        }
    }
}

/// A generated pair with its ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub pair: FramePair,
    pub label: ClassLabel,
    pub mask: Option<Mask>,
    pub blob: Option<Blob>,
}

/// RNG stream for scene `index` under `seed`.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn gray_to_rgb(v: f64) -> [u8; 3] {
    let g = v.round().clamp(0.0, 255.0) as u8;
    [g, g, g]
}

fn thermal_background(spec: &SynthSpec, rng: &mut impl Rng) -> Vec<f64> {
    let (w, h) = THERMAL_DIMS;
    let n = (w * h) as usize;
    if spec.background_noise_sigma == 0.0 {
        return vec![spec.background_mean; n];
    }
    let normal = Normal::new(spec.background_mean, spec.background_noise_sigma)
        .expect("sigma validated");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn render_thermal(values: &[f64]) -> Frame {
    let (w, h) = THERMAL_DIMS;
    let pixels = values.iter().flat_map(|v| gray_to_rgb(*v)).collect();
    Frame::new(pixels, w, h, Modality::Thermal).expect("thermal dims")
}

fn render_floor(texture: FloorTexture, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let (w, h) = RGB_RAW_DIMS;
    let noise = Normal::new(0.0, 3.0).expect("fixed sigma");
    let base: [f64; 3] = [rng.gen_range(150.0..190.0), rng.gen_range(145.0..180.0), rng.gen_range(135.0..170.0)];
    match texture {
        FloorTexture::Tile => {
            let tile = 80u32;
            let cols = w / tile + 1;
            let rows = h / tile + 1;
            let tints: Vec<f64> = (0..cols * rows).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let mut out = Vec::with_capacity((w * h) as usize);
            for y in 0..h {
                for x in 0..w {
                    let grout = x % tile < 3 || y % tile < 3;
                    let t = tints[((y / tile) * cols + x / tile) as usize];
                    let n = noise.sample(rng);
                    let px = if grout {
                        [base[0] * 0.55 + n, base[1] * 0.55 + n, base[2] * 0.55 + n]
                    } else {
                        [base[0] + t + n, base[1] + t + n, base[2] + t + n]
                    };
                    out.push(px);
                }
            }
            out
        }
        FloorTexture::Concrete => {
            let cell = 16u32;
            let gw = w / cell + 2;
            let gh = h / cell + 2;
            let grid: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(-12.0..12.0)).collect();
            let mut out = Vec::with_capacity((w * h) as usize);
            for y in 0..h {
                for x in 0..w {
                    let fx = x as f64 / cell as f64;
                    let fy = y as f64 / cell as f64;
                    let (x0, y0) = (fx.floor() as u32, fy.floor() as u32);
                    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                    let g = |gx: u32, gy: u32| grid[(gy * gw + gx) as usize];
                    let m = g(x0, y0) * (1.0 - tx) * (1.0 - ty)
                        + g(x0 + 1, y0) * tx * (1.0 - ty)
                        + g(x0, y0 + 1) * (1.0 - tx) * ty
                        + g(x0 + 1, y0 + 1) * tx * ty;
                    let n = noise.sample(rng);
                    out.push([base[0] + m + n, base[1] + m + n, base[2] + m + n]);
                }
            }
            out
        }
    }
}

fn render_rgb(values: &[[f64; 3]]) -> Frame {
    let (w, h) = RGB_RAW_DIMS;
    let pixels = values
        .iter()
        .flat_map(|p| p.map(|c| c.round().clamp(0.0, 255.0) as u8))
        .collect();
    Frame::new(pixels, w, h, Modality::Rgb).expect("rgb dims")
}

fn sample_blob(spec: &SynthSpec, rng: &mut impl Rng) -> Blob {
    let (w, h) = THERMAL_DIMS;
    let (lo, hi) = spec.blob_radius_px;
    let semi_major = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let semi_minor = semi_major * rng.gen_range(0.6..=1.0);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let center = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
    let clipped = center.0 - semi_major < 0.0
        || center.1 - semi_major < 0.0
        || center.0 + semi_major > (w - 1) as f64
        || center.1 + semi_major > (h - 1) as f64;
    Blob {
        center,
        semi_major,
        semi_minor,
        angle,
        clipped,
    }
}

fn make_pair(thermal: Frame, rgb: Frame) -> FramePair {
    FramePair::new(thermal, rgb, 0, "synth").expect("synthetic frames share a timestamp")
}

/// Homogeneous thermal background with a procedural RGB floor.
pub fn gen_no_spill(spec: &SynthSpec, rng: &mut impl Rng) -> FramePair {
    let thermal = thermal_background(spec, rng);
    let floor = render_floor(spec.rgb_texture, rng);
    make_pair(render_thermal(&thermal), render_rgb(&floor))
}

/// Spill scene plus its thermal-resolution ground-truth mask.
///
/// Blobs that extend past the frame edge are clipped; [`Blob::clipped`]
/// records it.
pub fn gen_spill(spec: &SynthSpec, rng: &mut impl Rng) -> (FramePair, Mask, Blob) {
    let mut thermal = thermal_background(spec, rng);
    let mut floor = render_floor(spec.rgb_texture, rng);
    let blob = sample_blob(spec, rng);
    let (w, h) = THERMAL_DIMS;
    let mut bits = vec![false; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64, y as f64);
            let wgt = blob.weight(px, py);
            let i = (y * w + x) as usize;
            thermal[i] += wgt * spec.blob_delta;
            bits[i] = blob.signed_distance(px, py) >= 0.0;
        }
    }
    let (rw, rh) = RGB_RAW_DIMS;
    let rgb_blob = blob.scaled(rw as f64 / w as f64, rh as f64 / h as f64);
    for y in 0..rh {
        for x in 0..rw {
            let wgt = rgb_blob.weight(x as f64, y as f64);
            if wgt > 0.0 {
                let gain = 1.0 - wgt * (1.0 - RGB_SPILL_GAIN);
                let p = &mut floor[(y * rw + x) as usize];
                for c in p.iter_mut() {
                    *c *= gain;
                }
            }
        }
    }
    let mask = Mask {
        width: w,
        height: h,
        bits,
    };
    (make_pair(render_thermal(&thermal), render_rgb(&floor)), mask, blob)
}

/// Scene `index` of the stream seeded by `spec.seed`, with the class drawn
/// from the same stream.
pub fn scene(spec: &SynthSpec, index: u64) -> Scene {
    let mut rng = scene_rng(spec.seed, index);
    let spill: bool = rng.gen();
    scene_with_label(spec, index, if spill { ClassLabel::Spill } else { ClassLabel::NoSpill }, &mut rng)
}

fn scene_with_label(spec: &SynthSpec, _index: u64, label: ClassLabel, rng: &mut ChaCha8Rng) -> Scene {
    match label {
        ClassLabel::Spill => {
            let (pair, mask, blob) = gen_spill(spec, rng);
            Scene {
                pair,
                label,
                mask: Some(mask),
                blob: Some(blob),
            }
        }
        ClassLabel::NoSpill => Scene {
            pair: gen_no_spill(spec, rng),
            label,
            mask: None,
            blob: None,
        },
    }
}

/// Write `2 * n_per_class` balanced pairs in the capture layout under
/// `out_root` and index them.
///
/// Pairs alternate spill / no-spill; room and liquid cycle through
/// `spec.combos` per class so every combination gets an equal share.
pub fn gen_dataset(
    spec: &SynthSpec,
    n_per_class: usize,
    out_root: &Path,
) -> Result<DatasetManifest, SynthError> {
    spec.validate()?;
    if n_per_class < 2 {
        return Err(SynthError::TooFew(n_per_class));
    }
    let mut store = PairStore::open(out_root)?;
    for i in 0..n_per_class {
        let (room, liquid) = spec.combos[i % spec.combos.len()].clone();
        for (k, label) in [ClassLabel::Spill, ClassLabel::NoSpill].into_iter().enumerate() {
            let index = (2 * i + k) as u64;
            let mut rng = scene_rng(spec.seed, index);
            let s = scene_with_label(spec, index, label, &mut rng);
            let session = format!("synth-{}-{}", room.as_str(), liquid.as_str())
                .replace(|c: char| !(c.is_ascii_alphanumeric() || c == '-' || c == '_'), "_");
            let meta = SessionMeta::new(session, room.clone(), liquid.clone(), label)
                .expect("sanitized session id");
            store.save_pair(&s.pair, &meta)?;
        }
    }
    let manifest = dataset::build_manifest(out_root)?;
    Ok(manifest.manifest)
}

/// Generate a balanced thermal-only dataset whose train/val/test splits
/// hold exactly `counts` images. Each count must be even.
pub fn gen_split_dataset(
    spec: &SynthSpec,
    counts: [usize; 3],
    out_root: &Path,
) -> Result<DatasetManifest, SynthError> {
    if counts.iter().any(|c| c % 2 != 0 || *c == 0) {
        return Err(SynthError::Spec(format!("split counts must be even and non-zero, got {counts:?}")));
    }
    if spec.combos.len() != 1 {
        return Err(SynthError::Spec("exact split counts need a single room/liquid combination".into()));
    }
    let total: usize = counts.iter().sum();
    let manifest = gen_dataset(spec, total / 2, out_root)?;
    let thermal = dataset::select_subset(
        &manifest,
        &dataset::SubsetFilter { room: None, liquid: None, modality: Modality::Thermal },
    )?;
    let ratios = dataset::SplitRatios {
        train: counts[0] as f64 / total as f64,
        val: counts[1] as f64 / total as f64,
        test: counts[2] as f64 / total as f64,
    };
    let report = dataset::split_manifest(&thermal, &ratios, spec.seed, dataset::SplitOptions { paired: false })?;
    Ok(report.manifest)
}
