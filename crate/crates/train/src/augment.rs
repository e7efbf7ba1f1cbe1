//! Training-time augmentation: horizontal flip, small rotation, contrast.

use rand::Rng;
use serde::{Deserialize, Serialize};
use spillsense_core::frame::Frame;

use crate::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub horizontal_flip: bool,
    /// Fraction of a full turn; 0.01 means up to +-3.6 degrees.
    pub rotation_factor: f64,
    /// Contrast scale is drawn from `[1 - c, 1 + c]`.
    pub contrast_factor: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            horizontal_flip: true,
            rotation_factor: 0.01,
            contrast_factor: 0.01,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            horizontal_flip: false,
            rotation_factor: 0.0,
            contrast_factor: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.rotation_factor >= 0.0 && self.rotation_factor.is_finite()) {
            return Err(TrainError::Config("rotation_factor must be >= 0".into()));
        }
        if !(self.contrast_factor >= 0.0 && self.contrast_factor < 1.0) {
            return Err(TrainError::Config("contrast_factor must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Rotation angle in degrees.
    pub fn sample_angle(&self, rng: &mut impl Rng) -> f64 {
        if self.rotation_factor == 0.0 {
            return 0.0;
        }
        let max = self.rotation_factor * 360.0;
        rng.gen_range(-max..=max)
    }

    pub fn sample_contrast(&self, rng: &mut impl Rng) -> f64 {
        if self.contrast_factor == 0.0 {
            return 1.0;
        }
        rng.gen_range(1.0 - self.contrast_factor..=1.0 + self.contrast_factor)
    }
}

pub fn flip_horizontal(frame: &Frame) -> Frame {
    let (w, h) = frame.dims();
    let mut out = frame.clone();
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(x, y, frame.pixel(w - 1 - x, y));
        }
    }
    out
}

fn reflect(v: f64, len: u32) -> f64 {
    // reflect about the edges, period 2 * len
    let period = 2.0 * len as f64;
    let m = v.rem_euclid(period);
    if m < len as f64 {
        m
    } else {
        period - m - 1.0
    }
}

/// Rotate about the centre with bilinear sampling and reflected borders.
pub fn rotate(frame: &Frame, degrees: f64) -> Frame {
    if degrees == 0.0 {
        return frame.clone();
    }
    let (w, h) = frame.dims();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    let mut out = frame.clone();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // inverse rotation maps output back to the source
            let sx = reflect(c * dx + s * dy + cx, w).clamp(0.0, (w - 1) as f64);
            let sy = reflect(-s * dx + c * dy + cy, h).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as u32, sy.floor() as u32);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let (p00, p10, p01, p11) = (frame.pixel(x0, y0), frame.pixel(x1, y0), frame.pixel(x0, y1), frame.pixel(x1, y1));
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let v = p00[ch] as f64 * (1.0 - fx) * (1.0 - fy)
                    + p10[ch] as f64 * fx * (1.0 - fy)
                    + p01[ch] as f64 * (1.0 - fx) * fy
                    + p11[ch] as f64 * fx * fy;
                px[ch] = v.round().clamp(0.0, 255.0) as u8;
            }
            out.set_pixel(x, y, px);
        }
    }
    out
}

/// Scale each channel about its mean, clipped to 0..255.
pub fn adjust_contrast(frame: &Frame, scale: f64) -> Frame {
    if scale == 1.0 {
        return frame.clone();
    }
    let n = (frame.width() * frame.height()) as f64;
    let mut mean = [0f64; 3];
    for px in frame.pixels().chunks_exact(3) {
        for c in 0..3 {
            mean[c] += px[c] as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut out = frame.clone();
    for px in out.pixels_mut().chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = ((px[c] as f64 - mean[c]) * scale + mean[c]).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

pub fn augment(frame: &Frame, cfg: &AugmentConfig, rng: &mut impl Rng) -> Frame {
    let flip = cfg.horizontal_flip && rng.gen_bool(0.5);
    let angle = cfg.sample_angle(rng);
    let contrast = cfg.sample_contrast(rng);
    let mut out = if flip { flip_horizontal(frame) } else { frame.clone() };
    out = rotate(&out, angle);
    adjust_contrast(&out, contrast)
}
