//! RGB-to-thermal registration and side-by-side fusion.
//!
//! Pixel coordinates refer to pixel centers: pixel `(x, y)` sits at the
//! real-valued point `(x, y)`. A [`Homography`] maps points of the RGB
//! frame into the thermal view.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::frame::{Frame, FrameError, Modality, RGB_RAW_DIMS, THERMAL_DIMS};

/// Combined frames are thermal (left) + aligned RGB (right), each this size.
pub const FUSED_HALF_DIMS: (u32, u32) = THERMAL_DIMS;

const SAMPLE_EPS: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("need at least 4 point pairs, got {0}")]
    TooFewPairs(usize),
    #[error("degenerate point configuration: {0}")]
    Degenerate(&'static str),
    #[error("homography is not invertible")]
    Singular,
    #[error("non-finite coordinate in point pair {0}")]
    NonFinite(usize),
    #[error("crop {rect:?} does not fit inside a {width}x{height} frame")]
    CropOutOfBounds { rect: CropRect, width: u32, height: u32 },
    #[error("target size must be at least 1x1, got {0}x{1}")]
    EmptyTarget(u32, u32),
    #[error("expected {expected:?} input for {what}, got {got:?}")]
    DimensionMismatch {
        what: &'static str,
        expected: (u32, u32),
        got: (u32, u32),
    },
    #[error("calibration file {path}: {message}")]
    Calibration { path: String, message: String },
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// Invertible 3x3 projective map, stored with `h[2][2] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    /// Normalizes to `h[2][2] = 1`; rejects singular or unnormalizable input.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::Singular);
        }
        let scale = m.abs().max();
        if scale == 0.0 || m[(2, 2)].abs() <= 1e-12 * scale {
            return Err(GeometryError::Singular);
        }
        let m = m / m[(2, 2)];
        let det = m.determinant();
        if !det.is_finite() || det.abs() <= 1e-12 * m.abs().max().powi(3) {
            return Err(GeometryError::Singular);
        }
        Ok(Self { m })
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self, GeometryError> {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.m;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn inverse(&self) -> Result<Self, GeometryError> {
        let inv = self.m.try_inverse().ok_or(GeometryError::Singular)?;
        Self::from_matrix(inv)
    }

    /// Map a point; `None` when it lands on the line at infinity.
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let p = self.m * Vector3::new(x, y, 1.0);
        if p.z.abs() < 1e-15 {
            return None;
        }
        Some((p.x / p.z, p.y / p.z))
    }

    pub fn compose(&self, then: &Homography) -> Result<Self, GeometryError> {
        Self::from_matrix(then.m * self.m)
    }

    /// Frobenius distance between the normalized matrices.
    pub fn frobenius_distance(&self, other: &Homography) -> f64 {
        (self.m - other.m).norm()
    }
}

impl TryFrom<[[f64; 3]; 3]> for Homography {
    type Error = GeometryError;

    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self, Self::Error> {
        Self::from_rows(rows)
    }
}

impl From<Homography> for [[f64; 3]; 3] {
    fn from(h: Homography) -> Self {
        h.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPair {
    /// RGB pixel coordinates.
    pub src: (f64, f64),
    /// Thermal pixel coordinates.
    pub dst: (f64, f64),
}

impl PointPair {
    pub fn new(src: (f64, f64), dst: (f64, f64)) -> Self {
        Self { src, dst }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl CropRect {
    pub fn full(width: u32, height: u32) -> Self {
        Self { x: 0, y: 0, w: width, h: height }
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w >= 1
            && self.h >= 1
            && self.x as u64 + self.w as u64 <= width as u64
            && self.y as u64 + self.h as u64 <= height as u64
    }
}

/// Hartley conditioning: centroid to the origin, mean distance sqrt(2).
fn conditioning(points: &[(f64, f64)]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let (cx, cy) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (cx, cy) = (cx / n, cy / n);
    let mean_dist = points
        .iter()
        .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn transform(t: &Matrix3<f64>, p: (f64, f64)) -> (f64, f64) {
    let v = t * Vector3::new(p.0, p.1, 1.0);
    (v.x / v.z, v.y / v.z)
}

/// True when three points are collinear relative to their spread.
fn collinear(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    let scale = [a, b, c]
        .iter()
        .flat_map(|p| [(p.0 - a.0).abs(), (p.1 - a.1).abs()])
        .fold(0.0f64, f64::max);
    scale == 0.0 || cross.abs() <= 1e-9 * scale * scale
}

fn any_three_collinear(p: &[(f64, f64)]) -> bool {
    (0..4).any(|skip| {
        let rest: Vec<_> = (0..4).filter(|i| *i != skip).map(|i| p[i]).collect();
        collinear(rest[0], rest[1], rest[2])
    })
}

/// Estimate the RGB-to-thermal homography from point correspondences.
///
/// Four pairs give the exact interpolating map. With more pairs the
/// conditioned DLT solution seeds a Levenberg-Marquardt refinement of the
/// squared reprojection error in thermal pixels.
pub fn estimate_perspective(pairs: &[PointPair]) -> Result<Homography, GeometryError> {
    if pairs.len() < 4 {
        return Err(GeometryError::TooFewPairs(pairs.len()));
    }
    for (i, p) in pairs.iter().enumerate() {
        if ![p.src.0, p.src.1, p.dst.0, p.dst.1].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite(i));
        }
    }
    let src: Vec<_> = pairs.iter().map(|p| p.src).collect();
    let dst: Vec<_> = pairs.iter().map(|p| p.dst).collect();
    if any_three_collinear(&src[..4]) {
        return Err(GeometryError::Degenerate("three of the first four source points are collinear"));
    }
    if pairs.len() == 4 && any_three_collinear(&dst[..4]) {
        return Err(GeometryError::Degenerate("three of the four destination points are collinear"));
    }

    let h = dlt(&src, &dst)?;
    if pairs.len() == 4 {
        return Ok(h);
    }
    Ok(refine_reprojection(h, &src, &dst))
}

fn dlt(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<Homography, GeometryError> {
    let t_src = conditioning(src);
    let t_dst = conditioning(dst);
    let n = src.len();
    // Pad to at least 9 rows so the SVD exposes the full right null space.
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let (x, y) = transform(&t_src, *s);
        let (u, v) = transform(&t_dst, *d);
        let r0 = 2 * i;
        let r1 = r0 + 1;
        let row0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let row1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(r0, c)] = row0[c];
            a[(r1, c)] = row1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::Degenerate("SVD failed"))?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or(GeometryError::Degenerate("empty SVD"))?;
    let h = v_t.row(k);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let t_dst_inv = t_dst.try_inverse().ok_or(GeometryError::Singular)?;
    Homography::from_matrix(t_dst_inv * hn * t_src)
}

fn reprojection_residuals(m: &Matrix3<f64>, src: &[(f64, f64)], dst: &[(f64, f64)]) -> DVector<f64> {
    let mut r = DVector::zeros(2 * src.len());
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let p = m * Vector3::new(s.0, s.1, 1.0);
        r[2 * i] = p.x / p.z - d.0;
        r[2 * i + 1] = p.y / p.z - d.1;
    }
    r
}

fn params_to_matrix(p: &DVector<f64>) -> Matrix3<f64> {
    Matrix3::new(p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], 1.0)
}

fn refine_reprojection(start: Homography, src: &[(f64, f64)], dst: &[(f64, f64)]) -> Homography {
    let mut p = DVector::from_iterator(8, start.rows().into_iter().flatten().take(8));
    let mut cost = reprojection_residuals(&params_to_matrix(&p), src, dst).norm_squared();
    let mut lambda = 1e-3;
    for _ in 0..50 {
        let m = params_to_matrix(&p);
        let n = src.len();
        let mut jac = DMatrix::<f64>::zeros(2 * n, 8);
        let mut res = DVector::<f64>::zeros(2 * n);
        for (i, (s, d)) in src.iter().zip(dst).enumerate() {
            let (x, y) = *s;
            let q = m * Vector3::new(x, y, 1.0);
            let w = q.z;
            let (u, v) = (q.x / w, q.y / w);
            res[2 * i] = u - d.0;
            res[2 * i + 1] = v - d.1;
            let r0 = [x / w, y / w, 1.0 / w, 0.0, 0.0, 0.0, -u * x / w, -u * y / w];
            let r1 = [0.0, 0.0, 0.0, x / w, y / w, 1.0 / w, -v * x / w, -v * y / w];
            for c in 0..8 {
                jac[(2 * i, c)] = r0[c];
                jac[(2 * i + 1, c)] = r1[c];
            }
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &res;
        let mut improved = false;
        for _ in 0..10 {
            let mut damped = jtj.clone();
            for c in 0..8 {
                damped[(c, c)] += lambda * jtj[(c, c)].max(1e-12);
            }
            let Some(step) = damped.lu().solve(&(-&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = &p + &step;
            let c_cost = reprojection_residuals(&params_to_matrix(&candidate), src, dst).norm_squared();
            if c_cost.is_finite() && c_cost < cost {
                let rel = (cost - c_cost) / cost.max(1e-300);
                p = candidate;
                cost = c_cost;
                lambda = (lambda * 0.1).max(1e-12);
                improved = rel > 1e-14;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Homography::from_matrix(params_to_matrix(&p)).unwrap_or(start)
}

/// Mean Euclidean distance between `H(src)` and `dst`.
pub fn mean_reprojection_error(h: &Homography, pairs: &[PointPair]) -> f64 {
    let total: f64 = pairs
        .iter()
        .map(|p| match h.apply(p.src.0, p.src.1) {
            Some((u, v)) => ((u - p.dst.0).powi(2) + (v - p.dst.1).powi(2)).sqrt(),
            None => f64::INFINITY,
        })
        .sum();
    total / pairs.len() as f64
}

#[inline]
fn bilinear(frame: &Frame, sx: f64, sy: f64) -> Option<[f64; 3]> {
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    if !(sx >= -SAMPLE_EPS && sy >= -SAMPLE_EPS && sx <= w - 1.0 + SAMPLE_EPS && sy <= h - 1.0 + SAMPLE_EPS) {
        return None;
    }
    let sx = sx.clamp(0.0, w - 1.0);
    let sy = sy.clamp(0.0, h - 1.0);
    let x0 = sx.floor() as u32;
    let y0 = sy.floor() as u32;
    let x1 = (x0 + 1).min(frame.width() - 1);
    let y1 = (y0 + 1).min(frame.height() - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let (p00, p10, p01, p11) = (frame.pixel(x0, y0), frame.pixel(x1, y0), frame.pixel(x0, y1), frame.pixel(x1, y1));
    let mut out = [0.0; 3];
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
        let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
        out[c] = top * (1.0 - fy) + bottom * fy;
    }
    Some(out)
}

/// Inverse-map every output pixel through `H^-1` and sample bilinearly;
/// samples outside the input are black.
pub fn warp_frame(frame: &Frame, h: &Homography, out_w: u32, out_h: u32) -> Result<Frame, GeometryError> {
    if out_w == 0 || out_h == 0 {
        return Err(GeometryError::EmptyTarget(out_w, out_h));
    }
    let inv = h.inverse()?;
    let mut pixels = vec![0u8; out_w as usize * out_h as usize * 3];
    for y in 0..out_h {
        for x in 0..out_w {
            let Some((sx, sy)) = inv.apply(x as f64, y as f64) else {
                continue;
            };
            if let Some(v) = bilinear(frame, sx, sy) {
                let i = (y as usize * out_w as usize + x as usize) * 3;
                for c in 0..3 {
                    pixels[i + c] = v[c].round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    let mut out = Frame::new(pixels, out_w, out_h, frame.modality)?;
    out.timestamp_ms = frame.timestamp_ms;
    out.source_id = frame.source_id.clone();
    Ok(out)
}

pub fn crop_frame(frame: &Frame, rect: CropRect) -> Result<Frame, GeometryError> {
    if !rect.fits(frame.width(), frame.height()) {
        return Err(GeometryError::CropOutOfBounds {
            rect,
            width: frame.width(),
            height: frame.height(),
        });
    }
    let mut pixels = Vec::with_capacity(rect.w as usize * rect.h as usize * 3);
    let row_bytes = frame.width() as usize * 3;
    for y in rect.y..rect.y + rect.h {
        let start = y as usize * row_bytes + rect.x as usize * 3;
        pixels.extend_from_slice(&frame.pixels()[start..start + rect.w as usize * 3]);
    }
    let mut out = Frame::new(pixels, rect.w, rect.h, frame.modality)?;
    out.timestamp_ms = frame.timestamp_ms;
    out.source_id = frame.source_id.clone();
    Ok(out)
}

/// Per-axis resampling weights: `taps[i]` lists `(src index, weight)` for
/// output sample `i`.
fn axis_taps(input: u32, output: u32) -> Vec<Vec<(usize, f64)>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            if output < input {
                // Area average over [i*scale, (i+1)*scale).
                let lo = i as f64 * scale;
                let hi = lo + scale;
                let mut taps = Vec::new();
                let mut j = lo.floor() as usize;
                while (j as f64) < hi && j < input as usize {
                    let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                    if overlap > 1e-12 {
                        taps.push((j, overlap / scale));
                    }
                    j += 1;
                }
                taps
            } else if output == input {
                vec![(i as usize, 1.0)]
            } else {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let j0 = src.floor() as usize;
                let j1 = (j0 + 1).min(input as usize - 1);
                let f = src - j0 as f64;
                if j1 == j0 || f == 0.0 {
                    vec![(j0, 1.0)]
                } else {
                    vec![(j0, 1.0 - f), (j1, f)]
                }
            }
        })
        .collect()
}

/// Resize with area averaging along shrinking axes and bilinear
/// interpolation along growing ones.
pub fn resize_frame(frame: &Frame, w: u32, h: u32) -> Result<Frame, GeometryError> {
    if w == 0 || h == 0 {
        return Err(GeometryError::EmptyTarget(w, h));
    }
    if frame.dims() == (w, h) {
        return Ok(frame.clone());
    }
    let (in_w, in_h) = frame.dims();
    let x_taps = axis_taps(in_w, w);
    let y_taps = axis_taps(in_h, h);
    // Horizontal pass in f64, then vertical, rounding once.
    let mut tmp = vec![0.0f64; w as usize * in_h as usize * 3];
    let src = frame.pixels();
    for y in 0..in_h as usize {
        let row = &src[y * in_w as usize * 3..(y + 1) * in_w as usize * 3];
        for (x, taps) in x_taps.iter().enumerate() {
            let o = (y * w as usize + x) * 3;
            for &(j, wt) in taps {
                for c in 0..3 {
                    tmp[o + c] += row[j * 3 + c] as f64 * wt;
                }
            }
        }
    }
    let mut pixels = vec![0u8; w as usize * h as usize * 3];
    for (y, taps) in y_taps.iter().enumerate() {
        for x in 0..w as usize {
            let mut acc = [0.0f64; 3];
            for &(j, wt) in taps {
                let i = (j * w as usize + x) * 3;
                for c in 0..3 {
                    acc[c] += tmp[i + c] * wt;
                }
            }
            let o = (y * w as usize + x) * 3;
            for c in 0..3 {
                pixels[o + c] = acc[c].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    let mut out = Frame::new(pixels, w, h, frame.modality)?;
    out.timestamp_ms = frame.timestamp_ms;
    out.source_id = frame.source_id.clone();
    Ok(out)
}

/// Per-rig registration: warp into the thermal view, then crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub h: Homography,
    pub crop: CropRect,
}

impl Calibration {
    pub fn identity() -> Self {
        Self {
            h: Homography::identity(),
            crop: CropRect::full(RGB_RAW_DIMS.0, RGB_RAW_DIMS.1),
        }
    }

    /// Calibration whose homography maps RGB pixels straight into thermal
    /// pixels, so the crop is the thermal frame itself.
    pub fn from_point_pairs(pairs: &[PointPair]) -> Result<Self, GeometryError> {
        Ok(Self {
            h: estimate_perspective(pairs)?,
            crop: CropRect::full(THERMAL_DIMS.0, THERMAL_DIMS.1),
        })
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let err = |message: String| GeometryError::Calibration {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        let text = serde_json::to_string_pretty(self).expect("calibration serializes");
        std::fs::write(path, text + "\n").map_err(|e| GeometryError::Calibration {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Warp, crop and downscale a raw RGB frame onto the thermal grid.
pub fn align_rgb(rgb: &Frame, calib: &Calibration) -> Result<Frame, GeometryError> {
    if rgb.dims() != RGB_RAW_DIMS {
        return Err(GeometryError::DimensionMismatch {
            what: "align_rgb",
            expected: RGB_RAW_DIMS,
            got: rgb.dims(),
        });
    }
    let warped = warp_frame(rgb, &calib.h, rgb.width(), rgb.height())?;
    let cropped = crop_frame(&warped, calib.crop)?;
    resize_frame(&cropped, FUSED_HALF_DIMS.0, FUSED_HALF_DIMS.1)
}

/// Thermal on the left, aligned RGB on the right.
pub fn fuse_side_by_side(thermal: &Frame, rgb_aligned: &Frame) -> Result<Frame, GeometryError> {
    for (what, f) in [("thermal half", thermal), ("rgb half", rgb_aligned)] {
        if f.dims() != FUSED_HALF_DIMS {
            return Err(GeometryError::DimensionMismatch {
                what,
                expected: FUSED_HALF_DIMS,
                got: f.dims(),
            });
        }
    }
    let (hw, hh) = FUSED_HALF_DIMS;
    let row = hw as usize * 3;
    let mut pixels = Vec::with_capacity(2 * row * hh as usize);
    for y in 0..hh as usize {
        pixels.extend_from_slice(&thermal.pixels()[y * row..(y + 1) * row]);
        pixels.extend_from_slice(&rgb_aligned.pixels()[y * row..(y + 1) * row]);
    }
    let mut out = Frame::new(pixels, 2 * hw, hh, Modality::Combined)?;
    out.timestamp_ms = thermal.timestamp_ms;
    out.source_id = thermal.source_id.clone();
    Ok(out)
}

/// Inverse of [`fuse_side_by_side`].
pub fn split_fused(fused: &Frame) -> Result<(Frame, Frame), GeometryError> {
    let (hw, hh) = FUSED_HALF_DIMS;
    if fused.dims() != (2 * hw, hh) {
        return Err(GeometryError::DimensionMismatch {
            what: "split_fused",
            expected: (2 * hw, hh),
            got: fused.dims(),
        });
    }
    let mut left = crop_frame(fused, CropRect { x: 0, y: 0, w: hw, h: hh })?;
    let mut right = crop_frame(fused, CropRect { x: hw, y: 0, w: hw, h: hh })?;
    left.modality = Modality::Thermal;
    right.modality = Modality::Rgb;
    Ok((left, right))
}

/// Parse `src_x,src_y,dst_x,dst_y` lines; blank lines, `#` comments and a
/// non-numeric header line are skipped.
pub fn parse_point_pairs_csv(text: &str) -> Result<Vec<PointPair>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let nums: Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        match nums {
            Ok(v) if v.len() == 4 => out.push(PointPair::new((v[0], v[1]), (v[2], v[3]))),
            Err(_) if n == 0 => continue,
            _ => return Err(format!("line {}: expected src_x,src_y,dst_x,dst_y", n + 1)),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn square_pairs(h: &Homography) -> Vec<PointPair> {
        [(0.0, 0.0), (100.0, 0.0), (100.0, 100.0), (0.0, 100.0)]
            .into_iter()
            .map(|s| PointPair::new(s, h.apply(s.0, s.1).unwrap()))
            .collect()
    }

    #[test]
    fn identity_from_identical_corners() {
        let h = estimate_perspective(&square_pairs(&Homography::identity())).unwrap();
        assert!(h.frobenius_distance(&Homography::identity()) < 1e-9);
    }

    #[test]
    fn recovers_translation() {
        let h0 = Homography::translation(10.0, 5.0);
        let h = estimate_perspective(&square_pairs(&h0)).unwrap();
        assert!(h.frobenius_distance(&h0) < 1e-6);
        for p in square_pairs(&h0) {
            let (u, v) = h.apply(p.src.0, p.src.1).unwrap();
            assert_abs_diff_eq!(u, p.dst.0, epsilon = 1e-9);
            assert_abs_diff_eq!(v, p.dst.1, epsilon = 1e-9);
        }
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let pairs = square_pairs(&Homography::identity());
        assert!(matches!(estimate_perspective(&pairs[..3]), Err(GeometryError::TooFewPairs(3))));
        let collinear: Vec<_> = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (0.0, 5.0)]
            .into_iter()
            .map(|s| PointPair::new(s, s))
            .collect();
        assert!(matches!(estimate_perspective(&collinear), Err(GeometryError::Degenerate(_))));
        let mut bad = pairs.clone();
        bad[1].dst.0 = f64::NAN;
        assert!(matches!(estimate_perspective(&bad), Err(GeometryError::NonFinite(1))));
    }

    #[test]
    fn singular_matrices_rejected() {
        assert!(Homography::from_rows([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]]).is_err());
        assert!(Homography::from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]).is_err());
        let h = Homography::from_rows([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]]).unwrap();
        assert_eq!(h.rows()[2][2], 1.0);
        assert_eq!(h.rows()[0][0], 1.0);
    }

    #[test]
    fn identity_warp_is_byte_identical() {
        let mut f = Frame::filled(37, 23, Modality::Rgb, [0; 3]);
        for y in 0..23 {
            for x in 0..37 {
                f.set_pixel(x, y, [(x * 7) as u8, (y * 11) as u8, ((x * y) % 256) as u8]);
            }
        }
        let out = warp_frame(&f, &Homography::identity(), 37, 23).unwrap();
        assert_eq!(out.pixels(), f.pixels());
    }

    #[test]
    fn translation_moves_single_pixel() {
        let mut f = Frame::filled(32, 16, Modality::Thermal, [0; 3]);
        f.set_pixel(5, 5, [255; 3]);
        let out = warp_frame(&f, &Homography::translation(8.0, 0.0), 32, 16).unwrap();
        assert_eq!(out.pixel(13, 5), [255; 3]);
        assert_eq!(out.pixel(5, 5), [0; 3]);
        let lit = out.pixels().chunks(3).filter(|p| p[0] > 0).count();
        assert_eq!(lit, 1);
    }

    #[test]
    fn warp_outside_bounds_is_black() {
        let f = Frame::filled(20, 10, Modality::Rgb, [200; 3]);
        let out = warp_frame(&f, &Homography::translation(1000.0, 1000.0), 20, 10).unwrap();
        assert!(out.pixels().iter().all(|v| *v == 0));
    }

    #[test]
    fn crop_and_resize_basics() {
        let f = Frame::filled(640, 360, Modality::Rgb, [9; 3]);
        assert_eq!(crop_frame(&f, CropRect::full(640, 360)).unwrap(), f);
        assert!(matches!(
            crop_frame(&f, CropRect { x: 600, y: 0, w: 41, h: 10 }),
            Err(GeometryError::CropOutOfBounds { .. })
        ));
        assert!(crop_frame(&f, CropRect { x: 0, y: 0, w: 0, h: 10 }).is_err());
        let r = resize_frame(&f, 256, 192).unwrap();
        assert_eq!(r.dims(), (256, 192));
        assert!(r.pixels().iter().all(|v| *v == 9));
        assert!(resize_frame(&f, 0, 5).is_err());
    }

    #[test]
    fn area_average_of_checker() {
        let mut f = Frame::filled(2, 2, Modality::Rgb, [0; 3]);
        f.set_pixel(1, 0, [255; 3]);
        f.set_pixel(0, 1, [255; 3]);
        let r = resize_frame(&f, 1, 1).unwrap();
        // mean of {0, 255, 255, 0} = 127.5
        assert!((r.pixel(0, 0)[0] as i32 - 127).abs() <= 1);
    }

    #[test]
    fn area_average_matches_brute_force_box_mean() {
        // integer factor: every output pixel is the mean of a 3x2 block
        let mut f = Frame::filled(9, 4, Modality::Rgb, [0; 3]);
        for y in 0..4 {
            for x in 0..9 {
                f.set_pixel(x, y, [(x * 29 + y * 7) as u8, (x * y * 13) as u8, 200 - (x * 5) as u8]);
            }
        }
        let r = resize_frame(&f, 3, 2).unwrap();
        for oy in 0..2 {
            for ox in 0..3 {
                for c in 0..3 {
                    let mut s = 0.0;
                    for dy in 0..2 {
                        for dx in 0..3 {
                            s += f.pixel(ox * 3 + dx, oy * 2 + dy)[c] as f64;
                        }
                    }
                    assert_eq!(r.pixel(ox, oy)[c], (s / 6.0).round() as u8);
                }
            }
        }
    }

    #[test]
    fn fuse_places_halves() {
        let t = Frame::filled(256, 192, Modality::Thermal, [0; 3]);
        let r = Frame::filled(256, 192, Modality::Rgb, [255; 3]);
        let f = fuse_side_by_side(&t, &r).unwrap();
        assert_eq!(f.dims(), (512, 192));
        assert_eq!(f.modality, Modality::Combined);
        assert_eq!(f.pixel(255, 100), [0; 3]);
        assert_eq!(f.pixel(256, 100), [255; 3]);
        let (l, rr) = split_fused(&f).unwrap();
        assert_eq!(l.pixels(), t.pixels());
        assert_eq!(rr.pixels(), r.pixels());
        let small = Frame::filled(255, 192, Modality::Rgb, [1; 3]);
        assert!(matches!(fuse_side_by_side(&t, &small), Err(GeometryError::DimensionMismatch { .. })));
    }

    #[test]
    fn identity_alignment_equals_plain_resize() {
        let mut rgb = Frame::filled(640, 360, Modality::Rgb, [0; 3]);
        for y in 0..360 {
            for x in 0..640 {
                rgb.set_pixel(x, y, [(x % 251) as u8, (y % 241) as u8, ((x + y) % 13 * 19) as u8]);
            }
        }
        let aligned = align_rgb(&rgb, &Calibration::identity()).unwrap();
        assert_eq!(aligned, resize_frame(&rgb, 256, 192).unwrap());
        assert!(align_rgb(&Frame::filled(256, 192, Modality::Rgb, [0; 3]), &Calibration::identity()).is_err());
    }

    #[test]
    fn calibration_json_shape_and_round_trip() {
        let calib = Calibration {
            h: Homography::from_rows([[0.4, 0.01, -3.0], [0.0, 0.53, 2.5], [1e-5, 0.0, 1.0]]).unwrap(),
            crop: CropRect { x: 0, y: 0, w: 256, h: 192 },
        };
        let json: serde_json::Value = serde_json::to_value(calib).unwrap();
        assert_eq!(json["h"].as_array().unwrap().len(), 3);
        assert_eq!(json["h"][0].as_array().unwrap().len(), 3);
        assert_eq!(json["crop"]["w"], 256);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("calib.json");
        calib.save(&p).unwrap();
        assert_eq!(Calibration::load(&p).unwrap(), calib);
        std::fs::write(&p, r#"{"h": [[1,2,3],[2,4,6],[0,0,1]], "crop": {"x":0,"y":0,"w":1,"h":1}}"#).unwrap();
        assert!(Calibration::load(&p).is_err());
    }

    #[test]
    fn point_pair_csv() {
        let pairs = parse_point_pairs_csv("src_x,src_y,dst_x,dst_y\n1,2,3,4\n\n# c\n5,6,7,8\n").unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1], PointPair::new((5.0, 6.0), (7.0, 8.0)));
        assert!(parse_point_pairs_csv("1,2,3\n").is_err());
    }
}
