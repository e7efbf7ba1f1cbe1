//! Frames, frame pairs and capture-session metadata.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const THERMAL_DIMS: (u32, u32) = (256, 192);
pub const RGB_RAW_DIMS: (u32, u32) = (640, 360);
pub const COMBINED_DIMS: (u32, u32) = (512, 192);

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("frame dimensions must be at least 1x1, got {0}x{1}")]
    EmptyDims(u32, u32),
    #[error("pixel buffer holds {got} bytes, expected {expected} for {width}x{height}x3")]
    BufferLength {
        got: usize,
        expected: usize,
        width: u32,
        height: u32,
    },
    #[error("{modality} frame must be {expected:?}, got {got:?}")]
    NativeDims {
        modality: Modality,
        expected: (u32, u32),
        got: (u32, u32),
    },
    #[error("pair skew {skew_ms} ms exceeds the {max_skew_ms} ms limit")]
    SkewExceeded { skew_ms: u64, max_skew_ms: u64 },
    #[error("pair slot `{slot}` holds a {got} frame")]
    WrongModality { slot: &'static str, got: Modality },
    #[error("invalid session id `{0}`: expected non-empty [A-Za-z0-9_-]")]
    SessionId(String),
    #[error("unknown {kind} `{value}`")]
    Parse { kind: &'static str, value: String },
    #[error("image i/o on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Thermal,
    Rgb,
    Combined,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Thermal, Modality::Rgb, Modality::Combined];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Thermal => "thermal",
            Modality::Rgb => "rgb",
            Modality::Combined => "combined",
        }
    }

    /// Dimensions a frame of this modality has straight off the capture path.
    pub fn native_dims(self) -> (u32, u32) {
        match self {
            Modality::Thermal => THERMAL_DIMS,
            Modality::Rgb => RGB_RAW_DIMS,
            Modality::Combined => COMBINED_DIMS,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = FrameError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "thermal" => Ok(Modality::Thermal),
            "rgb" => Ok(Modality::Rgb),
            "combined" => Ok(Modality::Combined),
            _ => Err(FrameError::Parse {
                kind: "modality",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Spill,
    NoSpill,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 2] = [ClassLabel::Spill, ClassLabel::NoSpill];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Spill => "spill",
            ClassLabel::NoSpill => "no_spill",
        }
    }

    /// Binary target used by the sigmoid head: spill = 1.
    pub fn target(self) -> f32 {
        match self {
            ClassLabel::Spill => 1.0,
            ClassLabel::NoSpill => 0.0,
        }
    }

    /// Decision rule shared by evaluation and serving: spill iff p >= 0.5.
    pub fn from_confidence(p: f32) -> Self {
        if p >= 0.5 {
            ClassLabel::Spill
        } else {
            ClassLabel::NoSpill
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = FrameError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "spill" => Ok(ClassLabel::Spill),
            "no_spill" | "nospill" => Ok(ClassLabel::NoSpill),
            _ => Err(FrameError::Parse {
                kind: "class label",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum Room {
    Atrium,
    J234,
    Other(String),
}

impl Room {
    pub fn as_str(&self) -> &str {
        match self {
            Room::Atrium => "Atrium",
            Room::J234 => "J234",
            Room::Other(s) => s,
        }
    }
}

impl From<String> for Room {
    fn from(s: String) -> Self {
        match s.to_ascii_lowercase().as_str() {
            "atrium" => Room::Atrium,
            "j234" => Room::J234,
            _ => Room::Other(s),
        }
    }
}

impl From<Room> for String {
    fn from(r: Room) -> Self {
        r.as_str().to_string()
    }
}

impl FromStr for Room {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(Room::from(s.to_string()))
    }
}

impl fmt::Display for Room {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum Liquid {
    Water,
    Coke,
    RedJuice,
    YellowJuice,
    Other(String),
}

impl Liquid {
    pub fn as_str(&self) -> &str {
        match self {
            Liquid::Water => "water",
            Liquid::Coke => "coke",
            Liquid::RedJuice => "red_juice",
            Liquid::YellowJuice => "yellow_juice",
            Liquid::Other(s) => s,
        }
    }
}

impl From<String> for Liquid {
    fn from(s: String) -> Self {
        match s.to_ascii_lowercase().replace([' ', '-'], "_").as_str() {
            "water" => Liquid::Water,
            "coke" => Liquid::Coke,
            "red_juice" => Liquid::RedJuice,
            "yellow_juice" => Liquid::YellowJuice,
            _ => Liquid::Other(s),
        }
    }
}

impl From<Liquid> for String {
    fn from(l: Liquid) -> Self {
        l.as_str().to_string()
    }
}

impl FromStr for Liquid {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(Liquid::from(s.to_string()))
    }
}

impl fmt::Display for Liquid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Interleaved 8-bit RGB image plus capture metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pixels: Vec<u8>,
    width: u32,
    height: u32,
    pub modality: Modality,
    /// Milliseconds since the producing source was opened.
    pub timestamp_ms: u64,
    pub source_id: String,
}

impl Frame {
    pub fn new(
        pixels: Vec<u8>,
        width: u32,
        height: u32,
        modality: Modality,
    ) -> Result<Self, FrameError> {
        if width == 0 || height == 0 {
            return Err(FrameError::EmptyDims(width, height));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(FrameError::BufferLength {
                got: pixels.len(),
                expected,
                width,
                height,
            });
        }
        Ok(Self {
            pixels,
            width,
            height,
            modality,
            timestamp_ms: 0,
            source_id: String::new(),
        })
    }

    /// A frame filled with a single color.
    pub fn filled(width: u32, height: u32, modality: Modality, rgb: [u8; 3]) -> Self {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self::new(pixels, width.max(1), height.max(1), modality).expect("valid fill dims")
    }

    pub fn with_timestamp(mut self, timestamp_ms: u64) -> Self {
        self.timestamp_ms = timestamp_ms;
        self
    }

    pub fn with_source(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Check the modality's capture-path resolution.
    pub fn check_native_dims(&self) -> Result<(), FrameError> {
        let expected = self.modality.native_dims();
        if self.dims() != expected {
            return Err(FrameError::NativeDims {
                modality: self.modality,
                expected,
                got: self.dims(),
            });
        }
        Ok(())
    }

    pub fn load_png(path: &Path, modality: Modality) -> Result<Self, FrameError> {
        let img = image::open(path)
            .map_err(|source| FrameError::Image {
                path: path.display().to_string(),
                source,
            })?
            .into_rgb8();
        let (w, h) = img.dimensions();
        let source_id = path.display().to_string();
        Ok(Self::new(img.into_raw(), w, h, modality)?.with_source(source_id))
    }

    pub fn save_png(&self, path: &Path) -> Result<(), FrameError> {
        let img = self.to_image();
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| FrameError::Image {
                path: path.display().to_string(),
                source,
            })
    }

    pub fn to_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("buffer length checked at construction")
    }
}

/// One thermal and one RGB frame read back-to-back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePair {
    thermal: Frame,
    rgb: Frame,
    skew_ms: u64,
    pub session_id: String,
}

impl FramePair {
    pub fn new(
        thermal: Frame,
        rgb: Frame,
        max_skew_ms: u64,
        session_id: impl Into<String>,
    ) -> Result<Self, FrameError> {
        if thermal.modality != Modality::Thermal {
            return Err(FrameError::WrongModality {
                slot: "thermal",
                got: thermal.modality,
            });
        }
        if rgb.modality != Modality::Rgb {
            return Err(FrameError::WrongModality {
                slot: "rgb",
                got: rgb.modality,
            });
        }
        let skew_ms = thermal.timestamp_ms.abs_diff(rgb.timestamp_ms);
        if skew_ms > max_skew_ms {
            return Err(FrameError::SkewExceeded {
                skew_ms,
                max_skew_ms,
            });
        }
        Ok(Self {
            thermal,
            rgb,
            skew_ms,
            session_id: session_id.into(),
        })
    }

    pub fn thermal(&self) -> &Frame {
        &self.thermal
    }

    pub fn rgb(&self) -> &Frame {
        &self.rgb
    }

    pub fn skew_ms(&self) -> u64 {
        self.skew_ms
    }
}

pub fn is_safe_session_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub room: Room,
    pub liquid: Liquid,
    pub class_label: ClassLabel,
}

impl SessionMeta {
    pub fn new(
        session_id: impl Into<String>,
        room: Room,
        liquid: Liquid,
        class_label: ClassLabel,
    ) -> Result<Self, FrameError> {
        let session_id = session_id.into();
        if !is_safe_session_id(&session_id) {
            return Err(FrameError::SessionId(session_id));
        }
        Ok(Self {
            session_id,
            room,
            liquid,
            class_label,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_buffers() {
        assert!(matches!(
            Frame::new(vec![], 0, 1, Modality::Rgb),
            Err(FrameError::EmptyDims(0, 1))
        ));
        assert!(matches!(
            Frame::new(vec![0; 5], 1, 2, Modality::Rgb),
            Err(FrameError::BufferLength { expected: 6, .. })
        ));
    }

    #[test]
    fn native_dims_per_modality() {
        let t = Frame::filled(256, 192, Modality::Thermal, [0; 3]);
        assert!(t.check_native_dims().is_ok());
        let bad = Frame::filled(640, 360, Modality::Thermal, [0; 3]);
        assert!(bad.check_native_dims().is_err());
        let c = Frame::filled(512, 192, Modality::Combined, [0; 3]);
        assert!(c.check_native_dims().is_ok());
    }

    #[test]
    fn pair_skew_is_absolute_difference() {
        let t = Frame::filled(4, 4, Modality::Thermal, [1; 3]).with_timestamp(130);
        let r = Frame::filled(4, 4, Modality::Rgb, [2; 3]).with_timestamp(100);
        let p = FramePair::new(t.clone(), r.clone(), 50, "s").unwrap();
        assert_eq!(p.skew_ms(), 30);
        let r_late = r.with_timestamp(210);
        assert!(matches!(
            FramePair::new(t, r_late, 50, "s"),
            Err(FrameError::SkewExceeded { skew_ms: 80, .. })
        ));
    }

    #[test]
    fn pair_slots_check_modality() {
        let t = Frame::filled(4, 4, Modality::Rgb, [1; 3]);
        let r = Frame::filled(4, 4, Modality::Rgb, [2; 3]);
        assert!(matches!(
            FramePair::new(t, r, 50, "s"),
            Err(FrameError::WrongModality { slot: "thermal", .. })
        ));
    }

    #[test]
    fn session_ids_are_filesystem_safe() {
        assert!(SessionMeta::new("atrium-water_01", Room::Atrium, Liquid::Water, ClassLabel::Spill).is_ok());
        for bad in ["", "a/b", "x y", "..", "é"] {
            assert!(SessionMeta::new(bad, Room::Atrium, Liquid::Water, ClassLabel::Spill).is_err());
        }
    }

    #[test]
    fn enum_names_round_trip() {
        assert_eq!("J234".parse::<Room>().unwrap(), Room::J234);
        assert_eq!("Red Juice".parse::<Liquid>().unwrap(), Liquid::RedJuice);
        assert_eq!("lab7".parse::<Room>().unwrap(), Room::Other("lab7".into()));
        assert_eq!("no-spill".parse::<ClassLabel>().unwrap(), ClassLabel::NoSpill);
        let json = serde_json::to_string(&Liquid::YellowJuice).unwrap();
        assert_eq!(json, "\"yellow_juice\"");
        assert_eq!(serde_json::from_str::<Room>("\"atrium\"").unwrap(), Room::Atrium);
    }

    #[test]
    fn threshold_is_inclusive() {
        assert_eq!(ClassLabel::from_confidence(0.5), ClassLabel::Spill);
        assert_eq!(ClassLabel::from_confidence(0.4999), ClassLabel::NoSpill);
    }
}
