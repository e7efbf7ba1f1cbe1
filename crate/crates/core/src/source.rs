//! Frame sources and synchronized pair capture.
//!
//! Descriptor grammar: `sim:<seed>`, `replay:<dir>`, `dev:<id>`.
//!
//! Simulated and replay sources stamp frames from a virtual clock (or the
//! replay directory's `timestamps.csv`), so tests never depend on wall time.
//! Device sources read the newest frame a grabber process keeps writing to
//! `<device root>/<id>/latest.png` and stamp it with the elapsed time since
//! the source was opened.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::frame::{Frame, FrameError, FramePair, Modality};
use crate::synth::{self, Profile, SynthSpec};

pub const DEFAULT_MAX_SKEW_MS: u64 = 50;

/// Environment variable overriding [`DEFAULT_DEVICE_ROOT`].
pub const DEVICE_ROOT_ENV: &str = "SPILLSENSE_DEVICE_ROOT";
pub const DEFAULT_DEVICE_ROOT: &str = "/run/spillsense/devices";

/// Optional per-directory timestamp table for replay sources: `file,ms`.
pub const REPLAY_TIMESTAMPS: &str = "timestamps.csv";

#[derive(Debug, thiserror::Error)]
pub enum SourceError {
    #[error("unknown source kind in `{0}` (expected sim:<seed>, replay:<dir> or dev:<id>)")]
    UnknownKind(String),
    #[error("malformed source descriptor `{0}`")]
    Malformed(String),
    #[error("replay directory {0} is unreadable: {1}")]
    ReplayUnreadable(PathBuf, String),
    #[error("replay directory {0} holds no PNG frames")]
    ReplayEmpty(PathBuf),
    #[error("device `{0}` unavailable")]
    DeviceUnavailable(String),
    #[error("source `{0}` reached end of stream")]
    EndOfStream(String),
    #[error("max skew must be positive")]
    ZeroSkewLimit,
    #[error("timestamp table {path}: {message}")]
    Timestamps { path: PathBuf, message: String },
    #[error(transparent)]
    Frame(#[from] FrameError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceDescriptor {
    Simulated { seed: u64 },
    Replay { dir: PathBuf },
    Device { id: String },
}

impl FromStr for SourceDescriptor {
    type Err = SourceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| SourceError::UnknownKind(s.to_string()))?;
        if arg.is_empty() {
            return Err(SourceError::Malformed(s.to_string()));
        }
        match kind {
            "sim" => arg
                .parse()
                .map(|seed| SourceDescriptor::Simulated { seed })
                .map_err(|_| SourceError::Malformed(s.to_string())),
            "replay" => Ok(SourceDescriptor::Replay { dir: arg.into() }),
            "dev" => Ok(SourceDescriptor::Device { id: arg.to_string() }),
            _ => Err(SourceError::UnknownKind(s.to_string())),
        }
    }
}

impl fmt::Display for SourceDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceDescriptor::Simulated { seed } => write!(f, "sim:{seed}"),
            SourceDescriptor::Replay { dir } => write!(f, "replay:{}", dir.display()),
            SourceDescriptor::Device { id } => write!(f, "dev:{id}"),
        }
    }
}

/// A single-consumer stream of frames of one modality.
pub trait Source: Send {
    fn id(&self) -> &str;
    fn modality(&self) -> Modality;
    /// `Ok(None)` signals end of stream.
    fn next_frame(&mut self) -> Result<Option<Frame>, SourceError>;
}

/// Deterministic frame clock: the n-th read is stamped `start + n * period`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VirtualClock {
    pub start_ms: u64,
    pub period_ms: u64,
}

impl Default for VirtualClock {
    fn default() -> Self {
        Self {
            start_ms: 0,
            period_ms: 100,
        }
    }
}

impl VirtualClock {
    fn stamp(&self, n: u64) -> u64 {
        self.start_ms + n * self.period_ms
    }
}

pub fn open_source(desc: &SourceDescriptor, modality: Modality) -> Result<Box<dyn Source>, SourceError> {
    Ok(match desc {
        SourceDescriptor::Simulated { seed } => Box::new(SimulatedSource::new(*seed, modality)),
        SourceDescriptor::Replay { dir } => Box::new(ReplaySource::open(dir, modality)?),
        SourceDescriptor::Device { id } => Box::new(DeviceSource::open(id, modality)?),
    })
}

/// Renders the modality's view of the synthetic scene stream for `seed`.
///
/// A thermal and an RGB simulated source opened with the same seed show the
/// same scenes, so their pairs are consistent.
pub struct SimulatedSource {
    id: String,
    modality: Modality,
    spec: SynthSpec,
    clock: VirtualClock,
    reads: u64,
}

impl SimulatedSource {
    pub fn new(seed: u64, modality: Modality) -> Self {
        Self {
            id: format!("sim:{seed}/{modality}"),
            modality,
            spec: SynthSpec::profile(Profile::Separable, seed),
            clock: VirtualClock::default(),
            reads: 0,
        }
    }

    pub fn with_clock(mut self, clock: VirtualClock) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_spec(mut self, spec: SynthSpec) -> Self {
        self.spec = spec;
        self
    }
}

impl Source for SimulatedSource {
    fn id(&self) -> &str {
        &self.id
    }

    fn modality(&self) -> Modality {
        self.modality
    }

    fn next_frame(&mut self) -> Result<Option<Frame>, SourceError> {
        let scene = synth::scene(&self.spec, self.reads);
        let frame = match self.modality {
            Modality::Thermal => scene.pair.thermal().clone(),
            Modality::Rgb => scene.pair.rgb().clone(),
            Modality::Combined => {
                let thermal = scene.pair.thermal();
                let rgb = crate::geometry::resize_frame(scene.pair.rgb(), 256, 192)
                    .expect("nonzero target dims");
                crate::geometry::fuse_side_by_side(thermal, &rgb).expect("256x192 halves")
            }
        };
        let stamp = self.clock.stamp(self.reads);
        self.reads += 1;
        Ok(Some(frame.with_timestamp(stamp).with_source(self.id.clone())))
    }
}

/// Replays the PNG files of a directory in lexicographic order.
pub struct ReplaySource {
    id: String,
    modality: Modality,
    files: Vec<PathBuf>,
    stamps: HashMap<String, u64>,
    clock: VirtualClock,
    cursor: usize,
}

impl ReplaySource {
    pub fn open(dir: &Path, modality: Modality) -> Result<Self, SourceError> {
        let unreadable = |e: std::io::Error| SourceError::ReplayUnreadable(dir.to_path_buf(), e.to_string());
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(unreadable)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        if files.is_empty() {
            return Err(SourceError::ReplayEmpty(dir.to_path_buf()));
        }
        files.sort();
        let stamps = read_timestamps(&dir.join(REPLAY_TIMESTAMPS))?;
        Ok(Self {
            id: format!("replay:{}", dir.display()),
            modality,
            files,
            stamps,
            clock: VirtualClock::default(),
            cursor: 0,
        })
    }

    pub fn with_clock(mut self, clock: VirtualClock) -> Self {
        self.clock = clock;
        self
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }
}

fn read_timestamps(path: &Path) -> Result<HashMap<String, u64>, SourceError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(HashMap::new()),
        Err(e) => {
            return Err(SourceError::Timestamps {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        }
    };
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed = line
            .split_once(',')
            .and_then(|(f, ms)| Some((f.trim().to_string(), ms.trim().parse::<u64>().ok()?)));
        match parsed {
            Some((f, ms)) => {
                out.insert(f, ms);
            }
            None => {
                return Err(SourceError::Timestamps {
                    path: path.to_path_buf(),
                    message: format!("line {}: expected `file,ms`", n + 1),
                })
            }
        }
    }
    Ok(out)
}

impl Source for ReplaySource {
    fn id(&self) -> &str {
        &self.id
    }

    fn modality(&self) -> Modality {
        self.modality
    }

    fn next_frame(&mut self) -> Result<Option<Frame>, SourceError> {
        let Some(path) = self.files.get(self.cursor) else {
            return Ok(None);
        };
        let mut frame = Frame::load_png(path, self.modality)?;
        frame.check_native_dims()?;
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let stamp = self
            .stamps
            .get(name)
            .copied()
            .unwrap_or_else(|| self.clock.stamp(self.cursor as u64));
        self.cursor += 1;
        frame.timestamp_ms = stamp;
        Ok(Some(frame))
    }
}

/// Live device exposed through a spool directory kept current by a grabber.
pub struct DeviceSource {
    id: String,
    modality: Modality,
    latest: PathBuf,
    opened: Instant,
}

impl DeviceSource {
    pub fn open(id: &str, modality: Modality) -> Result<Self, SourceError> {
        let root = std::env::var_os(DEVICE_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DEVICE_ROOT));
        Self::open_in(&root, id, modality)
    }

    pub fn open_in(root: &Path, id: &str, modality: Modality) -> Result<Self, SourceError> {
        let safe = !id.is_empty() && !id.contains(['/', '\\']) && id != "." && id != "..";
        let dir = root.join(id);
        if !safe || !dir.is_dir() {
            return Err(SourceError::DeviceUnavailable(id.to_string()));
        }
        Ok(Self {
            id: format!("dev:{id}"),
            modality,
            latest: dir.join("latest.png"),
            opened: Instant::now(),
        })
    }
}

impl Source for DeviceSource {
    fn id(&self) -> &str {
        &self.id
    }

    fn modality(&self) -> Modality {
        self.modality
    }

    fn next_frame(&mut self) -> Result<Option<Frame>, SourceError> {
        let stamp = self.opened.elapsed().as_millis() as u64;
        if !self.latest.is_file() {
            return Err(SourceError::DeviceUnavailable(self.id.clone()));
        }
        let mut frame = Frame::load_png(&self.latest, self.modality)?;
        frame.check_native_dims()?;
        frame.timestamp_ms = stamp;
        frame.source_id = self.id.clone();
        Ok(Some(frame))
    }
}

/// Read one frame from each source back-to-back and pair them.
pub fn capture_pair(
    thermal_src: &mut dyn Source,
    rgb_src: &mut dyn Source,
    max_skew_ms: u64,
    session_id: &str,
) -> Result<FramePair, SourceError> {
    if max_skew_ms == 0 {
        return Err(SourceError::ZeroSkewLimit);
    }
    let thermal = thermal_src
        .next_frame()?
        .ok_or_else(|| SourceError::EndOfStream(thermal_src.id().to_string()))?;
    let rgb = rgb_src
        .next_frame()?
        .ok_or_else(|| SourceError::EndOfStream(rgb_src.id().to_string()))?;
    Ok(FramePair::new(thermal, rgb, max_skew_ms, session_id)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_replay(dir: &Path, n: usize, dims: (u32, u32)) {
        for i in 0..n {
            Frame::filled(dims.0, dims.1, Modality::Rgb, [i as u8 * 10; 3])
                .save_png(&dir.join(format!("f{i}.png")))
                .unwrap();
        }
    }

    #[test]
    fn parses_descriptor_grammar() {
        assert_eq!("sim:7".parse::<SourceDescriptor>().unwrap(), SourceDescriptor::Simulated { seed: 7 });
        assert_eq!(
            "replay:/data/run1".parse::<SourceDescriptor>().unwrap(),
            SourceDescriptor::Replay { dir: "/data/run1".into() }
        );
        assert_eq!("dev:tc001".parse::<SourceDescriptor>().unwrap(), SourceDescriptor::Device { id: "tc001".into() });
        assert!(matches!("usb:0".parse::<SourceDescriptor>(), Err(SourceError::UnknownKind(_))));
        assert!(matches!("sim:abc".parse::<SourceDescriptor>(), Err(SourceError::Malformed(_))));
        assert!(matches!("nocolon".parse::<SourceDescriptor>(), Err(SourceError::UnknownKind(_))));
        assert_eq!("sim:7".parse::<SourceDescriptor>().unwrap().to_string(), "sim:7");
    }

    #[test]
    fn simulated_first_frame_is_reproducible() {
        let d: SourceDescriptor = "sim:7".parse().unwrap();
        let a = open_source(&d, Modality::Thermal).unwrap().next_frame().unwrap().unwrap();
        let b = open_source(&d, Modality::Thermal).unwrap().next_frame().unwrap().unwrap();
        assert_eq!(a.pixels(), b.pixels());
        assert_eq!(a.dims(), (256, 192));
        assert!(a.check_native_dims().is_ok());
    }

    #[test]
    fn simulated_rgb_has_raw_dims() {
        let mut s = SimulatedSource::new(3, Modality::Rgb);
        assert_eq!(s.next_frame().unwrap().unwrap().dims(), (640, 360));
        let mut c = SimulatedSource::new(3, Modality::Combined);
        assert_eq!(c.next_frame().unwrap().unwrap().dims(), (512, 192));
    }

    #[test]
    fn replay_exhausts_after_all_files() {
        let dir = tempfile::tempdir().unwrap();
        write_replay(dir.path(), 3, (640, 360));
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let mut src = open_source(&SourceDescriptor::Replay { dir: dir.path().into() }, Modality::Rgb).unwrap();
        for _ in 0..3 {
            assert!(src.next_frame().unwrap().is_some());
        }
        assert!(src.next_frame().unwrap().is_none());
    }

    #[test]
    fn replay_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ReplaySource::open(dir.path(), Modality::Rgb), Err(SourceError::ReplayEmpty(_))));
        assert!(matches!(
            ReplaySource::open(&dir.path().join("missing"), Modality::Rgb),
            Err(SourceError::ReplayUnreadable(..))
        ));
        // wrong resolution for the declared modality
        write_replay(dir.path(), 1, (32, 32));
        let mut src = ReplaySource::open(dir.path(), Modality::Rgb).unwrap();
        assert!(matches!(src.next_frame(), Err(SourceError::Frame(FrameError::NativeDims { .. }))));
    }

    #[test]
    fn missing_device_is_unavailable() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            DeviceSource::open_in(dir.path(), "nonexistent0", Modality::Thermal),
            Err(SourceError::DeviceUnavailable(_))
        ));
        assert!(matches!(
            DeviceSource::open_in(dir.path(), "../etc", Modality::Thermal),
            Err(SourceError::DeviceUnavailable(_))
        ));
    }

    #[test]
    fn device_spool_serves_latest_frame() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("tc001")).unwrap();
        let mut src = DeviceSource::open_in(dir.path(), "tc001", Modality::Thermal).unwrap();
        assert!(matches!(src.next_frame(), Err(SourceError::DeviceUnavailable(_))));
        Frame::filled(256, 192, Modality::Thermal, [9; 3])
            .save_png(&dir.path().join("tc001/latest.png"))
            .unwrap();
        let f = src.next_frame().unwrap().unwrap();
        assert_eq!(f.pixel(0, 0), [9; 3]);
        assert_eq!(f.source_id, "dev:tc001");
    }

    #[test]
    fn capture_pair_with_equal_stamps_has_zero_skew() {
        let clock = VirtualClock { start_ms: 100, period_ms: 100 };
        let mut t = SimulatedSource::new(1, Modality::Thermal).with_clock(clock);
        let mut r = SimulatedSource::new(1, Modality::Rgb).with_clock(clock);
        let p = capture_pair(&mut t, &mut r, DEFAULT_MAX_SKEW_MS, "s").unwrap();
        assert_eq!(p.skew_ms(), 0);
        assert_eq!(p.thermal().timestamp_ms, 100);
    }

    #[test]
    fn capture_pair_measures_and_limits_skew() {
        let t_dir = tempfile::tempdir().unwrap();
        let r_dir = tempfile::tempdir().unwrap();
        Frame::filled(256, 192, Modality::Thermal, [1; 3]).save_png(&t_dir.path().join("a.png")).unwrap();
        Frame::filled(256, 192, Modality::Thermal, [1; 3]).save_png(&t_dir.path().join("b.png")).unwrap();
        write_replay(r_dir.path(), 2, (640, 360));
        std::fs::write(t_dir.path().join(REPLAY_TIMESTAMPS), "a.png,100\nb.png,100\n").unwrap();
        std::fs::write(r_dir.path().join(REPLAY_TIMESTAMPS), "f0.png,130\nf1.png,180\n").unwrap();
        let mut t = ReplaySource::open(t_dir.path(), Modality::Thermal).unwrap();
        let mut r = ReplaySource::open(r_dir.path(), Modality::Rgb).unwrap();
        let p = capture_pair(&mut t, &mut r, 50, "s").unwrap();
        assert_eq!(p.skew_ms(), 30);
        let err = capture_pair(&mut t, &mut r, 50, "s").unwrap_err();
        assert!(matches!(err, SourceError::Frame(FrameError::SkewExceeded { skew_ms: 80, max_skew_ms: 50 })));
        let err = capture_pair(&mut t, &mut r, 50, "s").unwrap_err();
        assert!(matches!(err, SourceError::EndOfStream(_)));
    }

    #[test]
    fn zero_skew_limit_rejected() {
        let mut t = SimulatedSource::new(1, Modality::Thermal);
        let mut r = SimulatedSource::new(1, Modality::Rgb);
        assert!(matches!(capture_pair(&mut t, &mut r, 0, "s"), Err(SourceError::ZeroSkewLimit)));
    }
}
