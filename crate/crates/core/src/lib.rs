//! Core building blocks for the RGB + thermal spill-detection pipeline.
//!
//! - [`frame`]: frames, pairs and session metadata, PNG persistence.
//! - [`source`]: pluggable frame sources (simulated, replay, device spool)
//!   and synchronized pair capture.
//! - [`store`]: the on-disk `<modality>/<class>/pair_NNNNNN_<modality>.png`
//!   layout.
//! - [`geometry`]: homography estimation, warping, cropping, resizing and
//!   side-by-side fusion.
//! - [`dataset`]: manifests, stratified splitting, balance validation and
//!   subset selection.
//! - [`synth`]: deterministic synthetic spill / no-spill scenes with
//!   ground-truth masks.
//! - [`bench`]: accuracy evaluation, latency measurement, model size and
//!   benchmark report rendering.

pub mod bench;
pub mod dataset;
pub mod frame;
pub mod geometry;
pub mod source;
pub mod store;
pub mod synth;

pub use frame::{ClassLabel, Frame, FramePair, Liquid, Modality, Room, SessionMeta};
