//! Desk-scale pipeline for studying motion artifacts in neonatal brain MRI:
//! synthetic phantom cohorts with exact tissue labels, a k-space rigid-motion
//! corruption oracle, an unpaired cycleGAN that learns to remove (and add)
//! motion artifacts, a U-Net tissue segmenter, and 3D overlap/surface-distance
//! metrics to quantify how correction and motion augmentation affect
//! segmentation quality.
//!
//! Everything runs on the CPU in single precision, is deterministic for a
//! fixed seed, and persists through two tiny binary formats (`NBV1` volumes,
//! `NBC1` model checkpoints) plus plain-text manifests and CSV reports.
//!
//! The `neomotion` binary exposes each stage as a subcommand; `experiment`
//! chains them into the five-condition evaluation matrix.

pub mod cli;
pub mod cyclegan;
pub mod metrics;
pub mod motionsim;
pub mod nnkernel;
pub mod phantom;
pub mod segnet;
pub mod util;
pub mod volumeio;
