//! Pose-sequence harmonization and volumetric keypoint targets.
//!
//! The crate is organized around a small set of value types ([`skeleton`])
//! and five processing stages:
//!
//! - [`ingest`] — the canonical on-disk pose format, sliding-window clip
//!   extraction, and a deterministic synthetic motion generator.
//! - [`augmotion`] — key-frame selection (k-means over torso uprightness),
//!   Kabsch rigid alignment, and projection of whole sequences into a
//!   shared universal coordinate system.
//! - [`heatpose`] — per-keypoint Gaussian-mixture heat volumes with side
//!   components along the kinematic chains, plus decode and loss functions.
//! - [`attention`] — a scaled-dot-product attention kernel with a 3D
//!   relative position bias, for numerical verification at toy scale.
//! - [`metrics`] — MPJPE and Procrustes-aligned MPJPE.
//!
//! All operations are pure functions over immutable data; everything is
//! deterministic given an explicit seed.

pub mod attention;
pub mod augmotion;
pub mod heatpose;
pub mod ingest;
pub mod metrics;
pub mod selfcheck;
pub mod skeleton;

pub use skeleton::{
    Axis, JointId, PoseFrame, PoseSequence, ReferenceTriple, SkeletonTopology, Units,
};
