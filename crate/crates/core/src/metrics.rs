//! Pose evaluation metrics: MPJPE and Procrustes-aligned MPJPE.
//!
//! MPJPE is the mean Euclidean distance between corresponding joints, in the
//! input's units. P-MPJPE first fits the least-squares similarity transform
//! (scale, rotation, translation — "Protocol 2") from the prediction onto
//! the ground truth, reusing the Kabsch solver for the rotation.

use nalgebra::{Matrix3, Point3, Vector3};
use thiserror::Error;

use crate::augmotion::{kabsch, AugmotionError};
use crate::skeleton::{PoseFrame, PoseSequence};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("joint counts differ: prediction has {pred}, ground truth has {gt}")]
    JointCountMismatch { pred: usize, gt: usize },
    #[error("sequences differ in topology")]
    TopologyMismatch,
    #[error("sequences differ in length ({pred} vs {gt} frames)")]
    FrameCountMismatch { pred: usize, gt: usize },
    #[error("degenerate prediction: joints are coincident")]
    DegenerateConfiguration,
    #[error(transparent)]
    Alignment(#[from] AugmotionError),
}

/// Scale, rotation, translation — applied in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.scale * (self.rotation * p.coords) + self.translation)
    }
}

/// Mean per-joint position error between two frames, in input units.
pub fn mpjpe(pred: &PoseFrame, gt: &PoseFrame) -> Result<f64, MetricsError> {
    if pred.coords.len() != gt.coords.len() {
        return Err(MetricsError::JointCountMismatch {
            pred: pred.coords.len(),
            gt: gt.coords.len(),
        });
    }
    let n = pred.coords.len() as f64;
    Ok(pred
        .coords
        .iter()
        .zip(&gt.coords)
        .map(|(p, q)| (p - q).norm())
        .sum::<f64>()
        / n)
}

/// Least-squares similarity transform minimizing `Σ‖s·R·pred_k + t − gt_k‖²`.
///
/// The rotation comes from [`kabsch`]; the scale is the classic closed form
/// `Σ⟨gt_c, R·pred_c⟩ / Σ‖pred_c‖²` over the centered clouds, and the
/// translation re-centers the scaled, rotated prediction.
pub fn procrustes_align(
    pred: &[Point3<f64>],
    gt: &[Point3<f64>],
) -> Result<SimilarityTransform, MetricsError> {
    let rigid = kabsch(pred, gt)?;
    let n = pred.len() as f64;
    let cp = pred.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let cg = gt.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let mut dot = 0.0;
    let mut var = 0.0;
    for (p, q) in pred.iter().zip(gt) {
        let pc = p.coords - cp;
        let qc = q.coords - cg;
        dot += qc.dot(&(rigid.rotation * pc));
        var += pc.norm_squared();
    }
    if var <= 0.0 {
        return Err(MetricsError::DegenerateConfiguration);
    }
    let scale = dot / var;
    let translation = cg - scale * (rigid.rotation * cp);
    Ok(SimilarityTransform {
        scale,
        rotation: rigid.rotation,
        translation,
    })
}

/// MPJPE after the optimal similarity alignment of the prediction.
pub fn p_mpjpe(pred: &PoseFrame, gt: &PoseFrame) -> Result<f64, MetricsError> {
    if pred.coords.len() != gt.coords.len() {
        return Err(MetricsError::JointCountMismatch {
            pred: pred.coords.len(),
            gt: gt.coords.len(),
        });
    }
    let transform = procrustes_align(&pred.coords, &gt.coords)?;
    let aligned = PoseFrame::new(
        pred.coords.iter().map(|p| transform.apply(p)).collect(),
        pred.frame_index,
    );
    mpjpe(&aligned, gt)
}

/// Metric values for one frame.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FrameMetrics {
    pub frame_index: usize,
    pub mpjpe: f64,
    pub p_mpjpe: f64,
}

/// Per-frame series plus unweighted means over the sequence.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Evaluation {
    pub mpjpe: f64,
    pub p_mpjpe: f64,
    pub per_frame: Vec<FrameMetrics>,
}

/// Evaluates a predicted sequence against ground truth frame by frame.
pub fn evaluate_sequences(
    pred: &PoseSequence,
    gt: &PoseSequence,
) -> Result<Evaluation, MetricsError> {
    if pred.topology != gt.topology {
        return Err(MetricsError::TopologyMismatch);
    }
    if pred.frames.len() != gt.frames.len() {
        return Err(MetricsError::FrameCountMismatch {
            pred: pred.frames.len(),
            gt: gt.frames.len(),
        });
    }
    let mut per_frame = Vec::with_capacity(pred.frames.len());
    for (p, g) in pred.frames.iter().zip(&gt.frames) {
        per_frame.push(FrameMetrics {
            frame_index: g.frame_index,
            mpjpe: mpjpe(p, g)?,
            p_mpjpe: p_mpjpe(p, g)?,
        });
    }
    let n = per_frame.len() as f64;
    Ok(Evaluation {
        mpjpe: per_frame.iter().map(|f| f.mpjpe).sum::<f64>() / n,
        p_mpjpe: per_frame.iter().map(|f| f.p_mpjpe).sum::<f64>() / n,
        per_frame,
    })
}
