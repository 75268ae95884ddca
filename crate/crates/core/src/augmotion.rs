//! Key-frame selection, rigid alignment, and universal-coordinate projection.
//!
//! The harmonization pipeline is: pick a key frame per sequence (k-means over
//! per-frame torso uprightness, largest cluster's center frame), scale the
//! key frame's reference triple to the span of the canonical targets, solve
//! for the rigid transform with [`kabsch`], and apply that one similarity
//! transform to every frame of the sequence.

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::selfcheck::{Check, SelfCheckReport};
use crate::skeleton::{
    shoulder_midpoint, Axis, PoseFrame, PoseSequence, SkeletonTopology, TopologyError, Units,
};

#[derive(Debug, Error)]
pub enum AugmotionError {
    #[error("no frames in input")]
    EmptyInput,
    #[error("topology has no reference triple")]
    MissingReferenceTriple,
    #[error("degenerate pose at frame {frame}: pubis coincides with the shoulder midpoint")]
    DegeneratePose { frame: usize },
    #[error("point sets differ in length ({a} vs {b})")]
    PointCountMismatch { a: usize, b: usize },
    #[error("need at least 3 points, got {n}")]
    TooFewPoints { n: usize },
    #[error("degenerate geometry: cross-covariance rank < 2 (collinear or coincident points)")]
    DegenerateGeometry,
    #[error("zero shoulder span at frame {frame}")]
    ZeroShoulderSpan { frame: usize },
    #[error("k must satisfy 1 <= k <= point count, got k={k} for {n} points")]
    InvalidK { k: usize, n: usize },
    #[error("no points to cluster")]
    EmptyPoints,
    #[error("key frame {key_frame} out of range ({frames} frames)")]
    KeyFrameOutOfRange { key_frame: usize, frames: usize },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// A proper rigid motion: rotation then translation.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Largest absolute entry of `RᵀR − I`.
    pub fn orthonormality_defect(&self) -> f64 {
        let m = self.rotation.transpose() * self.rotation - Matrix3::identity();
        m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    pub fn rotation_rows(&self) -> [[f64; 3]; 3] {
        let r = &self.rotation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ]
    }
}

/// Corpus-wide distance statistics of the reference triple.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ScaleRatios {
    /// Mean shoulder-to-shoulder distance.
    pub m_s: f64,
    /// Mean shoulder-midpoint-to-pubis distance.
    pub m_sp: f64,
    /// Total number of frames averaged over.
    pub n_frames_used: usize,
}

/// Outcome of key-frame selection for one sequence.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct KeyFrameResult {
    /// Position of the chosen frame within the sequence.
    pub frame_index: usize,
    /// Sizes of the three uprightness clusters (zero-padded when the
    /// sequence has fewer than three frames).
    pub cluster_sizes: [usize; 3],
    /// Per-frame uprightness features the clustering ran on.
    pub feature_values: Vec<f64>,
}

/// Mean shoulder span and shoulder-midpoint-to-pubis distance over every
/// frame of every input sequence.
pub fn compute_scale_ratios(sequences: &[PoseSequence]) -> Result<ScaleRatios, AugmotionError> {
    let mut n = 0usize;
    let mut sum_s = 0.0;
    let mut sum_sp = 0.0;
    for seq in sequences {
        let triple = seq
            .topology
            .reference_triple()
            .ok_or(AugmotionError::MissingReferenceTriple)?;
        for frame in &seq.frames {
            let l = frame.coords[triple.left_shoulder.0];
            let r = frame.coords[triple.right_shoulder.0];
            let p = frame.coords[triple.pubis.0];
            let mid = Point3::from((l.coords + r.coords) / 2.0);
            sum_s += (l - r).norm();
            sum_sp += (mid - p).norm();
            n += 1;
        }
    }
    if n == 0 {
        return Err(AugmotionError::EmptyInput);
    }
    Ok(ScaleRatios {
        m_s: sum_s / n as f64,
        m_sp: sum_sp / n as f64,
        n_frames_used: n,
    })
}

/// Fixed universal-coordinate anchors for (left shoulder, right shoulder,
/// pubis): shoulders straddle the z-axis two units apart, the pubis sits
/// below on the axis.
pub fn canonical_reference_targets() -> [Point3<f64>; 3] {
    [
        Point3::new(-1.0, 0.0, 3.0),
        Point3::new(1.0, 0.0, 3.0),
        Point3::new(0.0, 0.0, 0.5),
    ]
}

/// Cosine of the angle between the pubis→shoulder-midpoint axis and the
/// dataset's up axis. 1 means perfectly upright; range [-1, 1].
pub fn uprightness_feature(
    frame: &PoseFrame,
    topology: &SkeletonTopology,
    up: Axis,
) -> Result<f64, AugmotionError> {
    let triple = topology
        .reference_triple()
        .ok_or(AugmotionError::MissingReferenceTriple)?;
    let mid = shoulder_midpoint(frame, topology)?;
    let pubis = frame.coords[triple.pubis.0];
    let axis = mid - pubis;
    let norm = axis.norm();
    if norm < 1e-12 {
        return Err(AugmotionError::DegeneratePose {
            frame: frame.frame_index,
        });
    }
    Ok((axis.dot(&up.unit_vector()) / norm).clamp(-1.0, 1.0))
}

/// Per-frame uprightness features for a whole sequence.
pub fn uprightness_features(seq: &PoseSequence) -> Result<Vec<f64>, AugmotionError> {
    seq.frames
        .iter()
        .map(|f| uprightness_feature(f, &seq.topology, seq.up_axis))
        .collect()
}

/// Result of [`kmeans`]: cluster assignment per point and the centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
}

impl KMeans {
    pub fn cluster_sizes(&self, k: usize) -> Vec<usize> {
        let mut sizes = vec![0usize; k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn inertia(&self, points: &[Vec<f64>]) -> f64 {
        points
            .iter()
            .zip(&self.assignments)
            .map(|(p, &a)| dist2(p, &self.centroids[a]))
            .sum()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = dist2(point, &centroids[0]);
    for (i, c) in centroids.iter().enumerate().skip(1) {
        let d = dist2(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Deterministic for a fixed seed. Iteration stops when assignments stop
/// changing or after `max_iter` rounds; returned centroids are always the
/// means of their assigned points. Ties (equal distances, equal weights)
/// break toward the lower index.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<KMeans, AugmotionError> {
    let n = points.len();
    if n == 0 {
        return Err(AugmotionError::EmptyPoints);
    }
    if k == 0 || k > n {
        return Err(AugmotionError::InvalidK { k, n });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding: first center uniform, then weighted by squared
    // distance to the nearest chosen center.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    centroids.push(points[first].clone());
    chosen[first] = true;
    while centroids.len() < k {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| dist2(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, w) in weights.iter().enumerate() {
                if target < *w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            // All remaining points coincide with a centroid; take the first
            // unchosen index so that k == n still yields k distinct seeds.
            chosen.iter().position(|&c| !c).unwrap_or(0)
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
    }

    let assign = |centroids: &[Vec<f64>]| -> Vec<usize> {
        points.iter().map(|p| nearest(p, centroids)).collect()
    };
    let update = |assignments: &[usize], previous: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        sums.iter()
            .zip(&counts)
            .zip(previous)
            .map(|((sum, &count), prev)| {
                if count == 0 {
                    prev.clone()
                } else {
                    sum.iter().map(|s| s / count as f64).collect()
                }
            })
            .collect()
    };

    let mut assignments = assign(&centroids);
    let mut iterations = 0;
    loop {
        centroids = update(&assignments, &centroids);
        let next = assign(&centroids);
        iterations += 1;
        if next == assignments || iterations >= max_iter {
            return Ok(KMeans {
                assignments,
                centroids,
                iterations,
            });
        }
        assignments = next;
    }
}

/// Picks the key frame of a sequence: k-means (k = 3) over per-frame
/// uprightness, then the frame nearest the centroid of the largest cluster.
///
/// Ties break toward the cluster with higher mean uprightness, then the
/// lower cluster index; within the cluster, toward the lower frame index.
pub fn select_key_frame(seq: &PoseSequence, seed: u64) -> Result<KeyFrameResult, AugmotionError> {
    if seq.frames.is_empty() {
        return Err(AugmotionError::EmptyInput);
    }
    let features = uprightness_features(seq)?;
    let n = features.len();
    let k = n.min(3);
    let points: Vec<Vec<f64>> = features.iter().map(|&f| vec![f]).collect();
    let km = kmeans(&points, k, seed, 100)?;
    let sizes = km.cluster_sizes(k);

    let mean_feature = |cluster: usize| -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (f, &a) in features.iter().zip(&km.assignments) {
            if a == cluster {
                sum += f;
                count += 1;
            }
        }
        if count == 0 {
            f64::NEG_INFINITY
        } else {
            sum / count as f64
        }
    };

    let mut best_cluster = 0;
    for c in 1..k {
        let better = match sizes[c].cmp(&sizes[best_cluster]) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Equal => mean_feature(c) > mean_feature(best_cluster),
            std::cmp::Ordering::Less => false,
        };
        if better {
            best_cluster = c;
        }
    }

    let centroid = km.centroids[best_cluster][0];
    let mut best_frame = None;
    let mut best_gap = f64::INFINITY;
    for (i, (&f, &a)) in features.iter().zip(&km.assignments).enumerate() {
        if a != best_cluster {
            continue;
        }
        let gap = (f - centroid).abs();
        if gap < best_gap {
            best_gap = gap;
            best_frame = Some(i);
        }
    }

    let mut cluster_sizes = [0usize; 3];
    for (slot, &size) in cluster_sizes.iter_mut().zip(&sizes) {
        *slot = size;
    }
    Ok(KeyFrameResult {
        frame_index: best_frame.expect("largest cluster is non-empty"),
        cluster_sizes,
        feature_values: features,
    })
}

/// Singular value decomposition of a 3×3 matrix with columns sorted by
/// descending singular value.
fn sorted_svd3(m: &Matrix3<f64>) -> (Matrix3<f64>, Vector3<f64>, Matrix3<f64>) {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let v = v_t.transpose();
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).expect("finite singular values"));
    let mut u_sorted = Matrix3::zeros();
    let mut v_sorted = Matrix3::zeros();
    let mut s_sorted = Vector3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        u_sorted.set_column(dst, &u.column(src));
        v_sorted.set_column(dst, &v.column(src));
        s_sorted[dst] = s[src];
    }
    (u_sorted, s_sorted, v_sorted)
}

/// Optimal proper rigid motion from `a` onto `b` (matched point order).
///
/// Centers both sets, accumulates the cross-covariance of the centered
/// clouds, and takes its SVD; the reflection guard on the smallest singular
/// direction keeps the determinant at +1. The translation re-centers `a`'s
/// centroid onto `b`'s.
pub fn kabsch(a: &[Point3<f64>], b: &[Point3<f64>]) -> Result<RigidTransform, AugmotionError> {
    if a.len() != b.len() {
        return Err(AugmotionError::PointCountMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let n = a.len();
    if n < 3 {
        return Err(AugmotionError::TooFewPoints { n });
    }
    let nf = n as f64;
    let ca = a.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / nf;
    let cb = b.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / nf;

    let mut h = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        h += (p.coords - ca) * (q.coords - cb).transpose();
    }

    let (u, s, v) = sorted_svd3(&h);
    if !(s[1] > s[0] * 1e-12) {
        return Err(AugmotionError::DegenerateGeometry);
    }
    let d = if (v * u.transpose()).determinant() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let translation = cb - rotation * ca;
    Ok(RigidTransform {
        rotation,
        translation,
    })
}

/// Root-mean-square deviation of `transform` applied to `a` against `b`.
pub fn alignment_rmsd(transform: &RigidTransform, a: &[Point3<f64>], b: &[Point3<f64>]) -> f64 {
    let n = a.len().max(1) as f64;
    let ss: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (transform.apply(p) - q).norm_squared())
        .sum();
    (ss / n).sqrt()
}

/// A harmonized sequence together with the similarity transform that
/// produced it, for auditability.
#[derive(Debug, Clone)]
pub struct Harmonized {
    pub sequence: PoseSequence,
    /// Uniform scale applied before the rigid motion.
    pub scale: f64,
    pub transform: RigidTransform,
    /// RMSD of the key frame's scaled reference triple against the targets.
    pub residual: f64,
    pub key_frame: usize,
}

/// Projects a whole sequence into the universal coordinate system.
///
/// The uniform scale maps the key frame's shoulder span onto the target
/// span; [`kabsch`] then aligns the scaled reference triple onto `targets`,
/// and the single resulting similarity transform is applied to every frame.
pub fn harmonize_sequence(
    seq: &PoseSequence,
    key_frame: usize,
    targets: &[Point3<f64>; 3],
) -> Result<Harmonized, AugmotionError> {
    let frame = seq
        .frames
        .get(key_frame)
        .ok_or(AugmotionError::KeyFrameOutOfRange {
            key_frame,
            frames: seq.frames.len(),
        })?;
    let triple = seq
        .topology
        .reference_triple()
        .ok_or(AugmotionError::MissingReferenceTriple)?;
    let l = frame.coords[triple.left_shoulder.0];
    let r = frame.coords[triple.right_shoulder.0];
    let p = frame.coords[triple.pubis.0];
    let span = (l - r).norm();
    if span < 1e-12 {
        return Err(AugmotionError::ZeroShoulderSpan {
            frame: frame.frame_index,
        });
    }
    let scale = (targets[0] - targets[1]).norm() / span;
    let scaled = |pt: &Point3<f64>| Point3::from(pt.coords * scale);
    let source = [scaled(&l), scaled(&r), scaled(&p)];
    let transform = kabsch(&source, targets)?;
    let residual = alignment_rmsd(&transform, &source, targets);

    let frames = seq
        .frames
        .iter()
        .map(|f| {
            PoseFrame::new(
                f.coords
                    .iter()
                    .map(|pt| transform.apply(&scaled(pt)))
                    .collect(),
                f.frame_index,
            )
        })
        .collect();
    let sequence = PoseSequence {
        topology: seq.topology.clone(),
        frames,
        fps: seq.fps,
        source_label: seq.source_label.clone(),
        units: Units::Universal,
        up_axis: Axis::Z,
    };
    Ok(Harmonized {
        sequence,
        scale,
        transform,
        residual,
        key_frame,
    })
}

/// Uniformly random rotation matrix (normalized 4-Gaussian quaternion).
fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    loop {
        let q = nalgebra::Quaternion::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if q.norm() > 1e-6 {
            return nalgebra::UnitQuaternion::from_quaternion(q)
                .to_rotation_matrix()
                .into_inner();
        }
    }
}

/// Seeded construct-and-recover exercise of [`kabsch`]; backs the CLI
/// `kabsch-selftest` subcommand.
pub fn kabsch_self_check(seed: u64, trials: usize) -> SelfCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_frob = 0.0f64;
    let mut max_rmsd = 0.0f64;
    let mut max_defect = 0.0f64;
    let mut max_det_err = 0.0f64;
    for _ in 0..trials {
        let rotation = random_rotation(&mut rng);
        let translation = Vector3::new(
            rng.random_range(-100.0..100.0),
            rng.random_range(-100.0..100.0),
            rng.random_range(-100.0..100.0),
        );
        let a: Vec<Point3<f64>> = (0..17)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let b: Vec<Point3<f64>> = a
            .iter()
            .map(|p| Point3::from(rotation * p.coords + translation))
            .collect();
        let recovered = kabsch(&a, &b).expect("random cloud is non-degenerate");
        max_frob = max_frob.max((recovered.rotation - rotation).norm());
        max_rmsd = max_rmsd.max(alignment_rmsd(&recovered, &a, &b));
        max_defect = max_defect.max(recovered.orthonormality_defect());
        max_det_err = max_det_err.max((recovered.rotation.determinant() - 1.0).abs());
    }
    SelfCheckReport {
        checks: vec![
            Check::new(
                "rotation_recovery_frobenius",
                max_frob < 1e-9,
                format!("max Frobenius error {max_frob:.3e} over {trials} trials"),
            ),
            Check::new(
                "alignment_rmsd",
                max_rmsd < 1e-9,
                format!("max RMSD {max_rmsd:.3e}"),
            ),
            Check::new(
                "rotation_orthonormal",
                max_defect < 1e-9,
                format!("max |R'R - I| entry {max_defect:.3e}"),
            ),
            Check::new(
                "rotation_proper",
                max_det_err < 1e-9,
                format!("max |det R - 1| {max_det_err:.3e}"),
            ),
        ],
    }
}
