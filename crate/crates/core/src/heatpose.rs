//! Kinematic Gaussian-mixture heat volumes.
//!
//! Each keypoint is represented by one main isotropic Gaussian centered on
//! its ground-truth position plus chains of side Gaussians placed at
//! transitional points along every bone toward a kinematically adjacent
//! joint. A bone of length `D` earns `floor(D / c)` side components spaced
//! `c` apart, the i-th with standard deviation `i² · sigma_main`, so longer
//! bones carry more kinematic context and each keypoint's local density
//! pattern is unique to its adjacency geometry.
//!
//! Volumes are rasterized by evaluating the mixture density at voxel centers
//! and dividing by the volume's maximum voxel value, so the peak is exactly
//! one. `Channel` mode keeps one normalized grid per keypoint and is the
//! only decodable mode; `Fused` mode sums every keypoint's mixture into a
//! single grid before one normalization.
//!
//! Note on decoding: the first side component carries the same sigma as the
//! main one (`1² · sigma_main`), so a chain with any side components puts a
//! density plateau along the bone whose top can sit off the joint,
//! especially for degree-one joints. [`decode`] is exact (argmax lands in
//! the joint's voxel) when channels are single-peaked; use
//! [`decodable_spacing`] to pick a `c` that guarantees it for a given set
//! of frames.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};
use thiserror::Error;

use crate::ingest::CanonicalMetadata;
use crate::skeleton::{JointId, PoseFrame, SkeletonTopology, TopologyError};

/// Epsilon added inside the logarithm of the cross-entropy loss.
pub const CROSS_ENTROPY_EPSILON: f64 = 1e-12;

/// Default grid resolution.
pub const DEFAULT_DIMS: [usize; 3] = [64, 64, 64];
/// Default main standard deviation, in voxel edges.
pub const DEFAULT_SIGMA_VOXELS: f64 = 1.5;
/// Default transitional-point spacing, as a multiple of `sigma_main`.
pub const DEFAULT_C_OVER_SIGMA: f64 = 2.0;
/// Bounding boxes are padded by this many `sigma_main` on every side.
pub const PAD_SIGMAS: f64 = 4.0;

/// Magic prefix of the volume file format.
pub const VOLUME_MAGIC: &[u8; 8] = b"POSEVOL1";

/// Version of the volume file layout.
pub const VOLUME_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HeatposeError {
    #[error("volume dims must all be positive, got {0:?}")]
    BadDims([usize; 3]),
    #[error("volume bounds must satisfy lower < upper componentwise")]
    BadBounds,
    #[error("dims {dims:?} too small to pad {pad} sigma of {sigma_voxels} voxels per side")]
    DimsTooSmallForPadding {
        dims: [usize; 3],
        pad: f64,
        sigma_voxels: f64,
    },
    #[error("sigma_main {sigma} is below the aliasing floor {min} (half a voxel edge)")]
    SigmaTooSmall { sigma: f64, min: f64 },
    #[error("sigma {sigma} overflows the Gaussian normalization")]
    SigmaTooLarge { sigma: f64 },
    #[error("parameter {name} must be positive, got {value}")]
    NonPositiveParameter { name: &'static str, value: f64 },
    #[error("joint {joint:?} would carry {count} side components (cap {cap}); increase c")]
    TooManySideComponents {
        joint: String,
        count: usize,
        cap: usize,
    },
    #[error("joint {joint:?} at ({x}, {y}, {z}) is outside the volume bounds")]
    JointOutOfBounds {
        joint: String,
        x: f64,
        y: f64,
        z: f64,
    },
    #[error("channel {channel} is flat (all voxels equal); cannot decode")]
    FlatChannel { channel: usize },
    #[error("channel {channel} sums to zero; cannot normalize")]
    UnnormalizableChannel { channel: usize },
    #[error("fused volumes cannot be decoded; encode in channel mode")]
    UndecodableMode,
    #[error("volume specs do not match")]
    SpecMismatch,
    #[error("volume modes do not match")]
    ModeMismatch,
    #[error("channel counts do not match ({a} vs {b})")]
    ChannelCountMismatch { a: usize, b: usize },
    #[error("channel {channel} has {got} voxels, spec wants {expected}")]
    ChannelSize {
        channel: usize,
        expected: usize,
        got: usize,
    },
    #[error("voxel value {value} outside [0, 1] in channel {channel}")]
    ValueOutOfRange { channel: usize, value: f64 },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error in {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("volume file has a bad magic prefix")]
    BadMagic,
    #[error("volume file is truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported volume schema_version {found} (supported: {supported})")]
    SchemaVersion { found: u32, supported: u32 },
    #[error("volumes in one file must share spec, mode, and joint names")]
    InconsistentVolumes,
}

/// Uniformly discretized box: `dims` voxels over `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VolumeSpec {
    pub dims: [usize; 3],
    pub lower: [f64; 3],
    pub upper: [f64; 3],
}

impl VolumeSpec {
    pub fn new(dims: [usize; 3], lower: [f64; 3], upper: [f64; 3]) -> Result<Self, HeatposeError> {
        if dims.contains(&0) {
            return Err(HeatposeError::BadDims(dims));
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite())
        {
            return Err(HeatposeError::BadBounds);
        }
        Ok(Self { dims, lower, upper })
    }

    /// Cubic-voxel spec covering `points`, padded by [`PAD_SIGMAS`] times the
    /// main sigma per side. Returns the spec and the world-unit sigma that
    /// `sigma_voxels` resolves to.
    pub fn fit(
        points: impl Iterator<Item = Point3<f64>>,
        dims: [usize; 3],
        sigma_voxels: f64,
    ) -> Result<(Self, f64), HeatposeError> {
        if dims.contains(&0) {
            return Err(HeatposeError::BadDims(dims));
        }
        if sigma_voxels <= 0.0 {
            return Err(HeatposeError::NonPositiveParameter {
                name: "sigma_voxels",
                value: sigma_voxels,
            });
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for (k, v) in [p.x, p.y, p.z].into_iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        if lo.iter().any(|v| !v.is_finite()) {
            return Err(HeatposeError::BadBounds);
        }
        // Solve edge >= extent / (dims - 2*pad*sigma_voxels) per axis so the
        // padding still fits after it is expressed in voxels.
        let mut edge = 0.0f64;
        for k in 0..3 {
            let slack = dims[k] as f64 - 2.0 * PAD_SIGMAS * sigma_voxels;
            if slack <= 0.0 {
                return Err(HeatposeError::DimsTooSmallForPadding {
                    dims,
                    pad: PAD_SIGMAS,
                    sigma_voxels,
                });
            }
            edge = edge.max((hi[k] - lo[k]) / slack);
        }
        if edge == 0.0 {
            edge = 1.0; // all points coincide; any positive edge works
        }
        let mut lower = [0.0; 3];
        let mut upper = [0.0; 3];
        for k in 0..3 {
            let center = (lo[k] + hi[k]) / 2.0;
            let half = dims[k] as f64 * edge / 2.0;
            lower[k] = center - half;
            upper[k] = center + half;
        }
        Ok((Self { dims, lower, upper }, sigma_voxels * edge))
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Edge lengths of one voxel per axis.
    pub fn voxel_edges(&self) -> Vector3<f64> {
        Vector3::new(
            (self.upper[0] - self.lower[0]) / self.dims[0] as f64,
            (self.upper[1] - self.lower[1]) / self.dims[1] as f64,
            (self.upper[2] - self.lower[2]) / self.dims[2] as f64,
        )
    }

    /// Half the length of a voxel's space diagonal.
    pub fn half_voxel_diagonal(&self) -> f64 {
        self.voxel_edges().norm() / 2.0
    }

    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Point3<f64> {
        let e = self.voxel_edges();
        Point3::new(
            self.lower[0] + (ix as f64 + 0.5) * e.x,
            self.lower[1] + (iy as f64 + 0.5) * e.y,
            self.lower[2] + (iz as f64 + 0.5) * e.z,
        )
    }

    /// Linear index of voxel `(ix, iy, iz)`; x varies fastest.
    pub fn voxel_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.dims[1] + iy) * self.dims[0] + ix
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        let c = [p.x, p.y, p.z];
        c.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| v >= l && v <= u)
    }
}

/// One isotropic Gaussian component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianComponent {
    pub mu: Point3<f64>,
    pub sigma: f64,
}

impl GaussianComponent {
    /// Normalized density at `x`.
    pub fn density(&self, x: &Point3<f64>) -> f64 {
        let r2 = (x - self.mu).norm_squared();
        let norm = (2.0 * std::f64::consts::PI).powf(1.5) * self.sigma.powi(3);
        (-r2 / (2.0 * self.sigma * self.sigma)).exp() / norm
    }
}

/// Mixture for one keypoint: the main component plus the side chains,
/// ordered by adjacent joint index, then by transitional index.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointMixture {
    pub target_joint: JointId,
    pub main: GaussianComponent,
    pub sides: Vec<GaussianComponent>,
}

impl KeypointMixture {
    /// Mixture density (sum of all components) at `x`.
    pub fn density(&self, x: &Point3<f64>) -> f64 {
        self.main.density(x) + self.sides.iter().map(|g| g.density(x)).sum::<f64>()
    }
}

/// Number of side components a bone of length `D(target, adjacent)` earns:
/// `floor(D / c)`. A partial trailing segment shorter than `c` earns none,
/// which keeps every transitional point on the bone.
pub fn side_count(target: &Point3<f64>, adjacent: &Point3<f64>, c: f64) -> usize {
    assert!(c > 0.0, "spacing c must be positive");
    ((adjacent - target).norm() / c).floor() as usize
}

/// Points on the segment from `target` toward `adjacent` at distances
/// `c, 2c, …, floor(D/c)·c` from the target. Empty when `D < c`.
pub fn transitional_points(
    target: &Point3<f64>,
    adjacent: &Point3<f64>,
    c: f64,
) -> Vec<Point3<f64>> {
    let n = side_count(target, adjacent, c);
    if n == 0 {
        return Vec::new();
    }
    let delta = adjacent - target;
    let dir = delta / delta.norm();
    (1..=n)
        .map(|i| Point3::from(target.coords + dir * (i as f64 * c)))
        .collect()
}

/// Standard deviation of the i-th side component: `i² · sigma_main`.
pub fn side_sigma(i: usize, sigma_main: f64) -> f64 {
    assert!(i >= 1, "side index starts at 1");
    (i * i) as f64 * sigma_main
}

/// Smallest spacing `c` that keeps every channel of `frames` single-peaked:
/// just above the longest bone, so the floor rule yields no side components.
///
/// The first side component shares the main component's sigma (the
/// quadratic schedule starts at `1²`), so once a chain exists, the density
/// along the bone forms a plateau whose top sits off the joint. Targets
/// meant to survive an exact [`decode`] round trip should be encoded with a
/// spacing from this function; targets meant as loss supervision can use a
/// smaller `c` to switch the kinematic side chains on.
pub fn decodable_spacing<'a>(
    frames: impl Iterator<Item = &'a PoseFrame>,
    topology: &SkeletonTopology,
) -> f64 {
    let mut longest = 0.0f64;
    for frame in frames {
        for (a, b) in topology.edges() {
            longest = longest.max((frame.coords[a.0] - frame.coords[b.0]).norm());
        }
    }
    if longest > 0.0 {
        1.01 * longest
    } else {
        1.0
    }
}

/// Hard cap on side components per joint; spacings small enough to exceed
/// it would exhaust memory long before the volume could be rasterized.
pub const MAX_SIDE_COMPONENTS: usize = 100_000;

/// Builds the Gaussian mixture for joint `j` of `frame`: the main component
/// at the joint plus a side chain toward every kinematically adjacent joint.
pub fn build_mixture(
    frame: &PoseFrame,
    topology: &SkeletonTopology,
    j: JointId,
    sigma_main: f64,
    c: f64,
) -> Result<KeypointMixture, HeatposeError> {
    if sigma_main <= 0.0 {
        return Err(HeatposeError::NonPositiveParameter {
            name: "sigma_main",
            value: sigma_main,
        });
    }
    if c <= 0.0 {
        return Err(HeatposeError::NonPositiveParameter {
            name: "c",
            value: c,
        });
    }
    let target = frame.coords[j.0];
    let neighbors = topology.adjacent_joints(j)?;
    let total: usize = neighbors
        .iter()
        .map(|&adj| side_count(&target, &frame.coords[adj.0], c))
        .fold(0, usize::saturating_add);
    if total > MAX_SIDE_COMPONENTS {
        return Err(HeatposeError::TooManySideComponents {
            joint: topology.name(j).unwrap_or("?").to_string(),
            count: total,
            cap: MAX_SIDE_COMPONENTS,
        });
    }
    let mut sides = Vec::with_capacity(total);
    for &adj in neighbors {
        let adjacent = frame.coords[adj.0];
        for (i, mu) in transitional_points(&target, &adjacent, c)
            .into_iter()
            .enumerate()
        {
            sides.push(GaussianComponent {
                mu,
                sigma: side_sigma(i + 1, sigma_main),
            });
        }
    }
    Ok(KeypointMixture {
        target_joint: j,
        main: GaussianComponent {
            mu: target,
            sigma: sigma_main,
        },
        sides,
    })
}

/// Whether a volume holds one grid per keypoint or a single fused grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum VolumeMode {
    #[serde(rename = "channel")]
    Channel,
    #[serde(rename = "fused")]
    Fused,
}

impl std::fmt::Display for VolumeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VolumeMode::Channel => write!(f, "channel"),
            VolumeMode::Fused => write!(f, "fused"),
        }
    }
}

/// A rasterized heat volume; values lie in [0, 1] with a per-grid peak of
/// exactly 1 straight out of [`encode`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeatVolume {
    spec: VolumeSpec,
    mode: VolumeMode,
    joint_names: Vec<String>,
    channels: Vec<Vec<f64>>,
}

impl HeatVolume {
    /// Wraps raw grids, validating sizes and the [0, 1] value range.
    pub fn from_channels(
        spec: VolumeSpec,
        mode: VolumeMode,
        joint_names: Vec<String>,
        channels: Vec<Vec<f64>>,
    ) -> Result<Self, HeatposeError> {
        let expected = spec.voxel_count();
        for (i, ch) in channels.iter().enumerate() {
            if ch.len() != expected {
                return Err(HeatposeError::ChannelSize {
                    channel: i,
                    expected,
                    got: ch.len(),
                });
            }
            for &v in ch {
                if !(0.0..=1.0).contains(&v) {
                    return Err(HeatposeError::ValueOutOfRange {
                        channel: i,
                        value: v,
                    });
                }
            }
        }
        Ok(Self {
            spec,
            mode,
            joint_names,
            channels,
        })
    }

    pub fn spec(&self) -> &VolumeSpec {
        &self.spec
    }

    pub fn mode(&self) -> VolumeMode {
        self.mode
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }
}

/// Rasterizes one separable Gaussian into `grid`, adding its density at
/// every voxel center. Evaluated per axis so the inner loop is a pure
/// multiply-add; the product differs from a direct evaluation only by
/// rounding.
fn splat_component(grid: &mut [f64], spec: &VolumeSpec, component: &GaussianComponent) {
    let [w, h, d] = spec.dims;
    let e = spec.voxel_edges();
    let sigma2 = component.sigma * component.sigma;
    let amp = 1.0 / ((2.0 * std::f64::consts::PI).powf(1.5) * component.sigma.powi(3));
    let axis = |count: usize, lower: f64, edge: f64, mu: f64| -> Vec<f64> {
        (0..count)
            .map(|i| {
                let x = lower + (i as f64 + 0.5) * edge - mu;
                (-x * x / (2.0 * sigma2)).exp()
            })
            .collect()
    };
    let gx = axis(w, spec.lower[0], e.x, component.mu.x);
    let gy = axis(h, spec.lower[1], e.y, component.mu.y);
    let gz = axis(d, spec.lower[2], e.z, component.mu.z);
    for iz in 0..d {
        for iy in 0..h {
            let gyz = amp * gy[iy] * gz[iz];
            let row = &mut grid[(iz * h + iy) * w..(iz * h + iy) * w + w];
            for (cell, gxv) in row.iter_mut().zip(&gx) {
                *cell += gyz * gxv;
            }
        }
    }
}

/// Divides by the grid maximum and floors at the smallest positive normal
/// float. Gaussian densities are positive everywhere in exact arithmetic;
/// the floor keeps far-field voxels positive where `exp` underflows.
fn normalize_grid(grid: &mut [f64]) {
    let max = grid.iter().fold(0.0f64, |a, &v| a.max(v));
    debug_assert!(max > 0.0, "grid peak must be positive");
    for v in grid.iter_mut() {
        *v = (*v / max).max(f64::MIN_POSITIVE);
    }
}

/// Encodes every joint of `frame` into a heat volume.
///
/// Preconditions: all joints inside the spec bounds (the offending joint is
/// named otherwise) and `sigma_main` at least half the largest voxel edge
/// (aliasing guard).
pub fn encode(
    frame: &PoseFrame,
    topology: &SkeletonTopology,
    spec: &VolumeSpec,
    sigma_main: f64,
    c: f64,
    mode: VolumeMode,
) -> Result<HeatVolume, HeatposeError> {
    if sigma_main <= 0.0 {
        return Err(HeatposeError::NonPositiveParameter {
            name: "sigma_main",
            value: sigma_main,
        });
    }
    if c <= 0.0 {
        return Err(HeatposeError::NonPositiveParameter {
            name: "c",
            value: c,
        });
    }
    let max_edge = spec.voxel_edges().max();
    if sigma_main < 0.5 * max_edge {
        return Err(HeatposeError::SigmaTooSmall {
            sigma: sigma_main,
            min: 0.5 * max_edge,
        });
    }
    if !sigma_main.powi(3).is_finite() {
        return Err(HeatposeError::SigmaTooLarge { sigma: sigma_main });
    }
    for (idx, p) in frame.coords.iter().enumerate() {
        if !spec.contains(p) {
            return Err(HeatposeError::JointOutOfBounds {
                joint: topology.name(JointId(idx)).unwrap_or("?").to_string(),
                x: p.x,
                y: p.y,
                z: p.z,
            });
        }
    }

    let joints = topology.joint_count();
    let voxels = spec.voxel_count();
    let mut channels: Vec<Vec<f64>> = match mode {
        VolumeMode::Channel => (0..joints).map(|_| vec![0.0; voxels]).collect(),
        VolumeMode::Fused => vec![vec![0.0; voxels]],
    };
    for j in 0..joints {
        let mixture = build_mixture(frame, topology, JointId(j), sigma_main, c)?;
        let grid = match mode {
            VolumeMode::Channel => &mut channels[j],
            VolumeMode::Fused => &mut channels[0],
        };
        splat_component(grid, spec, &mixture.main);
        for side in &mixture.sides {
            splat_component(grid, spec, side);
        }
    }
    for grid in &mut channels {
        normalize_grid(grid);
    }
    Ok(HeatVolume {
        spec: spec.clone(),
        mode,
        joint_names: topology.joint_names().to_vec(),
        channels,
    })
}

/// Recovers per-keypoint coordinates from a channel-mode volume: per
/// channel, the argmax voxel refined by the probability-weighted centroid
/// of its 3×3×3 neighborhood (clipped at the grid boundary).
pub fn decode(vol: &HeatVolume) -> Result<Vec<Point3<f64>>, HeatposeError> {
    if vol.mode != VolumeMode::Channel {
        return Err(HeatposeError::UndecodableMode);
    }
    let spec = &vol.spec;
    let [w, h, d] = spec.dims;
    let mut out = Vec::with_capacity(vol.channels.len());
    for (ci, grid) in vol.channels.iter().enumerate() {
        let mut best = 0usize;
        let mut best_v = grid[0];
        let mut min_v = grid[0];
        for (i, &v) in grid.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
            if v < min_v {
                min_v = v;
            }
        }
        if best_v == min_v {
            return Err(HeatposeError::FlatChannel { channel: ci });
        }
        let ix = best % w;
        let iy = (best / w) % h;
        let iz = best / (w * h);
        let mut weight = 0.0;
        let mut acc = Vector3::zeros();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let jx = ix as i64 + dx;
                    let jy = iy as i64 + dy;
                    let jz = iz as i64 + dz;
                    if jx < 0 || jy < 0 || jz < 0 {
                        continue;
                    }
                    let (jx, jy, jz) = (jx as usize, jy as usize, jz as usize);
                    if jx >= w || jy >= h || jz >= d {
                        continue;
                    }
                    let v = grid[spec.voxel_index(jx, jy, jz)];
                    weight += v;
                    acc += v * spec.voxel_center(jx, jy, jz).coords;
                }
            }
        }
        out.push(Point3::from(acc / weight));
    }
    Ok(out)
}

fn check_compatible(a: &HeatVolume, b: &HeatVolume) -> Result<(), HeatposeError> {
    if a.spec != b.spec {
        return Err(HeatposeError::SpecMismatch);
    }
    if a.mode != b.mode {
        return Err(HeatposeError::ModeMismatch);
    }
    if a.channels.len() != b.channels.len() {
        return Err(HeatposeError::ChannelCountMismatch {
            a: a.channels.len(),
            b: b.channels.len(),
        });
    }
    Ok(())
}

fn normalized_sum(grid: &[f64], channel: usize) -> Result<f64, HeatposeError> {
    let sum: f64 = grid.iter().sum();
    if sum <= 0.0 {
        return Err(HeatposeError::UnnormalizableChannel { channel });
    }
    Ok(sum)
}

/// Cross-entropy between volumes viewed as per-channel probability
/// distributions over voxels (each channel sum-normalized), averaged over
/// channels: `mean_ch −Σ_x target(x)·ln(pred(x) + ε)`.
///
/// Equals the target's entropy exactly when `pred` is proportional to
/// `target` (up to the ε regularization), and exceeds it otherwise.
pub fn cross_entropy_loss(pred: &HeatVolume, target: &HeatVolume) -> Result<f64, HeatposeError> {
    check_compatible(pred, target)?;
    let mut total = 0.0;
    for (ci, (p, t)) in pred.channels.iter().zip(&target.channels).enumerate() {
        let ps = normalized_sum(p, ci)?;
        let ts = normalized_sum(t, ci)?;
        let mut ch = 0.0;
        for (&pv, &tv) in p.iter().zip(t) {
            if tv > 0.0 {
                ch -= tv / ts * (pv / ps + CROSS_ENTROPY_EPSILON).ln();
            }
        }
        total += ch;
    }
    Ok(total / pred.channels.len() as f64)
}

/// Shannon entropy of a volume's per-channel voxel distributions, averaged
/// over channels; the floor of [`cross_entropy_loss`] against that target.
pub fn entropy(vol: &HeatVolume) -> Result<f64, HeatposeError> {
    let mut total = 0.0;
    for (ci, t) in vol.channels.iter().enumerate() {
        let ts = normalized_sum(t, ci)?;
        let mut ch = 0.0;
        for &tv in t {
            if tv > 0.0 {
                let q = tv / ts;
                ch -= q * q.ln();
            }
        }
        total += ch;
    }
    Ok(total / vol.channels.len() as f64)
}

/// Mean squared voxel-wise difference over all channels.
pub fn mse_loss(pred: &HeatVolume, target: &HeatVolume) -> Result<f64, HeatposeError> {
    check_compatible(pred, target)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.channels.iter().zip(&target.channels) {
        for (&pv, &tv) in p.iter().zip(t) {
            let d = pv - tv;
            sum += d * d;
        }
        count += p.len();
    }
    Ok(sum / count as f64)
}

/// Header of the volume file format (everything but the voxel payload).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct VolumeHeader {
    pub schema_version: u32,
    pub mode: VolumeMode,
    pub spec: VolumeSpec,
    pub joint_names: Vec<String>,
    pub frame_count: usize,
    pub frame_indices: Vec<usize>,
    pub channels_per_frame: usize,
    pub sigma_main: f64,
    pub c: f64,
    /// Pose metadata carried through so decoded volumes can be written back
    /// as a canonical pose file.
    pub metadata: CanonicalMetadata,
}

/// Writes a run of per-frame volumes:
///
/// ```text
/// bytes 0..8     magic "POSEVOL1"
/// bytes 8..12    u32 little-endian header length H
/// bytes 12..12+H header JSON (see [`VolumeHeader`])
/// remainder      little-endian f32 voxel values, frame-major, then
///                channel-major, then z, y, x with x fastest
/// ```
pub fn write_volumes(
    volumes: &[HeatVolume],
    frame_indices: &[usize],
    sigma_main: f64,
    c: f64,
    metadata: &CanonicalMetadata,
    path: &Path,
) -> Result<(), HeatposeError> {
    let first = volumes.first().ok_or(HeatposeError::InconsistentVolumes)?;
    for v in volumes {
        if v.spec != first.spec
            || v.mode != first.mode
            || v.joint_names != first.joint_names
            || v.channels.len() != first.channels.len()
        {
            return Err(HeatposeError::InconsistentVolumes);
        }
    }
    if frame_indices.len() != volumes.len() {
        return Err(HeatposeError::InconsistentVolumes);
    }
    let header = VolumeHeader {
        schema_version: VOLUME_SCHEMA_VERSION,
        mode: first.mode,
        spec: first.spec.clone(),
        joint_names: first.joint_names.clone(),
        frame_count: volumes.len(),
        frame_indices: frame_indices.to_vec(),
        channels_per_frame: first.channels.len(),
        sigma_main,
        c,
        metadata: metadata.clone(),
    };
    let header_json = serde_json::to_vec(&header).expect("volume header serializes");
    let payload_len = volumes.len() * first.channels.len() * first.spec.voxel_count() * 4;
    let mut bytes = Vec::with_capacity(12 + header_json.len() + payload_len);
    bytes.extend_from_slice(VOLUME_MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for vol in volumes {
        for channel in &vol.channels {
            for &v in channel {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, &bytes).map_err(|source| HeatposeError::Io {
        path: tmp.clone(),
        source,
    })?;
    fs::rename(&tmp, path).map_err(|source| HeatposeError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a volume file back into per-frame volumes plus its header.
pub fn read_volumes(path: &Path) -> Result<(Vec<HeatVolume>, VolumeHeader), HeatposeError> {
    let bytes = fs::read(path).map_err(|source| HeatposeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if !bytes.starts_with(VOLUME_MAGIC) {
        return Err(HeatposeError::BadMagic);
    }
    let mut cursor = &bytes[VOLUME_MAGIC.len()..];
    let mut len_buf = [0u8; 4];
    cursor
        .read_exact(&mut len_buf)
        .map_err(|source| HeatposeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let header_len = u32::from_le_bytes(len_buf) as usize;
    if cursor.len() < header_len {
        return Err(HeatposeError::Truncated {
            expected: header_len,
            found: cursor.len(),
        });
    }
    let header: VolumeHeader =
        serde_json::from_slice(&cursor[..header_len]).map_err(|source| HeatposeError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
    if header.schema_version != VOLUME_SCHEMA_VERSION {
        return Err(HeatposeError::SchemaVersion {
            found: header.schema_version,
            supported: VOLUME_SCHEMA_VERSION,
        });
    }
    let payload = &cursor[header_len..];
    let voxels = header.spec.voxel_count();
    let expected = header.frame_count * header.channels_per_frame * voxels * 4;
    if payload.len() != expected {
        return Err(HeatposeError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let mut volumes = Vec::with_capacity(header.frame_count);
    let mut offset = 0;
    for _ in 0..header.frame_count {
        let mut channels = Vec::with_capacity(header.channels_per_frame);
        for _ in 0..header.channels_per_frame {
            let mut grid = Vec::with_capacity(voxels);
            for _ in 0..voxels {
                let mut buf = [0u8; 4];
                buf.copy_from_slice(&payload[offset..offset + 4]);
                grid.push(f32::from_le_bytes(buf) as f64);
                offset += 4;
            }
            channels.push(grid);
        }
        volumes.push(HeatVolume::from_channels(
            header.spec.clone(),
            header.mode,
            header.joint_names.clone(),
            channels,
        )?);
    }
    Ok((volumes, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::SkeletonTopology;
    use approx::assert_relative_eq;

    fn chain_topology(names: &[&str]) -> SkeletonTopology {
        let edges: Vec<_> = (1..names.len())
            .map(|i| (JointId(i - 1), JointId(i)))
            .collect();
        SkeletonTopology::new(names.iter().map(|s| s.to_string()).collect(), &edges, None).unwrap()
    }

    #[test]
    fn side_count_examples() {
        let o = Point3::origin();
        assert_eq!(side_count(&o, &o, 1.0), 0);
        assert_eq!(side_count(&o, &Point3::new(0.0, 0.0, 1.0), 1.0), 1);
        assert_eq!(side_count(&o, &Point3::new(2.5, 0.0, 0.0), 1.0), 2);
    }

    #[test]
    fn transitional_points_examples() {
        let o = Point3::origin();
        let pts = transitional_points(&o, &Point3::new(0.0, 0.0, 3.0), 1.0);
        assert_eq!(
            pts,
            vec![
                Point3::new(0.0, 0.0, 1.0),
                Point3::new(0.0, 0.0, 2.0),
                Point3::new(0.0, 0.0, 3.0)
            ]
        );

        assert!(transitional_points(&o, &Point3::new(0.4, 0.0, 0.0), 1.0).is_empty());

        let pts = transitional_points(&o, &Point3::new(2.0, 0.0, 0.0), 0.8);
        assert_eq!(pts.len(), 2);
        assert_relative_eq!(pts[0], Point3::new(0.8, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(pts[1], Point3::new(1.6, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn side_sigma_is_quadratic() {
        assert_eq!(side_sigma(1, 0.7), 0.7);
        assert_eq!(side_sigma(2, 0.7), 4.0 * 0.7);
        assert_eq!(side_sigma(3, 0.7), 9.0 * 0.7);
    }

    #[test]
    fn mixture_isolated_joint_has_main_only() {
        let topo = SkeletonTopology::new(vec!["only".into()], &[], None).unwrap();
        let frame = PoseFrame::new(vec![Point3::new(1.0, 2.0, 3.0)], 0);
        let m = build_mixture(&frame, &topo, JointId(0), 0.5, 1.0).unwrap();
        assert!(m.sides.is_empty());
        assert_eq!(m.main.mu, Point3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn mixture_hub_joint_counts_sides_per_edge() {
        // A hub with four neighbors, each exactly 2c away: two side
        // components per edge, eight in total.
        let names = ["hub", "n1", "n2", "n3", "n4"];
        let edges: Vec<_> = (1..5).map(|i| (JointId(0), JointId(i))).collect();
        let topo =
            SkeletonTopology::new(names.iter().map(|s| s.to_string()).collect(), &edges, None)
                .unwrap();
        let c = 0.5;
        let frame = PoseFrame::new(
            vec![
                Point3::origin(),
                Point3::new(2.0 * c, 0.0, 0.0),
                Point3::new(-2.0 * c, 0.0, 0.0),
                Point3::new(0.0, 2.0 * c, 0.0),
                Point3::new(0.0, 0.0, 2.0 * c),
            ],
            0,
        );
        let m = build_mixture(&frame, &topo, JointId(0), 0.25, c).unwrap();
        assert_eq!(m.sides.len(), 8);
    }

    #[test]
    fn mixture_sigma_sequence_per_chain() {
        let topo = chain_topology(&["a", "b", "c"]);
        let c = 1.0;
        let frame = PoseFrame::new(
            vec![
                Point3::new(-3.5, 0.0, 0.0),
                Point3::origin(),
                Point3::new(3.5, 0.0, 0.0),
            ],
            0,
        );
        let sigma = 0.4;
        let m = build_mixture(&frame, &topo, JointId(1), sigma, c).unwrap();
        assert_eq!(m.sides.len(), 6);
        let sigmas: Vec<f64> = m.sides.iter().map(|s| s.sigma).collect();
        assert_eq!(
            sigmas,
            vec![
                sigma,
                4.0 * sigma,
                9.0 * sigma,
                sigma,
                4.0 * sigma,
                9.0 * sigma
            ]
        );
    }

    fn single_joint_volume() -> (HeatVolume, Point3<f64>, VolumeSpec) {
        let topo = SkeletonTopology::new(vec!["only".into()], &[], None).unwrap();
        let keypoint = Point3::new(0.5, 0.5, 0.5);
        let spec = VolumeSpec::new([9, 9, 9], [0.0; 3], [1.0; 3]).unwrap();
        let frame = PoseFrame::new(vec![keypoint], 0);
        let vol = encode(&frame, &topo, &spec, 0.2, 0.4, VolumeMode::Channel).unwrap();
        (vol, keypoint, spec)
    }

    #[test]
    fn volume_spec_rejects_bad_geometry() {
        assert!(matches!(
            VolumeSpec::new([0, 4, 4], [0.0; 3], [1.0; 3]),
            Err(HeatposeError::BadDims(_))
        ));
        assert!(matches!(
            VolumeSpec::new([4, 4, 4], [1.0; 3], [1.0; 3]),
            Err(HeatposeError::BadBounds)
        ));
        assert!(matches!(
            VolumeSpec::new([4, 4, 4], [0.0, 0.0, f64::NAN], [1.0; 3]),
            Err(HeatposeError::BadBounds)
        ));
    }

    #[test]
    fn fit_handles_coincident_points() {
        let p = Point3::new(1.0, 2.0, 3.0);
        let (spec, sigma) =
            VolumeSpec::fit(std::iter::repeat(p).take(5), [16, 16, 16], 1.5).unwrap();
        assert!(spec.contains(&p));
        assert!(sigma > 0.0);
        assert!(spec.voxel_edges().min() > 0.0);
    }

    #[test]
    fn encode_peak_sits_on_the_keypoint() {
        let (vol, keypoint, spec) = single_joint_volume();
        let grid = vol.channel(0);
        let center_idx = spec.voxel_index(4, 4, 4);
        assert_eq!(grid[center_idx], 1.0);
        assert_eq!(spec.voxel_center(4, 4, 4), keypoint);
        for (i, &v) in grid.iter().enumerate() {
            assert!(v > 0.0 && v <= 1.0);
            if i != center_idx {
                assert!(v < 1.0);
            }
        }
    }

    #[test]
    fn encode_every_channel_peaks_at_exactly_one() {
        let seq = crate::ingest::generate_synthetic(&crate::ingest::SynthSpec {
            frame_count: 2,
            ..Default::default()
        });
        let (spec, sigma) = VolumeSpec::fit(
            seq.frames.iter().flat_map(|f| f.coords.iter().copied()),
            [24, 24, 24],
            DEFAULT_SIGMA_VOXELS,
        )
        .unwrap();
        let c = DEFAULT_C_OVER_SIGMA * sigma;
        for mode in [VolumeMode::Channel, VolumeMode::Fused] {
            let vol = encode(&seq.frames[0], &seq.topology, &spec, sigma, c, mode).unwrap();
            for ch in vol.channels() {
                let max = ch.iter().cloned().fold(0.0f64, f64::max);
                assert_eq!(max, 1.0, "peak must be exactly 1 after normalization");
                assert!(ch.iter().all(|&v| v > 0.0 && v <= 1.0));
            }
        }
    }

    #[test]
    fn encode_rejects_out_of_bounds_joint() {
        let topo = chain_topology(&["a", "b"]);
        let spec = VolumeSpec::new([8, 8, 8], [0.0; 3], [1.0; 3]).unwrap();
        let frame = PoseFrame::new(
            vec![Point3::new(0.5, 0.5, 0.5), Point3::new(1.5, 0.5, 0.5)],
            0,
        );
        let err = encode(&frame, &topo, &spec, 0.2, 0.4, VolumeMode::Channel).unwrap_err();
        assert!(err.to_string().contains('b'), "{err}");
    }

    #[test]
    fn pathological_parameters_are_rejected() {
        // A spacing small enough to demand astronomically many side
        // components must fail cleanly instead of exhausting memory.
        let topo = chain_topology(&["a", "b"]);
        let frame = PoseFrame::new(vec![Point3::origin(), Point3::new(10.0, 0.0, 0.0)], 0);
        let err = build_mixture(&frame, &topo, JointId(0), 0.5, 1e-300).unwrap_err();
        assert!(matches!(err, HeatposeError::TooManySideComponents { .. }));

        // A sigma whose cube overflows would turn the whole grid into NaN.
        let solo = SkeletonTopology::new(vec!["only".into()], &[], None).unwrap();
        let spec = VolumeSpec::new([4, 4, 4], [0.0; 3], [1.0; 3]).unwrap();
        let centered = PoseFrame::new(vec![Point3::new(0.5, 0.5, 0.5)], 0);
        let err = encode(&centered, &solo, &spec, 1e120, 1.0, VolumeMode::Channel).unwrap_err();
        assert!(matches!(err, HeatposeError::SigmaTooLarge { .. }));
    }

    #[test]
    fn encode_rejects_undersized_sigma() {
        let topo = SkeletonTopology::new(vec!["only".into()], &[], None).unwrap();
        let spec = VolumeSpec::new([8, 8, 8], [0.0; 3], [8.0; 3]).unwrap();
        let frame = PoseFrame::new(vec![Point3::new(4.0, 4.0, 4.0)], 0);
        let err = encode(&frame, &topo, &spec, 0.2, 0.4, VolumeMode::Channel).unwrap_err();
        assert!(matches!(err, HeatposeError::SigmaTooSmall { .. }));
    }

    #[test]
    fn encode_matches_direct_mixture_evaluation() {
        let (vol, _, spec) = single_joint_volume();
        let topo = SkeletonTopology::new(vec!["only".into()], &[], None).unwrap();
        let frame = PoseFrame::new(vec![Point3::new(0.5, 0.5, 0.5)], 0);
        let mixture = build_mixture(&frame, &topo, JointId(0), 0.2, 0.4).unwrap();
        // Independent oracle: evaluate the mixture at voxel centers and
        // normalize by the max.
        let mut reference: Vec<f64> = (0..spec.voxel_count())
            .map(|i| {
                let ix = i % 9;
                let iy = (i / 9) % 9;
                let iz = i / 81;
                mixture.density(&spec.voxel_center(ix, iy, iz))
            })
            .collect();
        let max = reference.iter().cloned().fold(0.0f64, f64::max);
        for r in &mut reference {
            *r /= max;
        }
        for (got, want) in vol.channel(0).iter().zip(&reference) {
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
    }

    #[test]
    fn channel_of_a_keypoint_stays_louder_than_its_neighbor() {
        // Two keypoints 4c apart: on A's channel, the density at B's voxel
        // is below the density at A's first transitional point.
        let topo = chain_topology(&["a", "b"]);
        let sigma = 0.25;
        let c = 0.5;
        let a = Point3::new(2.0, 4.0, 4.0);
        let b = Point3::new(4.0, 4.0, 4.0);
        let frame = PoseFrame::new(vec![a, b], 0);
        let spec = VolumeSpec::new([16, 16, 16], [0.0; 3], [8.0; 3]).unwrap();
        let vol = encode(&frame, &topo, &spec, sigma, c, VolumeMode::Channel).unwrap();

        let mixture = build_mixture(&frame, &topo, JointId(0), sigma, c).unwrap();
        let side1 = Point3::new(2.5, 4.0, 4.0);
        assert!(
            mixture.density(&b) < mixture.density(&side1),
            "analytic oracle"
        );

        let voxel_of = |p: &Point3<f64>| {
            let e = spec.voxel_edges();
            spec.voxel_index(
                ((p.x - spec.lower[0]) / e.x) as usize,
                ((p.y - spec.lower[1]) / e.y) as usize,
                ((p.z - spec.lower[2]) / e.z) as usize,
            )
        };
        let grid = vol.channel(0);
        assert!(grid[voxel_of(&b)] < grid[voxel_of(&side1)]);
    }

    #[test]
    fn side_influence_at_target_decreases_with_index() {
        // With i*c >= sigma_main, each further side component contributes
        // less density at the target keypoint.
        let sigma = 0.3;
        let c = 0.6;
        let target = Point3::origin();
        let mut previous = f64::INFINITY;
        for i in 1..=6usize {
            let side = GaussianComponent {
                mu: Point3::new(i as f64 * c, 0.0, 0.0),
                sigma: side_sigma(i, sigma),
            };
            let at_target = side.density(&target);
            assert!(
                at_target <= previous + 1e-18,
                "side {i} grew: {at_target} > {previous}"
            );
            previous = at_target;
        }
    }

    #[test]
    fn decode_exact_voxel_center_is_recovered() {
        let (vol, keypoint, _) = single_joint_volume();
        let decoded = decode(&vol).unwrap();
        assert_relative_eq!(decoded[0], keypoint, epsilon = 1e-9);
    }

    #[test]
    fn decode_offset_keypoint_within_half_edge() {
        let topo = SkeletonTopology::new(vec!["only".into()], &[], None).unwrap();
        let spec = VolumeSpec::new([9, 9, 9], [0.0; 3], [1.0; 3]).unwrap();
        let edge = spec.voxel_edges().x;
        // 0.3 voxel off the central voxel's center, on each axis.
        let keypoint = Point3::from(
            spec.voxel_center(4, 4, 4).coords + Vector3::new(0.3 * edge, 0.3 * edge, -0.3 * edge),
        );
        let frame = PoseFrame::new(vec![keypoint], 0);
        let vol = encode(&frame, &topo, &spec, 0.2, 0.4, VolumeMode::Channel).unwrap();
        let decoded = decode(&vol).unwrap()[0];

        // Brute-force oracle: the same weighted centroid computed from the
        // analytic densities.
        let mixture = build_mixture(&frame, &topo, JointId(0), 0.2, 0.4).unwrap();
        let mut weight = 0.0;
        let mut acc = Vector3::zeros();
        for dz in 3..=5usize {
            for dy in 3..=5 {
                for dx in 3..=5 {
                    let center = spec.voxel_center(dx, dy, dz);
                    let v = mixture.density(&center);
                    weight += v;
                    acc += v * center.coords;
                }
            }
        }
        let oracle = Point3::from(acc / weight);
        assert_relative_eq!(decoded, oracle, epsilon = 1e-9);
        assert!((decoded - keypoint).norm() <= 0.5 * spec.voxel_edges().norm());
        for k in 0..3 {
            assert!((decoded[k] - keypoint[k]).abs() <= 0.5 * edge);
        }
    }

    #[test]
    fn decode_rejects_flat_and_fused() {
        let spec = VolumeSpec::new([4, 4, 4], [0.0; 3], [1.0; 3]).unwrap();
        let flat = HeatVolume::from_channels(
            spec.clone(),
            VolumeMode::Channel,
            vec!["a".into()],
            vec![vec![0.25; spec.voxel_count()]],
        )
        .unwrap();
        assert!(matches!(
            decode(&flat),
            Err(HeatposeError::FlatChannel { channel: 0 })
        ));

        let fused = HeatVolume::from_channels(
            spec.clone(),
            VolumeMode::Fused,
            vec!["a".into()],
            vec![vec![0.25; spec.voxel_count()]],
        )
        .unwrap();
        assert!(matches!(
            decode(&fused),
            Err(HeatposeError::UndecodableMode)
        ));
    }

    fn delta_and_uniform() -> (HeatVolume, HeatVolume, usize) {
        let spec = VolumeSpec::new([8, 8, 8], [0.0; 3], [1.0; 3]).unwrap();
        let n = spec.voxel_count();
        let mut delta = vec![0.0; n];
        delta[137] = 1.0;
        let uniform = vec![0.5; n];
        let mk = |values: Vec<f64>| {
            HeatVolume::from_channels(
                spec.clone(),
                VolumeMode::Channel,
                vec!["a".into()],
                vec![values],
            )
            .unwrap()
        };
        (mk(delta), mk(uniform), n)
    }

    #[test]
    fn cross_entropy_of_identical_volumes_is_the_entropy() {
        let (_, uniform, _) = delta_and_uniform();
        let loss = cross_entropy_loss(&uniform, &uniform).unwrap();
        let h = entropy(&uniform).unwrap();
        assert!((loss - h).abs() < 1e-9, "loss {loss} vs entropy {h}");
    }

    #[test]
    fn cross_entropy_uniform_vs_delta_is_log_n() {
        let (delta, uniform, n) = delta_and_uniform();
        let loss = cross_entropy_loss(&uniform, &delta).unwrap();
        assert_relative_eq!(loss, (n as f64).ln(), epsilon = 1e-6);
    }

    #[test]
    fn cross_entropy_obeys_gibbs_inequality() {
        use rand::{Rng, SeedableRng};
        let spec = VolumeSpec::new([6, 6, 6], [0.0; 3], [1.0; 3]).unwrap();
        let n = spec.voxel_count();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                let values: Vec<f64> = (0..n).map(|_| rng.random_range(1e-6..1.0)).collect();
                HeatVolume::from_channels(
                    spec.clone(),
                    VolumeMode::Channel,
                    vec!["a".into()],
                    vec![values],
                )
                .unwrap()
            };
            let p = mk(&mut rng);
            let t = mk(&mut rng);
            let loss = cross_entropy_loss(&p, &t).unwrap();
            let h = entropy(&t).unwrap();
            assert!(loss - h >= -1e-12, "Gibbs violated: {loss} < {h}");
        }
    }

    #[test]
    fn mse_examples_and_oracle() {
        let (delta, uniform, n) = delta_and_uniform();
        assert_eq!(mse_loss(&delta, &delta).unwrap(), 0.0);

        // Constant offset of 0.25 everywhere: MSE = 0.25².
        let spec = delta.spec().clone();
        let shifted = HeatVolume::from_channels(
            spec.clone(),
            VolumeMode::Channel,
            vec!["a".into()],
            vec![uniform.channel(0).iter().map(|v| v + 0.25).collect()],
        )
        .unwrap();
        assert_relative_eq!(
            mse_loss(&shifted, &uniform).unwrap(),
            0.0625,
            epsilon = 1e-12
        );

        // Naive double-loop oracle on an arbitrary pair.
        let mut sum = 0.0;
        for (p, t) in delta.channels().iter().zip(uniform.channels()) {
            for (pv, tv) in p.iter().zip(t) {
                sum += (pv - tv) * (pv - tv);
            }
        }
        assert_relative_eq!(
            mse_loss(&delta, &uniform).unwrap(),
            sum / n as f64,
            epsilon = 1e-12
        );
    }

    #[test]
    fn loss_rejects_mismatched_volumes() {
        let (delta, _, _) = delta_and_uniform();
        let other_spec = VolumeSpec::new([8, 8, 8], [0.0; 3], [2.0; 3]).unwrap();
        let other = HeatVolume::from_channels(
            other_spec.clone(),
            VolumeMode::Channel,
            vec!["a".into()],
            vec![vec![0.5; other_spec.voxel_count()]],
        )
        .unwrap();
        assert!(matches!(
            cross_entropy_loss(&delta, &other),
            Err(HeatposeError::SpecMismatch)
        ));
        assert!(matches!(
            mse_loss(&delta, &other),
            Err(HeatposeError::SpecMismatch)
        ));
    }

    #[test]
    fn distinct_adjacency_geometry_is_distinguishable() {
        // Straight four-joint chain with equal spacing: the two middle
        // joints have identical local geometry (one neighbor each side at
        // the same distance), the endpoint does not. Correlating the 7×7×7
        // patch around each peak shows the side chains break the symmetry.
        let topo = chain_topology(&["a", "b", "c", "d"]);
        let sigma = 0.3;
        let c = 0.6;
        let y = 4.0;
        let frame = PoseFrame::new(
            vec![
                Point3::new(1.7, y, y),
                Point3::new(3.3, y, y),
                Point3::new(4.9, y, y),
                Point3::new(6.5, y, y),
            ],
            0,
        );
        let spec = VolumeSpec::new([20, 20, 20], [0.0; 3], [8.0; 3]).unwrap();
        let vol = encode(&frame, &topo, &spec, sigma, c, VolumeMode::Channel).unwrap();

        let patch = |channel: usize| -> Vec<f64> {
            let grid = vol.channel(channel);
            let peak = grid
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let (w, h) = (spec.dims[0], spec.dims[1]);
            let (px, py, pz) = (peak % w, (peak / w) % h, peak / (w * h));
            let mut out = Vec::new();
            for dz in -3i64..=3 {
                for dy in -3i64..=3 {
                    for dx in -3i64..=3 {
                        let i = spec.voxel_index(
                            (px as i64 + dx) as usize,
                            (py as i64 + dy) as usize,
                            (pz as i64 + dz) as usize,
                        );
                        out.push(grid[i]);
                    }
                }
            }
            out
        };
        let pearson = |a: &[f64], b: &[f64]| -> f64 {
            let n = a.len() as f64;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let mut cov = 0.0;
            let mut va = 0.0;
            let mut vb = 0.0;
            for (x, y) in a.iter().zip(b) {
                cov += (x - ma) * (y - mb);
                va += (x - ma) * (x - ma);
                vb += (y - mb) * (y - mb);
            }
            cov / (va.sqrt() * vb.sqrt())
        };

        let middle_pair = pearson(&patch(1), &patch(2));
        let end_vs_middle = pearson(&patch(0), &patch(1));
        assert!(middle_pair > 0.99, "identical geometry: {middle_pair}");
        assert!(end_vs_middle < 0.99, "different geometry: {end_vs_middle}");
    }

    #[test]
    fn round_trip_stays_within_half_voxel_diagonal() {
        use rand::{Rng, SeedableRng};
        let topo = crate::skeleton::default_topology();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for trial in 0..10 {
            let coords: Vec<Point3<f64>> = (0..17)
                .map(|_| {
                    Point3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect();
            let frame = PoseFrame::new(coords, 0);
            let (spec, sigma) = VolumeSpec::fit(
                frame.coords.iter().copied(),
                [32, 32, 32],
                DEFAULT_SIGMA_VOXELS,
            )
            .unwrap();
            let c = decodable_spacing(std::iter::once(&frame), &topo);
            let vol = encode(&frame, &topo, &spec, sigma, c, VolumeMode::Channel).unwrap();
            let decoded = decode(&vol).unwrap();
            let bound = spec.half_voxel_diagonal();
            for (j, (p, q)) in frame.coords.iter().zip(&decoded).enumerate() {
                let err = (p - q).norm();
                assert!(err <= bound, "trial {trial} joint {j}: {err} > {bound}");
            }
        }
    }

    #[test]
    fn hub_joint_with_side_chains_keeps_its_peak() {
        // Four single-component chains (bone length 1.5c, spacing c = 3σ)
        // meet at a hub: the sides sit well past the 2σ separation
        // threshold and have no wider followers to tilt the field, and each
        // extra chain reinforces the hub, so the argmax voxel is the voxel
        // containing the hub.
        let names = ["hub", "n1", "n2", "n3", "n4"];
        let edges: Vec<_> = (1..5).map(|i| (JointId(0), JointId(i))).collect();
        let topo =
            SkeletonTopology::new(names.iter().map(|s| s.to_string()).collect(), &edges, None)
                .unwrap();
        let spec = VolumeSpec::new([24, 24, 24], [-3.0; 3], [3.0; 3]).unwrap();
        let sigma = 1.5 * spec.voxel_edges().x;
        let c = 3.0 * sigma;
        let bone = 1.5 * c;
        let hub = Point3::new(0.05, -0.1, 0.02);
        let frame = PoseFrame::new(
            vec![
                hub,
                hub + Vector3::new(bone, 0.0, 0.0),
                hub + Vector3::new(-bone, 0.0, 0.0),
                hub + Vector3::new(0.0, bone, 0.0),
                hub + Vector3::new(0.0, 0.0, bone),
            ],
            0,
        );
        let vol = encode(&frame, &topo, &spec, sigma, c, VolumeMode::Channel).unwrap();
        let grid = vol.channel(0);
        let argmax = grid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let e = spec.voxel_edges();
        let hub_voxel = spec.voxel_index(
            ((hub.x - spec.lower[0]) / e.x) as usize,
            ((hub.y - spec.lower[1]) / e.y) as usize,
            ((hub.z - spec.lower[2]) / e.z) as usize,
        );
        assert_eq!(argmax, hub_voxel, "peak left the hub's voxel");
    }

    #[test]
    fn long_leaf_bones_shift_the_mixture_peak() {
        // With spacing c = 2σ, the first side component has the same sigma
        // and amplitude as the main one (i = 1 in the quadratic schedule),
        // so on a single long chain the density at the bone midpoint beats
        // the density at the joint. This is the analytic fact behind
        // `decodable_spacing`: exact decode round trips need c above the
        // longest bone so leaf channels stay single-peaked.
        let topo = chain_topology(&["leaf", "parent"]);
        let sigma = 0.5;
        let c = 2.0 * sigma;
        let leaf = Point3::origin();
        let frame = PoseFrame::new(vec![leaf, Point3::new(8.0 * sigma, 0.0, 0.0)], 0);
        let mixture = build_mixture(&frame, &topo, JointId(0), sigma, c).unwrap();
        let midpoint = Point3::new(sigma, 0.0, 0.0);
        assert!(
            mixture.density(&midpoint) > mixture.density(&leaf),
            "plateau midpoint must out-peak the leaf joint at c = 2σ"
        );
    }

    #[test]
    fn volume_file_round_trip() {
        let seq = crate::ingest::generate_synthetic(&crate::ingest::SynthSpec {
            frame_count: 2,
            ..Default::default()
        });
        let (spec, sigma) = VolumeSpec::fit(
            seq.frames.iter().flat_map(|f| f.coords.iter().copied()),
            [16, 16, 16],
            DEFAULT_SIGMA_VOXELS,
        )
        .unwrap();
        let c = DEFAULT_C_OVER_SIGMA * sigma;
        let volumes: Vec<HeatVolume> = seq
            .frames
            .iter()
            .map(|f| encode(f, &seq.topology, &spec, sigma, c, VolumeMode::Channel).unwrap())
            .collect();
        let metadata = crate::ingest::CanonicalDocument::from_sequence(&seq).metadata;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.bin");
        write_volumes(&volumes, &[0, 1], sigma, c, &metadata, &path).unwrap();
        let (back, header) = read_volumes(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(header.frame_indices, vec![0, 1]);
        assert_eq!(back[0].spec(), volumes[0].spec());
        // f32 payload: values match to single precision.
        for (a, b) in volumes[0].channel(3).iter().zip(back[0].channel(3)) {
            assert_eq!(*a as f32, *b as f32);
        }
    }
}
