//! Skeleton topologies, pose frames, and pose sequences.
//!
//! A [`SkeletonTopology`] names the joints, fixes their order, and lists the
//! kinematic edges between them. [`PoseFrame`] and [`PoseSequence`] carry the
//! per-joint 3D coordinates; they stay plain value data so that every
//! downstream stage can treat them as immutable inputs.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::Point3;
use thiserror::Error;

/// Index of a joint within a topology's ordered joint list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct JointId(pub usize);

impl fmt::Display for JointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "joint#{}", self.0)
    }
}

/// The three anchor joints used for alignment: left shoulder, right shoulder,
/// and the pubis (mapped to the pelvis root in the default topology).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReferenceTriple {
    pub left_shoulder: JointId,
    pub right_shoulder: JointId,
    pub pubis: JointId,
}

impl ReferenceTriple {
    fn is_distinct(&self) -> bool {
        self.left_shoulder != self.right_shoulder
            && self.left_shoulder != self.pubis
            && self.right_shoulder != self.pubis
    }
}

/// Coordinate units carried by a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Units {
    /// Dataset-native millimeters (the convention for raw mocap data).
    #[serde(rename = "mm")]
    Millimeters,
    /// Unit-free universal coordinates produced by harmonization.
    #[serde(rename = "universal")]
    Universal,
}

impl fmt::Display for Units {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Units::Millimeters => write!(f, "mm"),
            Units::Universal => write!(f, "universal"),
        }
    }
}

/// The world axis a dataset declares as "up".
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Axis {
    #[serde(rename = "x")]
    X,
    #[serde(rename = "y")]
    Y,
    #[serde(rename = "z")]
    Z,
}

impl Axis {
    pub fn unit_vector(self) -> nalgebra::Vector3<f64> {
        match self {
            Axis::X => nalgebra::Vector3::x(),
            Axis::Y => nalgebra::Vector3::y(),
            Axis::Z => nalgebra::Vector3::z(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("topology has no joints")]
    Empty,
    #[error("duplicate joint name {0:?}")]
    DuplicateName(String),
    #[error("edge endpoint {0} out of range (topology has {1} joints)")]
    EdgeOutOfRange(JointId, usize),
    #[error("self-loop edge on {0}")]
    SelfLoop(JointId),
    #[error("kinematic graph is not connected")]
    Disconnected,
    #[error("reference triple joints must be distinct and present")]
    BadReferenceTriple,
    #[error("unknown joint {0}")]
    UnknownJoint(JointId),
    #[error("unknown joint name {0:?}")]
    UnknownJointName(String),
}

/// Joint names, kinematic adjacency, and the optional alignment triple.
///
/// Topologies are data, not code: [`crate::ingest`] reads them from the
/// canonical file metadata so that foreign joint sets can be mapped onto
/// the same structure.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    names: Vec<String>,
    edges: BTreeSet<(JointId, JointId)>,
    adjacency: Vec<Vec<JointId>>,
    reference_triple: Option<ReferenceTriple>,
}

impl SkeletonTopology {
    /// Builds a topology from joint names and index edges.
    ///
    /// Edges are unordered pairs; enforced invariants are unique names,
    /// in-range endpoints, no self-loops, a connected graph, and a distinct
    /// in-range reference triple when one is given.
    pub fn new(
        names: Vec<String>,
        edges: &[(JointId, JointId)],
        reference_triple: Option<ReferenceTriple>,
    ) -> Result<Self, TopologyError> {
        if names.is_empty() {
            return Err(TopologyError::Empty);
        }
        let mut seen = BTreeSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(TopologyError::DuplicateName(name.clone()));
            }
        }
        let n = names.len();
        let mut normalized = BTreeSet::new();
        for &(a, b) in edges {
            if a.0 >= n {
                return Err(TopologyError::EdgeOutOfRange(a, n));
            }
            if b.0 >= n {
                return Err(TopologyError::EdgeOutOfRange(b, n));
            }
            if a == b {
                return Err(TopologyError::SelfLoop(a));
            }
            normalized.insert((a.min(b), a.max(b)));
        }

        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in &normalized {
            adjacency[a.0].push(b);
            adjacency[b.0].push(a);
        }
        for list in &mut adjacency {
            list.sort();
        }

        // Connectivity by breadth-first walk from joint 0.
        let mut visited = vec![false; n];
        let mut queue = vec![JointId(0)];
        visited[0] = true;
        while let Some(j) = queue.pop() {
            for &k in &adjacency[j.0] {
                if !visited[k.0] {
                    visited[k.0] = true;
                    queue.push(k);
                }
            }
        }
        if visited.iter().any(|v| !v) {
            return Err(TopologyError::Disconnected);
        }

        if let Some(triple) = &reference_triple {
            let in_range =
                triple.left_shoulder.0 < n && triple.right_shoulder.0 < n && triple.pubis.0 < n;
            if !in_range || !triple.is_distinct() {
                return Err(TopologyError::BadReferenceTriple);
            }
        }

        Ok(Self {
            names,
            edges: normalized,
            adjacency,
            reference_triple,
        })
    }

    /// Same as [`SkeletonTopology::new`] but with all joints named by string.
    pub fn from_names(
        names: Vec<String>,
        edge_names: &[(String, String)],
        triple_names: Option<[String; 3]>,
    ) -> Result<Self, TopologyError> {
        let resolve = |name: &str| -> Result<JointId, TopologyError> {
            names
                .iter()
                .position(|n| n == name)
                .map(JointId)
                .ok_or_else(|| TopologyError::UnknownJointName(name.to_string()))
        };
        let mut edges = Vec::with_capacity(edge_names.len());
        for (a, b) in edge_names {
            edges.push((resolve(a)?, resolve(b)?));
        }
        let triple = match &triple_names {
            Some([l, r, p]) => Some(ReferenceTriple {
                left_shoulder: resolve(l)?,
                right_shoulder: resolve(r)?,
                pubis: resolve(p)?,
            }),
            None => None,
        };
        Self::new(names, &edges, triple)
    }

    pub fn joint_count(&self) -> usize {
        self.names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, j: JointId) -> Option<&str> {
        self.names.get(j.0).map(String::as_str)
    }

    pub fn joint_by_name(&self, name: &str) -> Option<JointId> {
        self.names.iter().position(|n| n == name).map(JointId)
    }

    /// Unordered kinematic edges, normalized to `(low, high)` index order.
    pub fn edges(&self) -> impl Iterator<Item = (JointId, JointId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn reference_triple(&self) -> Option<ReferenceTriple> {
        self.reference_triple
    }

    /// All joints sharing an edge with `j`, sorted by index.
    pub fn adjacent_joints(&self, j: JointId) -> Result<&[JointId], TopologyError> {
        self.adjacency
            .get(j.0)
            .map(Vec::as_slice)
            .ok_or(TopologyError::UnknownJoint(j))
    }
}

/// Joint names of [`default_topology`], in index order.
pub const DEFAULT_JOINT_NAMES: [&str; 17] = [
    "pelvis",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "spine",
    "neck",
    "head",
    "head_top",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
];

const DEFAULT_EDGES: [(usize, usize); 16] = [
    (0, 1),   // pelvis - right_hip
    (1, 2),   // right_hip - right_knee
    (2, 3),   // right_knee - right_ankle
    (0, 4),   // pelvis - left_hip
    (4, 5),   // left_hip - left_knee
    (5, 6),   // left_knee - left_ankle
    (0, 7),   // pelvis - spine
    (7, 8),   // spine - neck
    (8, 9),   // neck - head
    (9, 10),  // head - head_top
    (8, 11),  // neck - left_shoulder
    (11, 12), // left_shoulder - left_elbow
    (12, 13), // left_elbow - left_wrist
    (8, 14),  // neck - right_shoulder
    (14, 15), // right_shoulder - right_elbow
    (15, 16), // right_elbow - right_wrist
];

/// The default 17-joint topology.
///
/// The joint set follows the common 17-joint mocap convention (pelvis root,
/// spine/neck/head column with a head-top end effector, and symmetric limb
/// chains). The pubis anchor of the reference triple is the pelvis root.
pub fn default_topology() -> SkeletonTopology {
    let names = DEFAULT_JOINT_NAMES.iter().map(|s| s.to_string()).collect();
    let edges: Vec<(JointId, JointId)> = DEFAULT_EDGES
        .iter()
        .map(|&(a, b)| (JointId(a), JointId(b)))
        .collect();
    let triple = ReferenceTriple {
        left_shoulder: JointId(11),
        right_shoulder: JointId(14),
        pubis: JointId(0),
    };
    SkeletonTopology::new(names, &edges, Some(triple))
        .expect("default topology is statically valid")
}

/// Per-joint 3D positions for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFrame {
    pub coords: Vec<Point3<f64>>,
    pub frame_index: usize,
}

impl PoseFrame {
    pub fn new(coords: Vec<Point3<f64>>, frame_index: usize) -> Self {
        Self {
            coords,
            frame_index,
        }
    }

    pub fn joint(&self, j: JointId) -> Option<Point3<f64>> {
        self.coords.get(j.0).copied()
    }
}

/// An ordered run of frames over one topology.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub topology: SkeletonTopology,
    pub frames: Vec<PoseFrame>,
    pub fps: f64,
    pub source_label: String,
    pub units: Units,
    pub up_axis: Axis,
}

impl PoseSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Midpoint of the two shoulder joints of the topology's reference triple.
pub fn shoulder_midpoint(
    frame: &PoseFrame,
    topology: &SkeletonTopology,
) -> Result<Point3<f64>, TopologyError> {
    let triple = topology
        .reference_triple()
        .ok_or(TopologyError::BadReferenceTriple)?;
    let l = frame
        .joint(triple.left_shoulder)
        .ok_or(TopologyError::UnknownJoint(triple.left_shoulder))?;
    let r = frame
        .joint(triple.right_shoulder)
        .ok_or(TopologyError::UnknownJoint(triple.right_shoulder))?;
    Ok(Point3::from((l.coords + r.coords) / 2.0))
}

/// One defect found by [`validate_sequence`].
#[derive(Debug, Clone, PartialEq)]
pub enum ValidationIssue {
    NoFrames,
    NonFiniteCoordinate {
        frame: usize,
        joint: JointId,
    },
    JointCountMismatch {
        frame: usize,
        expected: usize,
        got: usize,
    },
    NonMonotoneFrameIndex {
        position: usize,
        index: usize,
    },
    NonPositiveFps {
        fps: f64,
    },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationIssue::NoFrames => write!(f, "sequence has no frames"),
            ValidationIssue::NonFiniteCoordinate { frame, joint } => {
                write!(f, "non-finite coordinate at frame {frame}, {joint}")
            }
            ValidationIssue::JointCountMismatch {
                frame,
                expected,
                got,
            } => write!(
                f,
                "frame {frame} has {got} joints, topology expects {expected}"
            ),
            ValidationIssue::NonMonotoneFrameIndex { position, index } => write!(
                f,
                "frame index {index} at position {position} is not strictly increasing"
            ),
            ValidationIssue::NonPositiveFps { fps } => write!(f, "fps {fps} is not positive"),
        }
    }
}

/// Issues found in a sequence; empty exactly when all invariants hold.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_clean() {
            return write!(f, "ok");
        }
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

/// Checks every sequence invariant and reports all violations at once.
pub fn validate_sequence(seq: &PoseSequence) -> ValidationReport {
    let mut issues = Vec::new();
    if seq.frames.is_empty() {
        issues.push(ValidationIssue::NoFrames);
    }
    if !(seq.fps > 0.0) {
        issues.push(ValidationIssue::NonPositiveFps { fps: seq.fps });
    }
    let expected = seq.topology.joint_count();
    let mut last_index: Option<usize> = None;
    for (pos, frame) in seq.frames.iter().enumerate() {
        if frame.coords.len() != expected {
            issues.push(ValidationIssue::JointCountMismatch {
                frame: frame.frame_index,
                expected,
                got: frame.coords.len(),
            });
        }
        for (j, p) in frame.coords.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                issues.push(ValidationIssue::NonFiniteCoordinate {
                    frame: frame.frame_index,
                    joint: JointId(j),
                });
            }
        }
        if let Some(prev) = last_index {
            if frame.frame_index <= prev {
                issues.push(ValidationIssue::NonMonotoneFrameIndex {
                    position: pos,
                    index: frame.frame_index,
                });
            }
        }
        last_index = Some(frame.frame_index);
    }
    ValidationReport { issues }
}
