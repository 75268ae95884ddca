//! Deterministic synthetic motion generator.
//!
//! The generator poses the default 17-joint skeleton with exact forward
//! kinematics, so every ground truth a test needs is available in closed
//! form:
//!
//! - bones are rigid (limbs and torso move by rotations only), so every bone
//!   length is constant across frames when `noise_sigma == 0`;
//! - the pelvis translates linearly at `drift_velocity`, nothing else moves
//!   it, so its displacement over `n` frames is exactly `v·(n−1)/fps`;
//! - limb swings are sine waves of 1 Hz whose *arc length* amplitude is
//!   `limb_amplitude`, so with lean and drift disabled no joint moves more
//!   than `limb_amplitude · 2π / fps` between consecutive frames;
//! - the torso lean angle follows [`SynthSpec::torso_lean_angle`], which is
//!   exactly the angle between the pelvis→shoulder-midpoint axis and +z, and
//!   is zero at frame 0 (the walker starts upright).

use nalgebra::{Point3, Rotation3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::skeleton::{default_topology, Axis, PoseFrame, PoseSequence, Units};

/// Limb swing frequency in Hz.
const LIMB_FREQ_HZ: f64 = 1.0;
/// Torso lean frequency in Hz.
const LEAN_FREQ_HZ: f64 = 0.25;

/// Base skeleton in millimeters: upright, facing +y, arms hanging.
///
/// Indices follow [`crate::skeleton::DEFAULT_JOINT_NAMES`]. The reference
/// triple is proportioned so the shoulder span (360) and the
/// shoulder-midpoint-to-pelvis distance (450) are in the 2 : 2.5 ratio of the
/// universal alignment targets.
const BASE_POSE_MM: [[f64; 3]; 17] = [
    [0.0, 0.0, 1030.0],    // pelvis
    [-130.0, 0.0, 1000.0], // right_hip
    [-130.0, 0.0, 550.0],  // right_knee
    [-130.0, 0.0, 100.0],  // right_ankle
    [130.0, 0.0, 1000.0],  // left_hip
    [130.0, 0.0, 550.0],   // left_knee
    [130.0, 0.0, 100.0],   // left_ankle
    [0.0, 0.0, 1280.0],    // spine
    [0.0, 0.0, 1530.0],    // neck
    [0.0, 0.0, 1650.0],    // head
    [0.0, 0.0, 1770.0],    // head_top
    [180.0, 0.0, 1480.0],  // left_shoulder
    [180.0, 0.0, 1200.0],  // left_elbow
    [180.0, 0.0, 950.0],   // left_wrist
    [-180.0, 0.0, 1480.0], // right_shoulder
    [-180.0, 0.0, 1200.0], // right_elbow
    [-180.0, 0.0, 950.0],  // right_wrist
];

const PELVIS: usize = 0;
const TORSO_ASSEMBLY: [usize; 6] = [7, 8, 9, 10, 11, 14];
const LEFT_ARM: [usize; 2] = [12, 13];
const RIGHT_ARM: [usize; 2] = [15, 16];
const LEFT_LEG: [usize; 2] = [5, 6];
const RIGHT_LEG: [usize; 2] = [2, 3];
const LEFT_SHOULDER: usize = 11;
const RIGHT_SHOULDER: usize = 14;
const LEFT_HIP: usize = 4;
const RIGHT_HIP: usize = 1;

/// The generator's rest pose, in millimeters.
pub fn base_pose() -> Vec<Point3<f64>> {
    BASE_POSE_MM
        .iter()
        .map(|c| Point3::new(c[0], c[1], c[2]))
        .collect()
}

/// Parameters of the synthetic walker.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub frame_count: usize,
    pub fps: f64,
    /// Arc-length amplitude of the limb swings, in millimeters.
    pub limb_amplitude: f64,
    /// Maximum torso lean from vertical, in degrees.
    pub torso_lean_deg: f64,
    /// Whole-body drift velocity in millimeters per second.
    pub drift_velocity: [f64; 3],
    /// Standard deviation of i.i.d. Gaussian coordinate noise, millimeters.
    pub noise_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            frame_count: 64,
            fps: 50.0,
            limb_amplitude: 60.0,
            torso_lean_deg: 25.0,
            drift_velocity: [120.0, 80.0, 0.0],
            noise_sigma: 0.0,
        }
    }
}

impl SynthSpec {
    /// Torso lean angle (radians from vertical) at `frame`.
    ///
    /// The profile is a quartic-smoothed half-sine: zero for half of every
    /// lean period (the walker is mostly upright) with brief dips to the
    /// configured maximum.
    pub fn torso_lean_angle(&self, frame: usize) -> f64 {
        let t = frame as f64 / self.fps;
        let s = (2.0 * std::f64::consts::PI * LEAN_FREQ_HZ * t)
            .sin()
            .max(0.0);
        self.torso_lean_deg.to_radians() * s.powi(4)
    }

    fn limb_phase(&self, frame: usize, offset: f64) -> f64 {
        let t = frame as f64 / self.fps;
        (2.0 * std::f64::consts::PI * LIMB_FREQ_HZ * t + offset).sin()
    }
}

/// Generates a walking-in-place-with-drift sequence from `spec`.
///
/// Deterministic for a given seed. Panics if the spec violates its own
/// invariants (zero frames, negative noise, non-positive fps).
pub fn generate_synthetic(spec: &SynthSpec) -> PoseSequence {
    assert!(spec.frame_count >= 1, "frame_count must be at least 1");
    assert!(spec.fps > 0.0, "fps must be positive");
    assert!(spec.noise_sigma >= 0.0, "noise_sigma must be non-negative");
    assert!(
        spec.limb_amplitude >= 0.0,
        "limb_amplitude must be non-negative"
    );
    assert!(
        (0.0..90.0).contains(&spec.torso_lean_deg),
        "torso_lean_deg must be in [0, 90)"
    );

    let base = base_pose();
    let pelvis = base[PELVIS];
    let arm_extent = (base[13] - base[LEFT_SHOULDER]).norm();
    let leg_extent = (base[6] - base[LEFT_HIP]).norm();
    // Arc amplitude -> angular amplitude per chain, guarding zero extents.
    let arm_alpha = spec.limb_amplitude / arm_extent;
    let leg_alpha = spec.limb_amplitude / leg_extent;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).expect("valid sigma"))
    } else {
        None
    };

    let x_axis = Vector3::x_axis();
    let mut frames = Vec::with_capacity(spec.frame_count);
    for i in 0..spec.frame_count {
        let t = i as f64 / spec.fps;
        let drift = Vector3::new(
            spec.drift_velocity[0] * t,
            spec.drift_velocity[1] * t,
            spec.drift_velocity[2] * t,
        );
        let lean = Rotation3::from_axis_angle(&x_axis, spec.torso_lean_angle(i));
        let arm_l = Rotation3::from_axis_angle(
            &x_axis,
            arm_alpha * spec.limb_phase(i, std::f64::consts::PI),
        );
        let arm_r = Rotation3::from_axis_angle(&x_axis, arm_alpha * spec.limb_phase(i, 0.0));
        let leg_l = Rotation3::from_axis_angle(&x_axis, leg_alpha * spec.limb_phase(i, 0.0));
        let leg_r = Rotation3::from_axis_angle(
            &x_axis,
            leg_alpha * spec.limb_phase(i, std::f64::consts::PI),
        );

        let mut coords = vec![Point3::origin(); base.len()];
        // Pelvis assembly: rigid translation only.
        for &j in &[PELVIS, LEFT_HIP, RIGHT_HIP] {
            coords[j] = base[j] + drift;
        }
        // Torso assembly leans about the pelvis.
        for &j in &TORSO_ASSEMBLY {
            coords[j] = coords[PELVIS] + lean * (base[j] - pelvis);
        }
        // Arms swing about their shoulder, inside the leaned torso frame.
        for (&shoulder, chain, swing) in [
            (&LEFT_SHOULDER, LEFT_ARM, arm_l),
            (&RIGHT_SHOULDER, RIGHT_ARM, arm_r),
        ] {
            for &j in &chain {
                coords[j] = coords[shoulder] + lean * (swing * (base[j] - base[shoulder]));
            }
        }
        // Legs swing about their hip.
        for (&hip, chain, swing) in [(&LEFT_HIP, LEFT_LEG, leg_l), (&RIGHT_HIP, RIGHT_LEG, leg_r)] {
            for &j in &chain {
                coords[j] = coords[hip] + swing * (base[j] - base[hip]);
            }
        }
        if let Some(dist) = &noise {
            for p in &mut coords {
                p.x += dist.sample(&mut rng);
                p.y += dist.sample(&mut rng);
                p.z += dist.sample(&mut rng);
            }
        }
        frames.push(PoseFrame::new(coords, i));
    }

    PoseSequence {
        topology: default_topology(),
        frames,
        fps: spec.fps,
        source_label: "synthetic".to_string(),
        units: Units::Millimeters,
        up_axis: Axis::Z,
    }
}
