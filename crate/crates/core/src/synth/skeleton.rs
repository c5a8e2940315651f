use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{add, mat_mul, mat_vec, rot_x, rot_z, scale, Mat3, Vec3, IDENTITY};
use crate::error::{Error, Result};

pub const HEAD: usize = 0;
pub const NECK: usize = 1;
pub const L_SHOULDER: usize = 2;
pub const R_SHOULDER: usize = 3;
pub const L_ELBOW: usize = 4;
pub const R_ELBOW: usize = 5;
pub const L_WRIST: usize = 6;
pub const R_WRIST: usize = 7;
pub const THORAX: usize = 8;
pub const PELVIS: usize = 9;
pub const L_HIP: usize = 10;
pub const R_HIP: usize = 11;
pub const L_KNEE: usize = 12;
pub const R_KNEE: usize = 13;
pub const L_ANKLE: usize = 14;
pub const R_ANKLE: usize = 15;

pub const JOINT_COUNT: usize = 16;

pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "head", "neck", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "thorax", "pelvis",
    "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle",
];

/// Head, neck, shoulders, elbows, wrists, thorax and pelvis.
pub const UPPER_BODY: [usize; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];
/// Hips, knees and ankles.
pub const LOWER_BODY: [usize; 6] = [10, 11, 12, 13, 14, 15];

/// One pose: joint positions in millimetres.
pub type Pose = Vec<Vec3>;

/// Rotational degree of freedom of a bone about its parent joint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dof {
    /// About +x (right); swings downward-pointing bones forward.
    Flex = 0,
    /// About the forward axis, mirrored so positive is outward on both sides.
    Abd = 1,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub flex: [f64; 2],
    pub abd: [f64; 2],
}

impl JointLimits {
    pub fn range(&self, dof: Dof) -> [f64; 2] {
        match dof {
            Dof::Flex => self.flex,
            Dof::Abd => self.abd,
        }
    }
}

/// Kinematic tree. Body frame: x right, y down, z forward, pelvis at the
/// origin; the wearer's left is −x.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    /// Unit bone direction at rest, in the parent's frame.
    pub rest_directions: Vec<Vec3>,
    pub bone_lengths: Vec<f64>,
    /// +1 for left and midline joints, −1 for right joints.
    pub mirror: Vec<f64>,
    pub limits: Vec<JointLimits>,
    /// Neutral joint angles `[flex, abd]` around which motion oscillates.
    pub neutral: Vec<[f64; 2]>,
}

impl Default for SkeletonSpec {
    fn default() -> Self {
        let up = [0.0, -1.0, 0.0];
        let down = [0.0, 1.0, 0.0];
        let left = [-1.0, 0.0, 0.0];
        let right = [1.0, 0.0, 0.0];
        let lim = |flex: [f64; 2], abd: [f64; 2]| JointLimits { flex, abd };
        // (parent, direction, length, mirror, limits, neutral)
        let table: [(Option<usize>, Vec3, f64, f64, JointLimits, [f64; 2]); JOINT_COUNT] = [
            (Some(NECK), up, 160.0, 1.0, lim([-0.5, 0.4], [-0.3, 0.3]), [0.0, 0.0]),
            (Some(THORAX), up, 240.0, 1.0, lim([-0.35, 0.2], [-0.15, 0.15]), [0.0, 0.0]),
            (Some(NECK), left, 170.0, 1.0, lim([-0.15, 0.15], [-0.1, 0.2]), [0.0, 0.0]),
            (Some(NECK), right, 170.0, -1.0, lim([-0.15, 0.15], [-0.1, 0.2]), [0.0, 0.0]),
            (Some(L_SHOULDER), down, 280.0, 1.0, lim([-0.8, 2.9], [-0.3, 2.9]), [0.1, 0.2]),
            (Some(R_SHOULDER), down, 280.0, -1.0, lim([-0.8, 2.9], [-0.3, 2.9]), [0.1, 0.2]),
            (Some(L_ELBOW), down, 250.0, 1.0, lim([0.0, 2.5], [-0.3, 0.3]), [0.3, 0.0]),
            (Some(R_ELBOW), down, 250.0, -1.0, lim([0.0, 2.5], [-0.3, 0.3]), [0.3, 0.0]),
            (Some(PELVIS), up, 250.0, 1.0, lim([-0.6, 0.25], [-0.2, 0.2]), [0.0, 0.0]),
            (None, [0.0; 3], 0.0, 1.0, lim([0.0, 0.0], [0.0, 0.0]), [0.0, 0.0]),
            (Some(PELVIS), left, 100.0, 1.0, lim([-0.05, 0.05], [-0.05, 0.05]), [0.0, 0.0]),
            (Some(PELVIS), right, 100.0, -1.0, lim([-0.05, 0.05], [-0.05, 0.05]), [0.0, 0.0]),
            (Some(L_HIP), down, 430.0, 1.0, lim([-0.6, 1.9], [-0.3, 0.6]), [0.05, 0.05]),
            (Some(R_HIP), down, 430.0, -1.0, lim([-0.6, 1.9], [-0.3, 0.6]), [0.05, 0.05]),
            (Some(L_KNEE), down, 410.0, 1.0, lim([-2.3, 0.0], [-0.1, 0.1]), [-0.1, 0.0]),
            (Some(R_KNEE), down, 410.0, -1.0, lim([-2.3, 0.0], [-0.1, 0.1]), [-0.1, 0.0]),
        ];
        Self {
            names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            parents: table.iter().map(|r| r.0).collect(),
            rest_directions: table.iter().map(|r| r.1).collect(),
            bone_lengths: table.iter().map(|r| r.2).collect(),
            mirror: table.iter().map(|r| r.3).collect(),
            limits: table.iter().map(|r| r.4).collect(),
            neutral: table.iter().map(|r| r.5).collect(),
        }
    }
}

impl SkeletonSpec {
    pub fn joints(&self) -> usize {
        self.names.len()
    }

    pub fn root(&self) -> Option<usize> {
        self.parents.iter().position(Option::is_none)
    }

    /// Joints ordered so every parent precedes its children.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let root = self.root().ok_or_else(|| Error::Config("skeleton has no root".into()))?;
        let mut order = vec![root];
        let mut i = 0;
        while i < order.len() {
            let p = order[i];
            order.extend((0..self.joints()).filter(|&c| self.parents[c] == Some(p)));
            i += 1;
        }
        if order.len() != self.joints() {
            return Err(Error::Config("skeleton parent map is not a tree".into()));
        }
        Ok(order)
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joints();
        let lens = [self.parents.len(), self.rest_directions.len(), self.bone_lengths.len(), self.mirror.len(), self.limits.len(), self.neutral.len()];
        if lens.iter().any(|&l| l != j) {
            return Err(Error::Config("skeleton tables have inconsistent lengths".into()));
        }
        if self.parents.iter().filter(|p| p.is_none()).count() != 1 {
            return Err(Error::Config("skeleton needs exactly one root".into()));
        }
        self.topological_order()?;
        for i in 0..j {
            if self.parents[i].is_some() && !(self.bone_lengths[i] > 0.0) {
                return Err(Error::Config(format!("bone to `{}` has non-positive length", self.names[i])));
            }
            for dof in [Dof::Flex, Dof::Abd] {
                let [lo, hi] = self.limits[i].range(dof);
                let n = self.neutral[i][dof as usize];
                if !(lo <= n && n <= hi) {
                    return Err(Error::Config(format!("neutral angle of `{}` outside its limits", self.names[i])));
                }
            }
        }
        Ok(())
    }

    /// Joint positions for per-joint angles `[flex, abd]`.
    pub fn forward_kinematics(&self, angles: &[[f64; 2]]) -> Result<Pose> {
        let order = self.topological_order()?;
        let mut rot: Vec<Mat3> = vec![IDENTITY; self.joints()];
        let mut pos: Pose = vec![[0.0; 3]; self.joints()];
        for &j in &order {
            let Some(p) = self.parents[j] else { continue };
            let [flex, abd] = angles[j];
            let local = mat_mul(&rot_x(flex), &rot_z(self.mirror[j] * abd));
            rot[j] = mat_mul(&rot[p], &local);
            pos[j] = add(pos[p], scale(mat_vec(&rot[j], self.rest_directions[j]), self.bone_lengths[j]));
        }
        Ok(pos)
    }
}

/// The nine synthetic motion classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Game,
    Gesticulate,
    Greet,
    LowerStretch,
    Pat,
    React,
    Talk,
    UpperStretch,
    Walk,
}

impl Action {
    pub const ALL: [Action; 9] = [
        Action::Game,
        Action::Gesticulate,
        Action::Greet,
        Action::LowerStretch,
        Action::Pat,
        Action::React,
        Action::Talk,
        Action::UpperStretch,
        Action::Walk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Action::Game => "Game",
            Action::Gesticulate => "Gesticulate",
            Action::Greet => "Greet",
            Action::LowerStretch => "LowerStretch",
            Action::Pat => "Pat",
            Action::React => "React",
            Action::Talk => "Talk",
            Action::UpperStretch => "UpperStretch",
            Action::Walk => "Walk",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&a| a == self).unwrap()
    }

    pub fn profile(self) -> MotionProfile {
        MotionProfile::for_action(self)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownAction {
                name: s.to_string(),
                valid: Self::ALL.map(Action::name).join(", "),
            })
    }
}

/// One sinusoidal joint-angle oscillator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Drive {
    pub joint: usize,
    pub dof: Dof,
    /// Offset of the oscillation center from the neutral angle.
    pub center: f64,
    pub amplitude: f64,
    pub freq_hz: f64,
    /// Drives in the same group share a random phase and frequency scale.
    pub group: usize,
    pub phase_offset: f64,
}

/// Per-action set of oscillators; joints without a drive stay neutral.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionProfile {
    pub drives: Vec<Drive>,
}

const ARMS: usize = 0;
const LEGS: usize = 1;
const HEAD_GROUP: usize = 2;
const EXTRA: usize = 3;
const PI: f64 = std::f64::consts::PI;

impl MotionProfile {
    /// No motion at all.
    pub fn still() -> Self {
        Self { drives: Vec::new() }
    }

    pub fn for_action(action: Action) -> Self {
        let mut drives = Vec::new();
        let pair = |l: usize, r: usize, dof: Dof, center: f64, amplitude: f64, freq_hz: f64, group: usize, r_offset: f64| {
            [(l, 0.0), (r, r_offset)].map(|(joint, phase_offset)| Drive { joint, dof, center, amplitude, freq_hz, group, phase_offset })
        };
        use Dof::{Abd, Flex};
        match action {
            Action::Game => {
                drives.extend(pair(L_ELBOW, R_ELBOW, Flex, 0.9, 0.15, 0.6, ARMS, 0.3));
                drives.extend(pair(L_WRIST, R_WRIST, Flex, 1.0, 0.35, 1.0, ARMS, PI / 2.0));
                drives.extend(pair(L_KNEE, R_KNEE, Flex, 0.1, 0.2, 0.4, LEGS, PI));
                drives.extend(pair(L_ANKLE, R_ANKLE, Flex, -0.2, 0.25, 0.4, LEGS, PI));
            }
            Action::Gesticulate => {
                drives.extend(pair(L_ELBOW, R_ELBOW, Abd, 0.5, 0.5, 0.8, ARMS, PI / 3.0));
                drives.extend(pair(L_ELBOW, R_ELBOW, Flex, 0.5, 0.45, 0.6, EXTRA, PI / 2.0));
                drives.extend(pair(L_WRIST, R_WRIST, Flex, 0.6, 0.5, 1.0, ARMS, PI));
                drives.extend(pair(L_KNEE, R_KNEE, Flex, 0.15, 0.3, 0.5, LEGS, PI));
                drives.extend(pair(L_ANKLE, R_ANKLE, Flex, -0.3, 0.3, 0.5, LEGS, PI));
            }
            Action::Greet => {
                drives.push(Drive { joint: R_ELBOW, dof: Abd, center: 1.6, amplitude: 0.3, freq_hz: 1.2, group: ARMS, phase_offset: 0.0 });
                drives.push(Drive { joint: R_WRIST, dof: Flex, center: 1.0, amplitude: 0.5, freq_hz: 1.5, group: ARMS, phase_offset: 0.0 });
                drives.push(Drive { joint: L_ELBOW, dof: Flex, center: 0.2, amplitude: 0.2, freq_hz: 0.4, group: EXTRA, phase_offset: 0.0 });
                drives.extend(pair(L_KNEE, R_KNEE, Flex, 0.2, 0.35, 0.5, LEGS, PI));
                drives.extend(pair(L_ANKLE, R_ANKLE, Flex, -0.3, 0.3, 0.5, LEGS, PI));
            }
            Action::LowerStretch => {
                drives.push(Drive { joint: THORAX, dof: Flex, center: -0.3, amplitude: 0.2, freq_hz: 0.25, group: HEAD_GROUP, phase_offset: 0.0 });
                drives.extend(pair(L_KNEE, R_KNEE, Flex, 0.6, 0.6, 0.35, LEGS, PI / 2.0));
                drives.extend(pair(L_ANKLE, R_ANKLE, Flex, -0.7, 0.6, 0.35, LEGS, PI / 2.0));
                drives.extend(pair(L_KNEE, R_KNEE, Abd, 0.15, 0.2, 0.3, EXTRA, PI));
                drives.extend(pair(L_ELBOW, R_ELBOW, Flex, 0.4, 0.3, 0.3, ARMS, 0.0));
            }
            Action::Pat => {
                drives.extend(pair(L_ELBOW, R_ELBOW, Flex, 0.6, 0.3, 1.2, ARMS, PI));
                drives.extend(pair(L_WRIST, R_WRIST, Flex, 0.9, 0.4, 1.2, ARMS, PI));
                drives.extend(pair(L_KNEE, R_KNEE, Flex, 0.3, 0.4, 0.6, LEGS, PI));
                drives.extend(pair(L_ANKLE, R_ANKLE, Flex, -0.4, 0.4, 0.6, LEGS, PI));
            }
            Action::React => {
                drives.extend(pair(L_ELBOW, R_ELBOW, Flex, 0.6, 0.6, 1.4, ARMS, 0.4));
                drives.extend(pair(L_ELBOW, R_ELBOW, Abd, 0.3, 0.3, 1.1, EXTRA, PI / 2.0));
                drives.push(Drive { joint: HEAD, dof: Abd, center: 0.0, amplitude: 0.25, freq_hz: 1.0, group: HEAD_GROUP, phase_offset: 0.0 });
                drives.extend(pair(L_KNEE, R_KNEE, Flex, 0.35, 0.45, 1.2, LEGS, PI / 2.0));
                drives.extend(pair(L_ANKLE, R_ANKLE, Flex, -0.5, 0.45, 1.2, LEGS, PI / 2.0));
            }
            Action::Talk => {
                drives.push(Drive { joint: HEAD, dof: Flex, center: 0.0, amplitude: 0.15, freq_hz: 0.8, group: HEAD_GROUP, phase_offset: 0.0 });
                drives.extend(pair(L_ELBOW, R_ELBOW, Flex, 0.4, 0.25, 0.7, ARMS, PI / 2.0));
                drives.extend(pair(L_WRIST, R_WRIST, Flex, 0.8, 0.4, 0.9, ARMS, PI / 2.0));
                drives.extend(pair(L_KNEE, R_KNEE, Flex, 0.15, 0.25, 0.3, LEGS, PI));
                drives.extend(pair(L_ANKLE, R_ANKLE, Flex, -0.2, 0.2, 0.3, LEGS, PI));
            }
            Action::UpperStretch => {
                drives.extend(pair(L_ELBOW, R_ELBOW, Flex, 1.5, 1.1, 0.25, ARMS, 0.0));
                drives.extend(pair(L_ELBOW, R_ELBOW, Abd, 0.3, 0.3, 0.2, EXTRA, 0.0));
                drives.push(Drive { joint: THORAX, dof: Flex, center: 0.0, amplitude: 0.15, freq_hz: 0.25, group: HEAD_GROUP, phase_offset: 0.0 });
                drives.extend(pair(L_KNEE, R_KNEE, Flex, 0.2, 0.35, 0.4, LEGS, PI));
                drives.extend(pair(L_ANKLE, R_ANKLE, Flex, -0.3, 0.3, 0.4, LEGS, PI));
            }
            Action::Walk => {
                drives.extend(pair(L_KNEE, R_KNEE, Flex, 0.25, 0.55, 0.9, LEGS, PI));
                drives.extend(pair(L_ANKLE, R_ANKLE, Flex, -0.5, 0.5, 0.9, LEGS, PI));
                // arms swing against the legs
                drives.extend(pair(L_ELBOW, R_ELBOW, Flex, 0.0, 0.35, 0.9, LEGS, 0.0));
                let last = drives.len() - 2;
                drives[last].phase_offset = PI;
                drives[last + 1].phase_offset = 0.0;
                drives.push(Drive { joint: THORAX, dof: Abd, center: 0.0, amplitude: 0.05, freq_hz: 0.9, group: LEGS, phase_offset: 0.0 });
            }
        }
        Self { drives }
    }

    pub fn validate(&self, spec: &SkeletonSpec) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for d in &self.drives {
            if d.joint >= spec.joints() || spec.parents[d.joint].is_none() {
                return Err(Error::Config(format!("drive on invalid joint {}", d.joint)));
            }
            if !seen.insert((d.joint, d.dof as usize)) {
                return Err(Error::Config(format!("two drives on joint {} {:?}", d.joint, d.dof)));
            }
            if d.amplitude < 0.0 || d.freq_hz < 0.0 {
                return Err(Error::Config("drive amplitude and frequency must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

/// Per-joint `[flex, abd]` angles for `frames` steps `dt` seconds apart.
/// Every random draw happens up front, so the result depends only on
/// (profile, frames, dt, seed).
pub fn sample_angles(spec: &SkeletonSpec, profile: &MotionProfile, frames: usize, dt: f64, seed: u64) -> Result<Vec<Vec<[f64; 2]>>> {
    if frames == 0 {
        return Err(Error::InvalidArgument("at least one frame is required".into()));
    }
    spec.validate()?;
    profile.validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = profile.drives.iter().map(|d| d.group + 1).max().unwrap_or(0);
    let group_phase: Vec<f64> = (0..groups).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let group_freq: Vec<f64> = (0..groups).map(|_| rng.gen_range(0.8..1.25)).collect();

    struct Osc {
        joint: usize,
        dof: usize,
        center: f64,
        amplitude: f64,
        omega: f64,
        phase: f64,
    }
    let oscillators: Vec<Osc> = profile
        .drives
        .iter()
        .map(|d| {
            let [lo, hi] = spec.limits[d.joint].range(d.dof);
            let jitter = rng.gen_range(-0.05..0.05);
            let amp_scale = rng.gen_range(0.75..1.0);
            let center = (spec.neutral[d.joint][d.dof as usize] + d.center + jitter).clamp(lo, hi);
            let amplitude = (d.amplitude * amp_scale).min(hi - center).min(center - lo).max(0.0);
            Osc {
                joint: d.joint,
                dof: d.dof as usize,
                center,
                amplitude,
                omega: 2.0 * PI * d.freq_hz * group_freq[d.group],
                phase: group_phase[d.group] + d.phase_offset,
            }
        })
        .collect();

    Ok((0..frames)
        .map(|f| {
            let t = f as f64 * dt;
            let mut angles = spec.neutral.clone();
            for o in &oscillators {
                angles[o.joint][o.dof] = o.center + o.amplitude * (o.omega * t + o.phase).sin();
            }
            angles
        })
        .collect())
}

/// Joint trajectories in the body frame, `frames` poses of `J` joints.
pub fn sample_motion(spec: &SkeletonSpec, profile: &MotionProfile, frames: usize, dt: f64, seed: u64) -> Result<Vec<Pose>> {
    sample_angles(spec, profile, frames, dt, seed)?
        .iter()
        .map(|a| spec.forward_kinematics(a))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::geometry::{norm, sub};

    #[test]
    fn default_skeleton_is_a_tree_rooted_at_pelvis() {
        let spec = SkeletonSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.root(), Some(PELVIS));
        assert_eq!(spec.joints(), 16);
        let order = spec.topological_order().unwrap();
        for (i, &j) in order.iter().enumerate() {
            if let Some(p) = spec.parents[j] {
                assert!(order[..i].contains(&p));
            }
        }
        let mut all: Vec<usize> = UPPER_BODY.iter().chain(&LOWER_BODY).copied().collect();
        all.sort();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn rest_pose_is_upright() {
        let spec = SkeletonSpec::default();
        let pose = spec.forward_kinematics(&vec![[0.0; 2]; 16]).unwrap();
        assert_eq!(pose[PELVIS], [0.0, 0.0, 0.0]);
        assert_eq!(pose[HEAD], [0.0, -650.0, 0.0]);
        assert_eq!(pose[L_ANKLE], [-100.0, 840.0, 0.0]);
        assert_eq!(pose[R_WRIST], [170.0, 40.0, 0.0]);
    }

    #[test]
    fn positive_flexion_swings_a_leg_forward() {
        let spec = SkeletonSpec::default();
        let mut angles = vec![[0.0; 2]; 16];
        angles[L_KNEE][0] = 0.5;
        let pose = spec.forward_kinematics(&angles).unwrap();
        assert!(pose[L_KNEE][2] > 0.0 && pose[L_ANKLE][2] > pose[L_KNEE][2]);
        angles[L_KNEE] = [0.0, 0.3];
        angles[R_KNEE] = [0.0, 0.3];
        let pose = spec.forward_kinematics(&angles).unwrap();
        assert!(pose[L_KNEE][0] < -100.0 && pose[R_KNEE][0] > 100.0);
    }

    #[test]
    fn still_profile_repeats_the_pose() {
        let spec = SkeletonSpec::default();
        let poses = sample_motion(&spec, &MotionProfile::still(), 5, 0.1, 3).unwrap();
        assert!(poses.iter().all(|p| p == &poses[0]));
    }

    #[test]
    fn motion_is_deterministic_and_within_limits() {
        let spec = SkeletonSpec::default();
        for action in Action::ALL {
            let profile = action.profile();
            let a = sample_angles(&spec, &profile, 40, 0.15, 9).unwrap();
            assert_eq!(a, sample_angles(&spec, &profile, 40, 0.15, 9).unwrap());
            assert_ne!(a, sample_angles(&spec, &profile, 40, 0.15, 10).unwrap());
            for frame in &a {
                for (j, ang) in frame.iter().enumerate() {
                    for dof in [Dof::Flex, Dof::Abd] {
                        let [lo, hi] = spec.limits[j].range(dof);
                        let v = ang[dof as usize];
                        assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{action} joint {j}: {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn bone_lengths_are_preserved() {
        let spec = SkeletonSpec::default();
        for action in Action::ALL {
            for pose in sample_motion(&spec, &action.profile(), 20, 0.15, 4).unwrap() {
                for j in 0..16 {
                    if let Some(p) = spec.parents[j] {
                        let len = norm(sub(pose[j], pose[p]));
                        assert!((len - spec.bone_lengths[j]).abs() <= 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn action_names_round_trip() {
        for a in Action::ALL {
            assert_eq!(a.name().parse::<Action>().unwrap(), a);
            assert_eq!(Action::ALL[a.index()], a);
        }
        assert!(matches!("Dance".parse::<Action>(), Err(Error::UnknownAction { .. })));
    }

    #[test]
    fn invalid_profiles_and_trees_are_rejected() {
        let spec = SkeletonSpec::default();
        let mut p = Action::Walk.profile();
        p.drives.push(p.drives[0].clone());
        assert!(p.validate(&spec).is_err());
        let mut bad = spec.clone();
        bad.parents[PELVIS] = Some(HEAD);
        assert!(bad.validate().is_err());
        assert!(sample_motion(&spec, &MotionProfile::still(), 0, 0.1, 0).is_err());
    }
}
