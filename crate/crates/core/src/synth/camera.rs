use serde::{Deserialize, Serialize};

use super::geometry::{add, cross, dot, norm, normalize, scale, sub, Vec3};
use super::skeleton::{Pose, HEAD, L_SHOULDER, NECK, PELVIS, R_SHOULDER};
use crate::error::{Error, Result};

/// Equidistant fisheye (`r = f·θ`) mounted on the head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisheyeCamera {
    /// Pixels per radian.
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Largest accepted angle from the optical axis, radians.
    pub theta_max: f64,
    /// Camera center relative to the head joint in the head frame
    /// `[right, down, forward]`, millimetres.
    pub mount_offset: Vec3,
    /// Tilt of the optical axis from head-down toward the body, radians.
    pub mount_tilt: f64,
}

impl Default for FisheyeCamera {
    fn default() -> Self {
        Self::for_image(32, 32)
    }
}

impl FisheyeCamera {
    /// Default rig scaled to an image of `height × width` pixels.
    pub fn for_image(height: usize, width: usize) -> Self {
        let half = height.min(width) as f64 / 2.0;
        Self {
            // 55° off-axis reaches the image border
            focal: half / 55f64.to_radians(),
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            theta_max: 100f64.to_radians(),
            mount_offset: [0.0, -100.0, 200.0],
            mount_tilt: 15f64.to_radians(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.theta_max > 0.0 && self.theta_max <= std::f64::consts::PI) || self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera needs positive focal length, image size and theta_max in (0, π]".into()));
        }
        Ok(())
    }

    /// Pixel coordinates of a camera-frame point. Pixel `(i, j)` covers
    /// `[j, j+1) × [i, i+1)` in `(u, v)`.
    pub fn project(&self, p: Vec3) -> Result<Projection> {
        let n = norm(p);
        if !(n > 0.0) {
            return Err(Error::InvalidArgument("cannot project the camera center".into()));
        }
        let theta = p[0].hypot(p[1]).atan2(p[2]);
        let phi = p[1].atan2(p[0]);
        let r = self.focal * theta;
        let u = self.cx + r * phi.cos();
        let v = self.cy + r * phi.sin();
        let inside = u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64;
        Ok(Projection { u, v, theta, valid: inside && theta <= self.theta_max })
    }

    /// Unit viewing direction of pixel coordinates `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64) -> Vec3 {
        let (du, dv) = (u - self.cx, v - self.cy);
        let r = (du * du + dv * dv).sqrt();
        let theta = r / self.focal;
        if r == 0.0 {
            return [0.0, 0.0, 1.0];
        }
        let s = theta.sin();
        [s * du / r, s * dv / r, theta.cos()]
    }

    /// Camera placement for a body-frame pose, derived from the head, neck
    /// and shoulder positions.
    pub fn pose_for(&self, body: &Pose) -> CameraPose {
        let down = normalize(sub(body[NECK], body[HEAD]));
        let across = sub(body[R_SHOULDER], body[L_SHOULDER]);
        let right = normalize(sub(across, scale(down, dot(across, down))));
        let forward = cross(right, down);
        let [o_r, o_d, o_f] = self.mount_offset;
        let center = add(body[HEAD], add(scale(right, o_r), add(scale(down, o_d), scale(forward, o_f))));
        let (s, c) = self.mount_tilt.sin_cos();
        let z = sub(scale(down, c), scale(forward, s));
        let x = right;
        let y = cross(z, x);
        CameraPose { center, axes: [x, y, z] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub theta: f64,
    /// Inside the image and within `theta_max`.
    pub valid: bool,
}

/// Rigid camera placement in the body frame. Camera axes: x right, y down
/// in the image, z along the optical axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub center: Vec3,
    pub axes: [Vec3; 3],
}

impl CameraPose {
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let d = sub(p, self.center);
        [dot(self.axes[0], d), dot(self.axes[1], d), dot(self.axes[2], d)]
    }

    pub fn pose_to_camera(&self, body: &Pose) -> Pose {
        body.iter().map(|&p| self.to_camera(p)).collect()
    }
}

/// Capsule around the neck–pelvis segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TorsoCapsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

impl TorsoCapsule {
    pub fn from_pose(pose: &Pose, radius: f64) -> Self {
        Self { a: pose[NECK], b: pose[PELVIS], radius }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        super::geometry::point_segment_distance(p, self.a, self.b) <= self.radius
    }

    /// Smallest `t` in `[0, 1]` at which `origin + t·(target − origin)` is
    /// inside the capsule.
    pub fn first_hit(&self, origin: Vec3, target: Vec3) -> Option<f64> {
        if self.radius <= 0.0 {
            return None;
        }
        let d = sub(target, origin);
        let mut best: Option<f64> = None;
        let mut keep = |t: f64| {
            if (0.0..=1.0).contains(&t) && best.map_or(true, |b| t < b) {
                best = Some(t);
            }
        };
        if self.contains(origin) {
            keep(0.0);
        }
        for c in [self.a, self.b] {
            for t in sphere_hits(origin, d, c, self.radius) {
                keep(t);
            }
        }
        for t in cylinder_hits(origin, d, self.a, self.b, self.radius) {
            keep(t);
        }
        best
    }
}

fn sphere_hits(o: Vec3, d: Vec3, c: Vec3, r: f64) -> Vec<f64> {
    let oc = sub(o, c);
    let a = dot(d, d);
    let b = 2.0 * dot(oc, d);
    let cc = dot(oc, oc) - r * r;
    quadratic_roots(a, b, cc)
}

/// Entry points on the finite side wall of the cylinder `a`–`b`.
fn cylinder_hits(o: Vec3, d: Vec3, a: Vec3, b: Vec3, r: f64) -> Vec<f64> {
    let axis = sub(b, a);
    let len2 = dot(axis, axis);
    if len2 == 0.0 {
        return Vec::new();
    }
    let perp = |v: Vec3| sub(v, scale(axis, dot(v, axis) / len2));
    let (dp, op) = (perp(d), perp(sub(o, a)));
    quadratic_roots(dot(dp, dp), 2.0 * dot(op, dp), dot(op, op) - r * r)
        .into_iter()
        .filter(|&t| {
            let s = dot(sub(add(o, scale(d, t)), a), axis) / len2;
            (0.0..=1.0).contains(&s)
        })
        .collect()
}

fn quadratic_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    if a == 0.0 {
        return Vec::new();
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Vec::new();
    }
    let s = disc.sqrt();
    vec![(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)]
}

/// Relative ray parameter below which a capsule hit counts as "before" the
/// joint.
const BEFORE_JOINT: f64 = 1.0 - 1e-9;

/// Whether the segment from `camera` to `p` enters `torso` strictly before
/// reaching `p`. Points inside the capsule belong to the torso itself and
/// are never hidden by it.
pub fn is_occluded(camera: Vec3, p: Vec3, torso: &TorsoCapsule) -> bool {
    if torso.radius <= 0.0 || torso.contains(p) {
        return false;
    }
    torso.first_hit(camera, p).is_some_and(|t| t < BEFORE_JOINT)
}

/// Per-joint self-occlusion by the torso, for a body-frame pose.
pub fn occlusion_flags(pose: &Pose, cam: &FisheyeCamera, torso_radius: f64) -> Vec<bool> {
    let center = cam.pose_for(pose).center;
    let torso = TorsoCapsule::from_pose(pose, torso_radius);
    pose.iter().map(|&p| is_occluded(center, p, &torso)).collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::synth::geometry::point_segment_distance;
    use crate::synth::skeleton::{SkeletonSpec, L_ANKLE, L_WRIST};

    fn angle_between(a: Vec3, b: Vec3) -> f64 {
        // atan2 form stays accurate for nearly parallel vectors
        norm(cross(a, b)).atan2(dot(a, b))
    }

    #[test]
    fn axis_and_right_angle_examples() {
        let cam = FisheyeCamera { focal: 10.0, cx: 50.0, cy: 40.0, width: 100, height: 80, ..FisheyeCamera::default() };
        let p = cam.project([0.0, 0.0, 5.0]).unwrap();
        assert_eq!((p.u, p.v), (50.0, 40.0));
        let p = cam.project([3.0, 0.0, 0.0]).unwrap();
        assert!((p.u - (50.0 + 10.0 * std::f64::consts::FRAC_PI_2)).abs() < 1e-12);
        assert!((p.v - 40.0).abs() < 1e-12);
        assert!(p.valid);
        assert!(!cam.project([0.0, 0.0, -1.0]).unwrap().valid);
        assert!(cam.project([0.0; 3]).is_err());
    }

    #[test]
    fn unproject_inverts_project() {
        let cam = FisheyeCamera::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.2..1.0)];
            let q = cam.project(p).unwrap();
            assert!(angle_between(cam.unproject(q.u, q.v), p) <= 1e-9);
        }
    }

    #[test]
    fn off_axis_displacements_are_compressed() {
        let cam = FisheyeCamera::default();
        let shift = |x: f64| {
            let a = cam.project([x, 0.0, 1000.0]).unwrap();
            let b = cam.project([x + 10.0, 0.0, 1000.0]).unwrap();
            b.u - a.u
        };
        assert!(shift(1500.0) < shift(0.0));
        assert!(shift(0.0) > 0.0 && shift(1500.0) > 0.0);
    }

    #[test]
    fn camera_frame_is_orthonormal_and_looks_at_the_body() {
        let spec = SkeletonSpec::default();
        let pose = spec.forward_kinematics(&vec![[0.0; 2]; 16]).unwrap();
        let cam = FisheyeCamera::default();
        let cp = cam.pose_for(&pose);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(cp.axes[i], cp.axes[j]) - want).abs() < 1e-12);
            }
        }
        assert!((dot(cross(cp.axes[0], cp.axes[1]), cp.axes[2]) - 1.0).abs() < 1e-12);
        let pelvis = cp.to_camera(pose[PELVIS]);
        assert!(pelvis[2] > 0.0);
        assert!(cam.project(pelvis).unwrap().valid);
    }

    /// Brute-force oracle: march along the ray and test distance to the
    /// capsule axis.
    fn marched(camera: Vec3, p: Vec3, torso: &TorsoCapsule) -> bool {
        if torso.contains(p) {
            return false;
        }
        let steps = 20_000;
        (0..steps).any(|i| {
            let t = i as f64 / steps as f64;
            point_segment_distance(add(camera, scale(sub(p, camera), t)), torso.a, torso.b) < torso.radius
        })
    }

    #[test]
    fn occlusion_matches_ray_marching() {
        let torso = TorsoCapsule { a: [0.0, -400.0, 0.0], b: [0.0, 0.0, 0.0], radius: 120.0 };
        let camera = [0.0, -750.0, 200.0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut hidden = 0;
        for _ in 0..400 {
            let p = [rng.gen_range(-400.0..400.0), rng.gen_range(-300.0..900.0), rng.gen_range(-300.0..400.0)];
            let fast = is_occluded(camera, p, &torso);
            let slow = marched(camera, p, &torso);
            // skip grazing rays where the marching resolution decides
            let graze = (0..=200).map(|i| i as f64 / 200.0).map(|t| point_segment_distance(add(camera, scale(sub(p, camera), t)), torso.a, torso.b)).fold(f64::INFINITY, f64::min);
            if (graze - torso.radius).abs() > 1.0 {
                assert_eq!(fast, slow, "{p:?}");
            }
            hidden += fast as usize;
        }
        assert!(hidden > 20 && hidden < 380);
    }

    #[test]
    fn occlusion_examples() {
        let torso = TorsoCapsule { a: [0.0, -400.0, 0.0], b: [0.0, 0.0, 0.0], radius: 120.0 };
        let camera = [0.0, -750.0, 200.0];
        // directly below the torso, in its shadow
        assert!(is_occluded(camera, [0.0, 600.0, -50.0], &torso));
        // wrist held far out to the side
        assert!(!is_occluded(camera, [600.0, -200.0, 0.0], &torso));
        let zero = TorsoCapsule { radius: 0.0, ..torso };
        assert!(!is_occluded(camera, [0.0, 600.0, -50.0], &zero));
    }

    #[test]
    fn default_rig_hides_the_feet_at_rest() {
        let spec = SkeletonSpec::default();
        let pose = spec.forward_kinematics(&spec.neutral).unwrap();
        let flags = occlusion_flags(&pose, &FisheyeCamera::default(), 130.0);
        assert!(flags[L_ANKLE]);
        assert!(!flags[L_WRIST]);
        assert!(!flags[NECK] && !flags[PELVIS]);
        assert!(occlusion_flags(&pose, &FisheyeCamera::default(), 0.0).iter().all(|f| !f));
    }
}
