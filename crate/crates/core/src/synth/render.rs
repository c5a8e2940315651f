use super::camera::{is_occluded, FisheyeCamera, TorsoCapsule};
use super::geometry::{add, norm, scale, sub, Vec3};
use super::skeleton::{Pose, NECK, PELVIS, THORAX};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const TORSO_GRAY: f64 = 0.35;
const LIMB_HALF_WIDTH: f64 = 0.6;
const MARKER_RADIUS: f64 = 1.0;
const PIECES: usize = 12;
/// Per-channel multipliers when rendering color frames.
const TINT: [f64; 3] = [1.0, 0.85, 0.7];

/// Gray level of the bone ending at each joint; left limbs are brighter
/// than right ones so the sides are distinguishable.
fn bone_gray(joint: usize) -> f64 {
    const GRAY: [f64; 16] = [1.0, 0.5, 0.55, 0.5, 0.95, 0.75, 0.9, 0.7, 0.35, 0.35, 0.5, 0.45, 0.85, 0.65, 0.8, 0.6];
    GRAY[joint]
}

struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Canvas {
    fn new(height: usize, width: usize) -> Self {
        Self { width, height, pixels: vec![0.0; width * height] }
    }

    /// Paints an anti-aliased capsule-shaped stroke between two pixel
    /// positions.
    fn stroke(&mut self, a: [f64; 2], b: [f64; 2], half_width: f64, gray: f64) {
        let reach = half_width + 1.0;
        let x0 = (a[0].min(b[0]) - reach).floor().max(0.0) as usize;
        let y0 = (a[1].min(b[1]) - reach).floor().max(0.0) as usize;
        let x1 = ((a[0].max(b[0]) + reach).ceil().max(0.0) as usize).min(self.width);
        let y1 = ((a[1].max(b[1]) + reach).ceil().max(0.0) as usize).min(self.height);
        for y in y0..y1 {
            for x in x0..x1 {
                let q = [x as f64 + 0.5, y as f64 + 0.5];
                let cover = (half_width + 0.5 - distance_to_segment_2d(q, a, b)).clamp(0.0, 1.0);
                if cover > 0.0 {
                    let px = &mut self.pixels[y * self.width + x];
                    *px = *px * (1.0 - cover) + gray * cover;
                }
            }
        }
    }
}

fn distance_to_segment_2d(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

/// Pixel position of a camera-frame point if it lies within the fisheye's
/// field of view (it may fall outside the image).
fn screen(cam: &FisheyeCamera, p: Vec3) -> Option<[f64; 2]> {
    let q = cam.project(p).ok()?;
    (q.theta <= cam.theta_max).then_some([q.u, q.v])
}

/// Renders a body-frame pose as seen by the head-mounted camera:
/// `[channels, H, W]` with intensities in `[0, 1]` and background 0.
pub fn render_frame(pose: &Pose, cam: &FisheyeCamera, torso_radius: f64, channels: usize, parents: &[Option<usize>]) -> Result<Tensor> {
    if channels == 0 || channels > TINT.len() {
        return Err(Error::InvalidArgument(format!("{channels} channels (supported: 1 to 3)")));
    }
    let cp = cam.pose_for(pose);
    let torso = TorsoCapsule::from_pose(pose, torso_radius);
    let mut canvas = Canvas::new(cam.height, cam.width);

    if torso_radius > 0.0 {
        let (a, b) = (pose[NECK], pose[PELVIS]);
        for i in 0..PIECES {
            let p0 = cp.to_camera(add(a, scale(sub(b, a), i as f64 / PIECES as f64)));
            let p1 = cp.to_camera(add(a, scale(sub(b, a), (i + 1) as f64 / PIECES as f64)));
            if let (Some(s0), Some(s1)) = (screen(cam, p0), screen(cam, p1)) {
                let dist = norm(p0).max(torso_radius * 1.01);
                let half = (cam.focal * (torso_radius / dist).asin()).min(cam.width.max(cam.height) as f64);
                canvas.stroke(s0, s1, half, TORSO_GRAY);
            }
        }
    }

    for (j, parent) in parents.iter().enumerate() {
        let Some(p) = *parent else { continue };
        // the spine bones are drawn as the torso
        if j == NECK || j == THORAX {
            continue;
        }
        let (a, b) = (pose[p], pose[j]);
        let point = |t: f64| add(a, scale(sub(b, a), t));
        for i in 0..PIECES {
            let mid = point((i as f64 + 0.5) / PIECES as f64);
            if is_occluded(cp.center, mid, &torso) {
                continue;
            }
            let p0 = cp.to_camera(point(i as f64 / PIECES as f64));
            let p1 = cp.to_camera(point((i + 1) as f64 / PIECES as f64));
            if let (Some(s0), Some(s1)) = (screen(cam, p0), screen(cam, p1)) {
                canvas.stroke(s0, s1, LIMB_HALF_WIDTH, bone_gray(j));
            }
        }
    }

    for (j, &p) in pose.iter().enumerate() {
        if is_occluded(cp.center, p, &torso) {
            continue;
        }
        let q = cam.project(cp.to_camera(p))?;
        if q.valid {
            canvas.stroke([q.u, q.v], [q.u, q.v], MARKER_RADIUS, bone_gray(j).max(0.5));
        }
    }

    let plane = cam.width * cam.height;
    Ok(Tensor::from_fn(&[channels, cam.height, cam.width], |i| {
        let c = i / plane;
        let tint = if channels == 1 { 1.0 } else { TINT[c] };
        (canvas.pixels[i % plane] * tint).clamp(0.0, 1.0)
    }))
}

/// Gaussian heatmaps `[h, w, J]` of a camera-frame pose. Each channel is
/// scaled to a peak of 1; joints that do not project into the image get an
/// all-zero channel. Occluded joints are rendered like visible ones.
pub fn render_gt_heatmap(pose_cam: &Pose, cam: &FisheyeCamera, heatmap_size: [usize; 2], sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("heatmap sigma must be positive, got {sigma}")));
    }
    let [h, w] = heatmap_size;
    let j = pose_cam.len();
    let mut out = Tensor::zeros(&[h, w, j]);
    let (sx, sy) = (w as f64 / cam.width as f64, h as f64 / cam.height as f64);
    for (k, &p) in pose_cam.iter().enumerate() {
        let q = cam.project(p)?;
        if !q.valid {
            continue;
        }
        let (u, v) = (q.u * sx, q.v * sy);
        let mut channel = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let (du, dv) = (c as f64 + 0.5 - u, r as f64 + 0.5 - v);
                channel[r * w + c] = (-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp();
            }
        }
        let peak = channel.iter().cloned().fold(0.0, f64::max);
        let values = out.values_mut();
        for (cell, value) in channel.into_iter().enumerate() {
            values[cell * j + k] = value / peak;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::synth::skeleton::{sample_motion, Action, SkeletonSpec};

    #[test]
    fn heatmap_peak_is_one_at_grid_alignment() {
        // principal point (17, 17) maps to the center of heatmap cell (8, 8)
        let cam = FisheyeCamera { cx: 17.0, cy: 17.0, ..FisheyeCamera::default() };
        let hm = render_gt_heatmap(&vec![[0.0, 0.0, 100.0]], &cam, [16, 16], 1.0).unwrap();
        let v = hm.values();
        assert_eq!(v[8 * 16 + 8], 1.0);
        assert!((v[8 * 16 + 9] - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn invalid_projection_gives_zero_channel() {
        let cam = FisheyeCamera::default();
        let hm = render_gt_heatmap(&vec![[0.0, 0.0, -100.0], [0.0, 0.0, 100.0]], &cam, [16, 16], 1.0).unwrap();
        assert!(hm.values().iter().step_by(2).all(|&x| x == 0.0));
        assert!(hm.values().iter().skip(1).step_by(2).cloned().fold(0.0, f64::max) == 1.0);
        assert!(render_gt_heatmap(&vec![[0.0, 0.0, 1.0]], &cam, [16, 16], 0.0).is_err());
    }

    #[test]
    fn joints_behind_the_camera_render_nothing() {
        let spec = SkeletonSpec::default();
        let pose = spec.forward_kinematics(&spec.neutral).unwrap();
        // flip the camera to look up and away from the body
        let cam = FisheyeCamera { mount_tilt: std::f64::consts::PI, theta_max: 0.5, ..FisheyeCamera::default() };
        let frame = render_frame(&pose, &cam, 130.0, 1, &spec.parents).unwrap();
        assert!(frame.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn visible_joints_land_on_drawn_pixels() {
        let spec = SkeletonSpec::default();
        let cam = FisheyeCamera::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut checked = 0;
        for i in 0..50 {
            let action = Action::ALL[i % 9];
            let seed = rand::Rng::gen(&mut rng);
            let pose = sample_motion(&spec, &action.profile(), 1, 0.1, seed).unwrap().remove(0);
            let frame = render_frame(&pose, &cam, 130.0, 1, &spec.parents).unwrap();
            assert_eq!(frame, render_frame(&pose, &cam, 130.0, 1, &spec.parents).unwrap());
            assert!(frame.values().iter().all(|&x| (0.0..=1.0).contains(&x)));
            let cp = cam.pose_for(&pose);
            let flags = crate::synth::camera::occlusion_flags(&pose, &cam, 130.0);
            for (j, &p) in pose.iter().enumerate() {
                let q = cam.project(cp.to_camera(p)).unwrap();
                if q.valid && !flags[j] {
                    let px = q.v.floor() as usize * 32 + q.u.floor() as usize;
                    assert!(frame.values()[px] > 0.0, "pose {i} joint {j}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 300);
    }

    #[test]
    fn color_frames_repeat_the_gray_image() {
        let spec = SkeletonSpec::default();
        let pose = spec.forward_kinematics(&spec.neutral).unwrap();
        let cam = FisheyeCamera::default();
        let gray = render_frame(&pose, &cam, 130.0, 1, &spec.parents).unwrap();
        let color = render_frame(&pose, &cam, 130.0, 3, &spec.parents).unwrap();
        assert_eq!(&color.values()[..1024], gray.values());
        assert!(render_frame(&pose, &cam, 130.0, 4, &spec.parents).is_err());
    }
}
