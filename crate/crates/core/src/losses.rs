//! Training losses and pose error metrics.
//!
//! Tape versions drive training; the plain `f64` versions evaluate detached
//! tensors and are what the CSV logs report.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Joint vectors shorter than this are excluded from the cosine term.
pub const NORM_EPS: f64 = 1e-9;

/// Weights of the cosine and L1 pose terms; the heatmap and squared pose
/// terms have unit weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub theta: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { theta: -0.01, l1: 0.1 }
    }
}

/// Scalar loss values for one sample or a batch mean.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l2d: f64,
    pub l_l2: f64,
    pub l_theta: f64,
    pub l_l1: f64,
    pub total: f64,
    /// Joints whose cosine term was skipped for a near-zero vector.
    #[serde(skip)]
    pub degenerate_joints: Vec<usize>,
}

impl LossBreakdown {
    pub fn recompute_total(&mut self, w: LossWeights) {
        self.total = self.l2d + self.l_l2 + w.theta * self.l_theta + w.l1 * self.l_l1;
    }

    /// Element-wise mean, flags concatenated.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.l2d += b.l2d;
            out.l_l2 += b.l_l2;
            out.l_theta += b.l_theta;
            out.l_l1 += b.l_l1;
            out.total += b.total;
            out.degenerate_joints.extend_from_slice(&b.degenerate_joints);
        }
        out.l2d /= n;
        out.l_l2 /= n;
        out.l_theta /= n;
        out.l_l1 /= n;
        out.total /= n;
        out
    }
}

/// One loss-log CSV row: `step,l2d,l_l2,l_theta,l_l1,total`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub l2d: f64,
    pub l_l2: f64,
    pub l_theta: f64,
    pub l_l1: f64,
    pub total: f64,
}

impl LossRow {
    pub fn new(step: usize, b: &LossBreakdown) -> Self {
        Self { step, l2d: b.l2d, l_l2: b.l_l2, l_theta: b.l_theta, l_l1: b.l_l1, total: b.total }
    }

    /// `total` recomposed from the logged parts.
    pub fn recomposed_total(&self, w: LossWeights) -> f64 {
        self.l2d + self.l_l2 + w.theta * self.l_theta + w.l1 * self.l_l1
    }
}

pub fn write_loss_csv(path: impl AsRef<std::path::Path>, rows: &[LossRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: impl AsRef<std::path::Path>) -> Result<Vec<LossRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Tape handles of the pose terms.
#[derive(Clone, Debug)]
pub struct PoseLossVars {
    pub l_l2: Var,
    pub l_theta: Var,
    pub l_l1: Var,
    pub degenerate_joints: Vec<usize>,
}

fn check_same(context: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape { context: context.into(), expected: a.to_vec(), found: b.to_vec() });
    }
    Ok(())
}

fn check_pose(context: &str, shape: &[usize]) -> Result<usize> {
    match shape {
        &[j, 3] if j > 0 => Ok(j),
        _ => Err(Error::Shape { context: context.into(), expected: vec![0, 3], found: shape.to_vec() }),
    }
}

/// Mean squared error between predicted and target heatmaps.
pub fn heatmap_loss_on(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    check_same("heatmap loss", target.shape(), tape.shape(pred))?;
    let t = tape.constant(target);
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq)?)
}

/// Squared, cosine and L1 pose terms of `pred` `[J, 3]` against `target`.
pub fn pose_loss_on(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<PoseLossVars> {
    let j = check_pose("pose loss", tape.shape(pred))?;
    check_same("pose loss", target.shape(), tape.shape(pred))?;
    let t = tape.constant(target);
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    let l_l2 = tape.sum_all(sq)?;
    let pos = tape.relu(diff)?;
    let neg = tape.neg(diff)?;
    let neg = tape.relu(neg)?;
    let abs = tape.add(pos, neg)?;
    let l_l1 = tape.sum_all(abs)?;

    let pv = tape.value(pred).to_vec();
    let tv = target.values();
    let norm = |v: &[f64], i: usize| v[3 * i..3 * i + 3].iter().map(|x| x * x).sum::<f64>().sqrt();
    let degenerate: Vec<usize> = (0..j).filter(|&i| norm(&pv, i) < NORM_EPS || norm(tv, i) < NORM_EPS).collect();
    let keep = |i: usize| !degenerate.contains(&i);

    // degenerate rows are swapped for a fixed unit vector and masked out
    let mask = Tensor::from_fn(&[j, 3], |k| if keep(k / 3) { 1.0 } else { 0.0 });
    let filler = Tensor::from_fn(&[j, 3], |k| if !keep(k / 3) && k % 3 == 0 { 1.0 } else { 0.0 });
    let target_unit = Tensor::from_fn(&[j, 3], |k| {
        let i = k / 3;
        if keep(i) {
            tv[k] / norm(tv, i)
        } else {
            0.0
        }
    });
    let m = tape.constant(&mask);
    let f = tape.constant(&filler);
    let safe = tape.mul(pred, m)?;
    let safe = tape.add(safe, f)?;
    let sq = tape.mul(safe, safe)?;
    let pred_norm = tape.reduce_sum(sq, 1)?;
    let pred_norm = tape.sqrt(pred_norm)?;
    let tu = tape.constant(&target_unit);
    let dot = tape.mul(safe, tu)?;
    let dot = tape.reduce_sum(dot, 1)?;
    let cos = tape.div(dot, pred_norm)?;
    let l_theta = tape.sum_all(cos)?;
    Ok(PoseLossVars { l_l2, l_theta, l_l1, degenerate_joints: degenerate })
}

/// Weighted sum of the heatmap loss and the pose terms.
pub fn total_loss_on(tape: &mut Tape, l2d: Var, pose: &PoseLossVars, weights: LossWeights) -> Result<Var> {
    let a = tape.add(l2d, pose.l_l2)?;
    let b = tape.scale(pose.l_theta, weights.theta)?;
    let c = tape.scale(pose.l_l1, weights.l1)?;
    let s = tape.add(a, b)?;
    Ok(tape.add(s, c)?)
}

/// Mean squared error between heatmaps.
pub fn loss_2d(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same("heatmap loss", target.shape(), pred.shape())?;
    let n = pred.numel() as f64;
    Ok(pred.values().iter().zip(target.values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Pose terms plus `total` (with `l2d = 0`).
pub fn loss_3d(pred: &Tensor, target: &Tensor, weights: LossWeights) -> Result<LossBreakdown> {
    let j = check_pose("pose loss", pred.shape())?;
    check_same("pose loss", target.shape(), pred.shape())?;
    let (p, t) = (pred.values(), target.values());
    let mut out = LossBreakdown::default();
    for i in 0..j {
        let (a, b) = (&p[3 * i..3 * i + 3], &t[3 * i..3 * i + 3]);
        let mut dot = 0.0;
        let (mut na, mut nb) = (0.0, 0.0);
        for k in 0..3 {
            let d = a[k] - b[k];
            out.l_l2 += d * d;
            out.l_l1 += d.abs();
            dot += a[k] * b[k];
            na += a[k] * a[k];
            nb += b[k] * b[k];
        }
        if na.sqrt() < NORM_EPS || nb.sqrt() < NORM_EPS {
            out.degenerate_joints.push(i);
        } else {
            // one square root keeps identical vectors at exactly 1
            out.l_theta += dot / (na * nb).sqrt();
        }
    }
    out.recompute_total(weights);
    Ok(out)
}

/// All four terms and the weighted total.
pub fn total_loss(pred_heatmaps: &Tensor, target_heatmaps: &Tensor, pred: &Tensor, target: &Tensor, weights: LossWeights) -> Result<LossBreakdown> {
    let mut out = loss_3d(pred, target, weights)?;
    out.l2d = loss_2d(pred_heatmaps, target_heatmaps)?;
    out.recompute_total(weights);
    Ok(out)
}

/// Euclidean error of every joint.
pub fn joint_errors(pred: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
    check_pose("joint errors", pred.shape())?;
    check_same("joint errors", target.shape(), pred.shape())?;
    Ok(pred
        .values()
        .chunks(3)
        .zip(target.values().chunks(3))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .collect())
}

/// Mean per-joint position error over `joints`, in the poses' units; no
/// alignment is applied.
pub fn mpjpe(pred: &Tensor, target: &Tensor, joints: &[usize]) -> Result<f64> {
    let errors = joint_errors(pred, target)?;
    if joints.is_empty() || joints.iter().any(|&j| j >= errors.len()) {
        return Err(Error::InvalidArgument(format!("joint subset {joints:?} is empty or out of range for {} joints", errors.len())));
    }
    Ok(joints.iter().map(|&j| errors[j]).sum::<f64>() / joints.len() as f64)
}
