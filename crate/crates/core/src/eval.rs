//! Trajectory integration and odometry metrics.
//!
//! ATE is the position RMSE after a whole-trajectory alignment (similarity by
//! default, since a monocular estimate carries no scale). Drift follows the
//! odometry-benchmark recipe: for every start frame and segment length, the
//! end frame is the first whose accumulated ground-truth path length reaches
//! the segment length, and the relative-pose error over that span is divided
//! by the segment length.

use std::fmt;
use std::str::FromStr;

use nalgebra::SVD;

use crate::error::{invalid, Error, Result};
use crate::geometry::{compose, rotation_angle, Mat3, Pose, RelativeMotion, Vec3};

/// Segment lengths used for drift at desk scale.
pub const DESK_SEGMENTS: [f64; 4] = [5.0, 10.0, 20.0, 40.0];
/// Segment lengths of the driving benchmark, meters.
pub const KITTI_SEGMENTS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    timestamps: Vec<f64>,
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(entries: Vec<(f64, Pose)>) -> Result<Self> {
        let (timestamps, poses): (Vec<f64>, Vec<Pose>) = entries.into_iter().unzip();
        if timestamps.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("timestamp"));
        }
        if let Some(w) = timestamps.windows(2).find(|w| w[1] <= w[0]) {
            return Err(invalid(
                "trajectory",
                format!("timestamps not strictly increasing ({} then {})", w[0], w[1]),
            ));
        }
        Ok(Self { timestamps, poses })
    }

    /// Poses stamped `0, 1, 2, ...`.
    pub fn from_poses(poses: Vec<Pose>) -> Self {
        let timestamps = (0..poses.len()).map(|i| i as f64).collect();
        Self { timestamps, poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn positions(&self) -> impl Iterator<Item = &Vec3> + '_ {
        self.poses.iter().map(|p| &p.position)
    }

    /// Frame-to-frame motions; the inverse of [`integrate`].
    pub fn motions(&self) -> Result<Vec<RelativeMotion>> {
        self.poses
            .windows(2)
            .map(|w| RelativeMotion::between(&w[0], &w[1]))
            .collect()
    }

    /// Applies `x -> s R x + t` to every pose.
    pub fn transformed(&self, sim: &Similarity) -> Self {
        Self {
            timestamps: self.timestamps.clone(),
            poses: self.poses.iter().map(|p| sim.apply_pose(p)).collect(),
        }
    }

    /// Total ground-truth path length.
    pub fn path_length(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| (w[1].position - w[0].position).norm())
            .sum()
    }
}

/// Chains frame-to-frame motions from `start`; timestamps are frame indices.
pub fn integrate(motions: &[RelativeMotion], start: Pose) -> Trajectory {
    let mut poses = Vec::with_capacity(motions.len() + 1);
    poses.push(start);
    for m in motions {
        let next = compose(poses.last().expect("non-empty"), m);
        poses.push(next);
    }
    Trajectory::from_poses(poses)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        Pose {
            position: self.apply(&pose.position),
            rotation: self.rotation * pose.rotation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlignMode {
    Similarity,
    Rigid,
    None,
}

impl FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similarity" | "sim3" => Ok(Self::Similarity),
            "rigid" | "se3" => Ok(Self::Rigid),
            "none" => Ok(Self::None),
            other => Err(invalid("alignment mode", other.to_string())),
        }
    }
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Similarity => "similarity",
            Self::Rigid => "rigid",
            Self::None => "none",
        })
    }
}

fn check_pair(est: &Trajectory, gt: &Trajectory) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::Mismatch(format!(
            "estimate has {} poses, ground truth {}",
            est.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Least-squares alignment of `est` positions onto `gt` positions
/// (Umeyama), with or without scale.
fn umeyama(est: &Trajectory, gt: &Trajectory, with_scale: bool) -> Result<Similarity> {
    check_pair(est, gt)?;
    let n = est.len();
    if n < 3 {
        return Err(Error::DegenerateTrajectory(format!("{n} poses, need at least 3")));
    }
    let nf = n as f64;
    let mu_e = est.positions().sum::<Vec3>() / nf;
    let mu_g = gt.positions().sum::<Vec3>() / nf;
    let mut cov = Mat3::zeros();
    let mut var_e = 0.0;
    let mut gt_cov = Mat3::zeros();
    for (e, g) in est.positions().zip(gt.positions()) {
        let de = e - mu_e;
        let dg = g - mu_g;
        cov += dg * de.transpose();
        gt_cov += dg * dg.transpose();
        var_e += de.norm_squared();
    }
    cov /= nf;
    gt_cov /= nf;
    var_e /= nf;

    let gt_sv = gt_cov.symmetric_eigenvalues();
    let mut gt_sv: Vec<f64> = gt_sv.iter().copied().collect();
    gt_sv.sort_by(|a, b| b.total_cmp(a));
    if gt_sv[0] <= 0.0 || gt_sv[1] <= 1e-12 * gt_sv[0] {
        return Err(Error::DegenerateTrajectory(
            "ground-truth positions are collinear; rotation is not unique".into(),
        ));
    }
    if var_e <= 1e-300 {
        return Err(Error::DegenerateTrajectory("estimate positions are all equal".into()));
    }

    let svd = SVD::new(cov, true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut s = Mat3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = if with_scale {
        let d = svd.singular_values;
        (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / var_e
    } else {
        1.0
    };
    let translation = mu_g - rotation * mu_e * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Similarity transform minimizing `sum |s R p_est + t - p_gt|^2`.
pub fn align_similarity(est: &Trajectory, gt: &Trajectory) -> Result<Similarity> {
    umeyama(est, gt, true)
}

/// Rigid transform minimizing `sum |R p_est + t - p_gt|^2`.
pub fn align_rigid(est: &Trajectory, gt: &Trajectory) -> Result<Similarity> {
    umeyama(est, gt, false)
}

pub fn alignment(est: &Trajectory, gt: &Trajectory, mode: AlignMode) -> Result<Similarity> {
    match mode {
        AlignMode::Similarity => align_similarity(est, gt),
        AlignMode::Rigid => align_rigid(est, gt),
        AlignMode::None => {
            check_pair(est, gt)?;
            Ok(Similarity::identity())
        }
    }
}

/// Position RMSE after the chosen alignment.
pub fn ate(est: &Trajectory, gt: &Trajectory, mode: AlignMode) -> Result<f64> {
    let sim = alignment(est, gt, mode)?;
    if est.is_empty() {
        return Err(invalid("trajectory", "empty"));
    }
    let sum: f64 = est
        .positions()
        .zip(gt.positions())
        .map(|(e, g)| (sim.apply(e) - g).norm_squared())
        .sum();
    Ok((sum / est.len() as f64).sqrt())
}

/// Errors of one drift segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentError {
    pub first: usize,
    pub last: usize,
    pub length: f64,
    /// Translation error divided by length (fraction, not percent).
    pub translation: f64,
    /// Rotation error divided by length, radians per unit.
    pub rotation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Drift {
    /// Mean translational drift, percent.
    pub t_rel: f64,
    /// Mean rotational drift, degrees per 100 units.
    pub r_rel: f64,
    pub segments: Vec<SegmentError>,
}

impl Drift {
    /// `(length, segment count, t_rel %, r_rel deg/100)` per segment length.
    pub fn per_length(&self, lengths: &[f64]) -> Vec<(f64, usize, f64, f64)> {
        lengths
            .iter()
            .map(|&len| {
                let segs: Vec<_> = self.segments.iter().filter(|s| s.length == len).collect();
                let n = segs.len();
                let mean = |f: &dyn Fn(&SegmentError) -> f64| {
                    if n == 0 {
                        0.0
                    } else {
                        segs.iter().map(|s| f(s)).sum::<f64>() / n as f64
                    }
                };
                (
                    len,
                    n,
                    100.0 * mean(&|s| s.translation),
                    100.0 * mean(&|s| s.rotation).to_degrees(),
                )
            })
            .collect()
    }
}

/// Average relative drift over all start frames and segment lengths.
pub fn kitti_drift(est: &Trajectory, gt: &Trajectory, segment_lengths: &[f64]) -> Result<Drift> {
    check_pair(est, gt)?;
    if segment_lengths.is_empty() || segment_lengths.iter().any(|l| !(*l > 0.0)) {
        return Err(invalid("segment lengths", format!("{segment_lengths:?}")));
    }
    let required = segment_lengths.iter().copied().fold(0.0, f64::max);
    let mut dist = Vec::with_capacity(gt.len());
    let mut acc = 0.0;
    dist.push(0.0);
    for w in gt.poses().windows(2) {
        acc += (w[1].position - w[0].position).norm();
        dist.push(acc);
    }
    if acc < required {
        return Err(Error::TrajectoryTooShort {
            length: acc,
            required,
        });
    }
    let (g, e) = (gt.poses(), est.poses());
    let mut segments = Vec::new();
    for first in 0..gt.len() {
        for &length in segment_lengths {
            let target = dist[first] + length;
            let Some(last) = (first + 1..gt.len()).find(|&j| dist[j] >= target) else {
                continue;
            };
            let rg = g[first].rotation.transpose() * g[last].rotation;
            let tg = g[first].rotation.transpose() * (g[last].position - g[first].position);
            let re = e[first].rotation.transpose() * e[last].rotation;
            let te = e[first].rotation.transpose() * (e[last].position - e[first].position);
            let t_err = (re.transpose() * (tg - te)).norm();
            let r_err = rotation_angle(&(re.transpose() * rg));
            segments.push(SegmentError {
                first,
                last,
                length,
                translation: t_err / length,
                rotation: r_err / length,
            });
        }
    }
    if segments.is_empty() {
        return Err(Error::TrajectoryTooShort {
            length: acc,
            required,
        });
    }
    let n = segments.len() as f64;
    let t_rel = 100.0 * segments.iter().map(|s| s.translation).sum::<f64>() / n;
    let r_rel = 100.0 * (segments.iter().map(|s| s.rotation).sum::<f64>() / n).to_degrees();
    Ok(Drift {
        t_rel,
        r_rel,
        segments,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mode: AlignMode,
    pub ate: f64,
    pub scale: f64,
    /// Percent; `None` when the trajectory is shorter than the longest segment.
    pub t_rel: Option<f64>,
    /// Degrees per 100 units.
    pub r_rel: Option<f64>,
    pub segment_lengths: Vec<f64>,
    /// `(length, count, t_rel, r_rel)` per segment length.
    pub per_length: Vec<(f64, usize, f64, f64)>,
}

impl MetricReport {
    /// Tab-separated `key value` lines.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
        let mut s = format!(
            "alignment\t{}\nate\t{}\nscale\t{}\nt_rel\t{}\nr_rel\t{}\n",
            self.mode,
            self.ate,
            self.scale,
            opt(self.t_rel),
            opt(self.r_rel)
        );
        for (len, n, t, r) in &self.per_length {
            s.push_str(&format!("segment\t{len}\t{n}\t{t}\t{r}\n"));
        }
        s
    }
}

/// ATE under `mode` plus drift of the unaligned estimate.
pub fn evaluate(est: &Trajectory, gt: &Trajectory, mode: AlignMode, segment_lengths: &[f64]) -> Result<MetricReport> {
    let sim = alignment(est, gt, mode)?;
    let ate = ate(est, gt, mode)?;
    let (t_rel, r_rel, per_length) = match kitti_drift(est, gt, segment_lengths) {
        Ok(d) => (Some(d.t_rel), Some(d.r_rel), d.per_length(segment_lengths)),
        Err(Error::TrajectoryTooShort { .. }) => (None, None, Vec::new()),
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        mode,
        ate,
        scale: sim.scale,
        t_rel,
        r_rel,
        segment_lengths: segment_lengths.to_vec(),
        per_length,
    })
}
