//! Rigid-motion and pinhole-camera primitives.
//!
//! Rotations are carried as so(3) axis-angle vectors restricted to the
//! canonical chart `|r| < pi`; matrices are built on demand.
//!
//! Camera frame: x right, y down, z forward. A [`RelativeMotion`] is the pose
//! of camera `t+1` expressed in the frame of camera `t`, so a static world
//! point maps as `X_{t+1} = exp(r)^T (X_t - t)`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{invalid, Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle the Rodrigues coefficients switch to Taylor series.
pub const SMALL_ANGLE: f64 = 1e-8;
/// `log_so3` refuses rotations whose angle is this close to pi.
pub const NEAR_PI: f64 = 1e-6;
/// Orthonormality tolerance for [`Pose`] rotations.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] applied to the antisymmetric part of `m`, times two.
fn vee_antisym(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
}

/// Rodrigues' formula. Fails for vectors outside the canonical chart.
pub fn exp_so3(r: &Vec3) -> Result<Mat3> {
    if !(r.x.is_finite() && r.y.is_finite() && r.z.is_finite()) {
        return Err(Error::NonFinite("rotation vector"));
    }
    let theta = r.norm();
    if theta >= PI {
        return Err(Error::NonCanonicalRotation { norm: theta });
    }
    Ok(exp_unchecked(r))
}

fn exp_unchecked(r: &Vec3) -> Mat3 {
    let theta2 = r.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(r);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Mat3::identity() + k * a + k * k * b
}

/// Geodesic angle of a rotation matrix, in `[0, pi]`.
pub fn rotation_angle(m: &Mat3) -> f64 {
    let s = 0.5 * vee_antisym(m).norm();
    let c = 0.5 * (m.trace() - 1.0);
    s.atan2(c)
}

/// Logarithm map back to the canonical chart.
pub fn log_so3(m: &Mat3) -> Result<Vec3> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("rotation matrix"));
    }
    let w = vee_antisym(m);
    let s = 0.5 * w.norm();
    let c = 0.5 * (m.trace() - 1.0);
    let theta = s.atan2(c);
    if PI - theta < NEAR_PI {
        return Err(Error::NearPiRotation { angle: theta });
    }
    if theta < SMALL_ANGLE {
        // theta / (2 sin theta) ~ 1/2 (1 + theta^2 / 6)
        Ok(w * (0.5 * (1.0 + theta * theta / 6.0)))
    } else {
        Ok(w * (theta / (2.0 * s)))
    }
}

/// Camera motion between two consecutive frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeMotion {
    pub translation: Vec3,
    pub rotation: Vec3,
}

impl RelativeMotion {
    pub fn new(translation: Vec3, rotation: Vec3) -> Result<Self> {
        if translation.iter().chain(rotation.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("relative motion"));
        }
        let norm = rotation.norm();
        if norm >= PI {
            return Err(Error::NonCanonicalRotation { norm });
        }
        Ok(Self {
            translation,
            rotation,
        })
    }

    pub fn identity() -> Self {
        Self {
            translation: Vec3::zeros(),
            rotation: Vec3::zeros(),
        }
    }

    /// `[tx, ty, tz, rx, ry, rz]`.
    pub fn to_array(&self) -> [f64; 6] {
        let t = &self.translation;
        let r = &self.rotation;
        [t.x, t.y, t.z, r.x, r.y, r.z]
    }

    pub fn from_array(v: [f64; 6]) -> Result<Self> {
        Self::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]))
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        exp_unchecked(&self.rotation)
    }

    /// The motion that undoes `self`.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation_matrix().transpose();
        Self {
            translation: -(rt * self.translation),
            rotation: -self.rotation,
        }
    }

    /// Motion taking camera pose `from` to camera pose `to`.
    pub fn between(from: &Pose, to: &Pose) -> Result<Self> {
        let rt = from.rotation.transpose();
        let translation = rt * (to.position - from.position);
        let rotation = log_so3(&(rt * to.rotation))?;
        Self::new(translation, rotation)
    }

    /// Maps a point from the frame of camera `t` into the frame of camera `t+1`.
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation_matrix().transpose() * (p - self.translation)
    }
}

/// Absolute camera pose: camera-to-world rotation and camera center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub rotation: Mat3,
}

impl Pose {
    pub fn new(position: Vec3, rotation: Mat3) -> Result<Self> {
        if position.iter().chain(rotation.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("pose"));
        }
        let err = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        let det = rotation.determinant();
        if err > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(invalid(
                "pose rotation",
                format!("not orthonormal (error {err:e}, det {det})"),
            ));
        }
        Ok(Self { position, rotation })
    }

    pub fn identity() -> Self {
        Self {
            position: Vec3::zeros(),
            rotation: Mat3::identity(),
        }
    }

    pub fn compose(&self, motion: &RelativeMotion) -> Pose {
        compose(self, motion)
    }

    /// Applies a world-frame rigid transform `x -> rotation * x + translation`.
    pub fn transformed(&self, rotation: &Mat3, translation: &Vec3) -> Pose {
        Pose {
            position: rotation * self.position + translation,
            rotation: rotation * self.rotation,
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Pose of camera `t+1` given the pose of camera `t` and the motion between them.
pub fn compose(pose: &Pose, motion: &RelativeMotion) -> Pose {
    Pose {
        position: pose.position + pose.rotation * motion.translation,
        rotation: pose.rotation * motion.rotation_matrix(),
    }
}

/// Pinhole intrinsics plus image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub ox: f64,
    pub oy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, ox: f64, oy: f64, width: usize, height: usize) -> Result<Self> {
        if ![fx, fy, ox, oy].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("intrinsics"));
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(invalid("intrinsics", "focal lengths must be positive"));
        }
        if width == 0 || height == 0 {
            return Err(invalid("intrinsics", "image size must be positive"));
        }
        Ok(Self {
            fx,
            fy,
            ox,
            oy,
            width,
            height,
        })
    }

    /// The 64x48 working camera: a 90 degree horizontal field of view with
    /// the principal point at the image center.
    pub fn desk() -> Self {
        Self {
            fx: 32.0,
            fy: 32.0,
            ox: 32.0,
            oy: 24.0,
            width: 64,
            height: 48,
        }
    }

    /// Horizontal field of view in degrees.
    pub fn fov_x_deg(&self) -> f64 {
        2.0 * (self.width as f64 / (2.0 * self.fx)).atan().to_degrees()
    }

    pub fn fov_y_deg(&self) -> f64 {
        2.0 * (self.height as f64 / (2.0 * self.fy)).atan().to_degrees()
    }

    /// Whether `(u, v)` falls on a pixel cell; cell `u` spans `[u - 0.5, u + 0.5]`.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u <= self.width as f64 - 0.5 && v <= self.height as f64 - 0.5
    }
}

/// Pinhole projection of a camera-frame point.
pub fn project(point: &Vec3, k: &CameraIntrinsics) -> Result<Vector2<f64>> {
    if point.z <= 1e-9 {
        return Err(Error::BehindCamera { depth: point.z });
    }
    Ok(Vector2::new(
        k.fx * point.x / point.z + k.ox,
        k.fy * point.y / point.z + k.oy,
    ))
}

/// Back-projects pixel `(u, v)` to the camera-frame point at z-depth `depth`.
pub fn unproject(u: f64, v: f64, depth: f64, k: &CameraIntrinsics) -> Vec3 {
    Vec3::new(
        (u - k.ox) / k.fx * depth,
        (v - k.oy) / k.fy * depth,
        depth,
    )
}
