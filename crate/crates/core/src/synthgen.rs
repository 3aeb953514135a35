//! Procedural scenes and exact optical flow.
//!
//! No images are rendered. A scene is a handful of planes and spheres; a
//! sample is the dense flow induced by a camera motion over the depth map seen
//! from a random viewpoint, together with that motion. All sizes in a scene
//! are proportional to its depth range, so multiplying the depth range and the
//! translation range by the same factor leaves the flow statistics unchanged.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::geometry::{exp_so3, project, unproject, CameraIntrinsics, Pose, RelativeMotion, Vec3};
use crate::seed::rng_for;

/// Dense per-pixel displacement, interleaved `(u, v)` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 2],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 2 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", width * height * 2),
                got: format!("{} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow field"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = 2 * (y * self.width + x);
        (self.data[i], self.data[i + 1])
    }

    pub fn set(&mut self, x: usize, y: usize, value: (f64, f64)) {
        let i = 2 * (y * self.width + x);
        self.data[i] = value.0;
        self.data[i + 1] = value.1;
    }
}

/// Per-pixel validity, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl ValidMask {
    pub fn all_valid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / self.data.len() as f64
    }
}

/// z-depth per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self {
            width,
            height,
            data: vec![depth; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|d| d * factor).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MotionPattern {
    /// Independent translation direction and rotation axis, rich free-flight motion.
    Full6Dof,
    /// Forward translation plus yaw, KITTI-like.
    PlanarCarlike,
}

impl std::str::FromStr for MotionPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_6dof" => Ok(Self::Full6Dof),
            "planar_carlike" => Ok(Self::PlanarCarlike),
            other => Err(invalid("motion pattern", other.to_string())),
        }
    }
}

impl std::fmt::Display for MotionPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full6Dof => "full_6dof",
            Self::PlanarCarlike => "planar_carlike",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Number of sphere primitives added to the room planes.
    pub primitive_count: usize,
    pub depth_range: (f64, f64),
    /// Translation magnitude range, scene units.
    pub translation_range: (f64, f64),
    /// Rotation angle range, radians.
    pub rotation_range: (f64, f64),
    pub seed: u64,
    pub environment_id: u64,
    pub intrinsics: CameraIntrinsics,
    /// Minimum fraction of valid pixels a generated sample must keep.
    pub min_valid_fraction: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            primitive_count: 12,
            depth_range: (1.0, 20.0),
            translation_range: (0.2, 0.6),
            rotation_range: (0.0, 0.08),
            seed: 0,
            environment_id: 0,
            intrinsics: CameraIntrinsics::desk(),
            min_valid_fraction: 0.8,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (d0, d1) = self.depth_range;
        if !(d0 > 0.0 && d1 > d0 && d1.is_finite()) {
            return Err(invalid("depth_range", format!("{d0}..{d1}")));
        }
        let (t0, t1) = self.translation_range;
        if !(t0 >= 0.0 && t1 > t0 && t1.is_finite()) {
            return Err(invalid("translation_range", format!("{t0}..{t1}")));
        }
        let (r0, r1) = self.rotation_range;
        if !(r0 >= 0.0 && r1 > r0 && r1 < 1.0) {
            return Err(invalid("rotation_range", format!("{r0}..{r1}")));
        }
        if !(0.0..=1.0).contains(&self.min_valid_fraction) {
            return Err(invalid("min_valid_fraction", self.min_valid_fraction.to_string()));
        }
        Ok(())
    }

    /// The same config with depth and translation ranges multiplied by `factor`.
    pub fn rescaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.depth_range = (self.depth_range.0 * factor, self.depth_range.1 * factor);
        out.translation_range = (
            self.translation_range.0 * factor,
            self.translation_range.1 * factor,
        );
        out
    }
}

/// One training example: flow between two frames and the motion causing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub flow: FlowField,
    pub motion: RelativeMotion,
    pub intrinsics: CameraIntrinsics,
    pub valid_mask: ValidMask,
}

#[derive(Debug, Clone, Copy)]
enum Primitive {
    /// Points `x` with `normal . x = offset`.
    Plane { normal: Vec3, offset: f64 },
    Sphere { center: Vec3, radius: f64 },
}

impl Primitive {
    /// Smallest positive ray parameter along `origin + s * dir`.
    fn hit(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        match *self {
            Primitive::Plane { normal, offset } => {
                let denom = normal.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let s = (offset - normal.dot(origin)) / denom;
                (s > 0.0).then_some(s)
            }
            Primitive::Sphere { center, radius } => {
                let oc = origin - center;
                let a = dir.norm_squared();
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let s0 = (-b - sq) / a;
                let s1 = (-b + sq) / a;
                if s0 > 0.0 {
                    Some(s0)
                } else if s1 > 0.0 {
                    Some(s1)
                } else {
                    None
                }
            }
        }
    }
}

fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Room-like layout: floor, optional ceiling and side walls, a tilted back
/// wall and a set of spheres. Keyed by `(seed, environment_id)`.
fn build_scene(config: &SceneConfig) -> Vec<Primitive> {
    let mut rng = rng_for(&[config.seed, config.environment_id, 0x5C3E]);
    let (d0, d1) = config.depth_range;
    let mut prims = Vec::with_capacity(config.primitive_count + 5);

    let floor = d0 * rng.random_range(1.0..2.5);
    prims.push(Primitive::Plane {
        normal: Vec3::new(rng.random_range(-0.1..0.1), 1.0, rng.random_range(-0.1..0.1)).normalize(),
        offset: floor,
    });
    if rng.random_bool(0.5) {
        prims.push(Primitive::Plane {
            normal: Vec3::new(0.0, -1.0, 0.0),
            offset: d0 * rng.random_range(1.5..4.0),
        });
    }
    for side in [-1.0, 1.0] {
        if rng.random_bool(0.7) {
            let normal =
                Vec3::new(side, 0.0, rng.random_range(-0.3..0.3)).normalize();
            prims.push(Primitive::Plane {
                normal,
                offset: d0 * rng.random_range(2.0..6.0),
            });
        }
    }
    let back = Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.2..0.2), 1.0).normalize();
    prims.push(Primitive::Plane {
        normal: back,
        offset: d1 * rng.random_range(0.5..0.9) * back.z,
    });
    for _ in 0..config.primitive_count {
        let z = rng.random_range(2.0 * d0..0.8 * d1);
        let radius = z * rng.random_range(0.05..0.25);
        let center = Vec3::new(
            rng.random_range(-0.6..0.6) * z,
            rng.random_range(-0.4 * z..floor),
            z,
        );
        prims.push(Primitive::Sphere { center, radius });
    }
    prims
}

/// Depth map seen from `pose` in the procedural scene of `config`.
///
/// The z-depth of the nearest hit is clamped into `config.depth_range`; rays
/// that escape the scene read the far bound.
pub fn render_depth(config: &SceneConfig, pose: &Pose, k: &CameraIntrinsics) -> DepthMap {
    let scene = build_scene(config);
    let (d0, d1) = config.depth_range;
    let mut data = Vec::with_capacity(k.width * k.height);
    for v in 0..k.height {
        for u in 0..k.width {
            // camera ray with unit z, so the ray parameter is the z-depth
            let ray_cam = unproject(u as f64, v as f64, 1.0, k);
            let dir = pose.rotation * ray_cam;
            let nearest = scene
                .iter()
                .filter_map(|p| p.hit(&pose.position, &dir))
                .fold(f64::INFINITY, f64::min);
            data.push(if nearest.is_finite() { nearest.clamp(d0, d1) } else { d1 });
        }
    }
    DepthMap {
        width: k.width,
        height: k.height,
        data,
    }
}

/// Exact flow of a static scene under `motion`.
///
/// Pixels whose point ends behind camera `t+1` get zero flow; those and
/// pixels that reproject outside the frame are marked invalid.
pub fn flow_from_depth_motion(
    depth: &DepthMap,
    motion: &RelativeMotion,
    k: &CameraIntrinsics,
) -> Result<(FlowField, ValidMask)> {
    if depth.width != k.width || depth.height != k.height {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", k.width, k.height),
            got: format!("{}x{}", depth.width, depth.height),
        });
    }
    if depth.data.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(invalid("depth map", "depth must be positive and finite"));
    }
    let rt = motion.rotation_matrix().transpose();
    let mut flow = FlowField::zeros(k.width, k.height);
    let mut mask = ValidMask::all_valid(k.width, k.height);
    for y in 0..k.height {
        for x in 0..k.width {
            let (u, v) = (x as f64, y as f64);
            let p = unproject(u, v, depth.get(x, y), k);
            let q = rt * (p - motion.translation);
            let idx = y * k.width + x;
            match project(&q, k) {
                Ok(p1) => {
                    flow.set(x, y, (p1.x - u, p1.y - v));
                    mask.data[idx] = k.contains(p1.x, p1.y);
                }
                Err(_) => mask.data[idx] = false,
            }
        }
    }
    Ok((flow, mask))
}

fn draw_range(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    rng.random_range(range.0..range.1)
}

fn draw_motion(rng: &mut ChaCha8Rng, config: &SceneConfig, pattern: MotionPattern) -> RelativeMotion {
    let mag = draw_range(rng, config.translation_range);
    let angle = draw_range(rng, config.rotation_range);
    let (t, r) = match pattern {
        MotionPattern::Full6Dof => (unit(rng) * mag, unit(rng) * angle),
        MotionPattern::PlanarCarlike => {
            let yaw = if rng.random_bool(0.5) { angle } else { -angle };
            (Vec3::new(0.0, 0.0, mag), Vec3::new(0.0, yaw, 0.0))
        }
    };
    RelativeMotion { translation: t, rotation: r }
}

fn draw_viewpoint(rng: &mut ChaCha8Rng, config: &SceneConfig) -> Pose {
    let d0 = config.depth_range.0;
    let position = Vec3::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    ) * d0;
    let r = Vec3::new(
        rng.random_range(-0.15..0.15),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.1..0.1),
    );
    Pose {
        position,
        rotation: exp_so3(&r).expect("small rotation"),
    }
}

const MAX_ATTEMPTS: usize = 400;

fn generate_one(
    config: &SceneConfig,
    index: u64,
    pattern: MotionPattern,
) -> Result<Sample> {
    let mut rng = rng_for(&[config.seed, config.environment_id, index, 0xDA7A]);
    let k = config.intrinsics;
    let mut depth = None;
    for attempt in 0..MAX_ATTEMPTS {
        if attempt % 20 == 0 {
            let pose = draw_viewpoint(&mut rng, config);
            depth = Some(render_depth(config, &pose, &k));
        }
        let depth = depth.as_ref().expect("rendered above");
        let motion = draw_motion(&mut rng, config, pattern);
        let (flow, mask) = flow_from_depth_motion(depth, &motion, &k)?;
        if mask.valid_fraction() >= config.min_valid_fraction {
            return Ok(Sample {
                flow,
                motion,
                intrinsics: k,
                valid_mask: mask,
            });
        }
    }
    Err(invalid(
        "scene config",
        format!("no sample with >= {} valid pixels after {MAX_ATTEMPTS} draws", config.min_valid_fraction),
    ))
}

/// `n` samples from the environment `config.environment_id`.
pub fn generate_dataset(config: &SceneConfig, n: usize, pattern: MotionPattern) -> Result<Vec<Sample>> {
    generate_split(config, &[config.environment_id], n, pattern)
}

/// `n` samples cycling through `environments`; sample `i` comes from
/// `environments[i % len]`. Prefixes of a split are themselves valid splits,
/// so nested subsets come for free.
pub fn generate_split(
    config: &SceneConfig,
    environments: &[u64],
    n: usize,
    pattern: MotionPattern,
) -> Result<Vec<Sample>> {
    config.validate()?;
    if n == 0 {
        return Err(invalid("sample count", "must be positive"));
    }
    if environments.is_empty() {
        return Err(invalid("environments", "empty"));
    }
    let per_env: Vec<SceneConfig> = environments
        .iter()
        .map(|&env| SceneConfig {
            environment_id: env,
            ..config.clone()
        })
        .collect();
    (0..n)
        .into_par_iter()
        .map(|i| generate_one(&per_env[i % per_env.len()], i as u64, pattern))
        .collect()
}

/// Stand-in for matching-network error: additive Gaussian noise on both
/// components plus random dropout to zero flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma: f64,
    pub dropout: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            dropout: 0.05,
        }
    }
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            sigma: 0.0,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(invalid("noise sigma", self.sigma.to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("noise dropout", self.dropout.to_string()));
        }
        Ok(())
    }
}

pub fn corrupt_flow(flow: &FlowField, noise: &NoiseModel, seed: u64) -> Result<FlowField> {
    noise.validate()?;
    let mut out = flow.clone();
    if noise.sigma == 0.0 && noise.dropout == 0.0 {
        return Ok(out);
    }
    let mut rng = rng_for(&[seed, 0xF10E]);
    let normal = Normal::new(0.0, noise.sigma).map_err(|e| invalid("noise sigma", e.to_string()))?;
    for px in out.data.chunks_exact_mut(2) {
        if noise.dropout > 0.0 && rng.random_bool(noise.dropout) {
            px[0] = 0.0;
            px[1] = 0.0;
        } else if noise.sigma > 0.0 {
            px[0] += normal.sample(&mut rng);
            px[1] += normal.sample(&mut rng);
        }
    }
    Ok(out)
}
