//! Intrinsics layer and random crop-and-resize (RCR).
//!
//! Pixel `u` of an image sits at coordinate `u` (cell-centered indices). A
//! crop `(x0, y0, w, h)` resized to `W x H` maps output pixel `u'` to source
//! coordinate `x0 + u' * w / W`, which is exactly the pinhole camera with
//! `fx' = fx * W / w` and `ox' = (ox - x0) * W / w`. Because the intrinsics
//! layer is affine in pixel coordinates, resampling it with bilinear weights
//! reproduces the layer of the effective camera.

use rand::RngExt;

use crate::error::{invalid, Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::seed::rng_for;
use crate::synthgen::{FlowField, Sample, ValidMask};

/// Largest resize factor RCR may apply.
pub const MAX_RESIZE: f64 = 2.5;
const FACTOR_TOL: f64 = 1e-9;

/// Normalized image coordinates per pixel: `kx = (u - ox) / fx`,
/// `ky = (v - oy) / fy`.
#[derive(Debug, Clone, PartialEq)]
pub struct ILGrid {
    pub width: usize,
    pub height: usize,
    pub kx: Vec<f64>,
    pub ky: Vec<f64>,
}

impl ILGrid {
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.kx[i], self.ky[i])
    }

    /// Largest absolute channel difference.
    pub fn max_abs_diff(&self, other: &ILGrid) -> f64 {
        self.kx
            .iter()
            .zip(&other.kx)
            .chain(self.ky.iter().zip(&other.ky))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn make_il(k: &CameraIntrinsics) -> ILGrid {
    let n = k.width * k.height;
    let mut kx = Vec::with_capacity(n);
    let mut ky = Vec::with_capacity(n);
    for v in 0..k.height {
        for u in 0..k.width {
            kx.push((u as f64 - k.ox) / k.fx);
            ky.push((v as f64 - k.oy) / k.fy);
        }
    }
    ILGrid {
        width: k.width,
        height: k.height,
        kx,
        ky,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRect {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropResizeParams {
    pub rect: CropRect,
    pub out_width: usize,
    pub out_height: usize,
}

impl CropResizeParams {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            rect: CropRect {
                x0: 0.0,
                y0: 0.0,
                w: width as f64,
                h: height as f64,
            },
            out_width: width,
            out_height: height,
        }
    }

    pub fn scale_x(&self) -> f64 {
        self.out_width as f64 / self.rect.w
    }

    pub fn scale_y(&self) -> f64 {
        self.out_height as f64 / self.rect.h
    }

    /// Checks the rect against a `width x height` source.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let r = &self.rect;
        if ![r.x0, r.y0, r.w, r.h].iter().all(|v| v.is_finite()) || r.w <= 0.0 || r.h <= 0.0 {
            return Err(Error::InvalidCrop(format!("malformed rect {r:?}")));
        }
        if self.out_width < 2 || self.out_height < 2 {
            return Err(Error::InvalidCrop("output must be at least 2x2".into()));
        }
        if r.x0 < 0.0
            || r.y0 < 0.0
            || r.x0 + r.w > width as f64 + FACTOR_TOL
            || r.y0 + r.h > height as f64 + FACTOR_TOL
        {
            return Err(Error::InvalidCrop(format!(
                "rect {r:?} exits the {width}x{height} source"
            )));
        }
        for (axis, f) in [("x", self.scale_x()), ("y", self.scale_y())] {
            if !(1.0 - FACTOR_TOL..=MAX_RESIZE + FACTOR_TOL).contains(&f) {
                return Err(Error::InvalidCrop(format!(
                    "{axis} resize factor {f} outside [1, {MAX_RESIZE}]"
                )));
            }
        }
        Ok(())
    }

    /// Camera seen through the crop.
    pub fn effective_intrinsics(&self, k: &CameraIntrinsics) -> CameraIntrinsics {
        let (sx, sy) = (self.scale_x(), self.scale_y());
        CameraIntrinsics {
            fx: k.fx * sx,
            fy: k.fy * sy,
            ox: (k.ox - self.rect.x0) * sx,
            oy: (k.oy - self.rect.y0) * sy,
            width: self.out_width,
            height: self.out_height,
        }
    }
}

/// Bilinear weights for source coordinate `c` along an axis of length `n`.
/// The lower index is clamped to `n - 2`, so coordinates up to one output
/// step past the last sample extrapolate linearly.
fn lerp_index(c: f64, n: usize) -> (usize, f64) {
    let i = (c.floor().max(0.0) as usize).min(n - 2);
    (i, c - i as f64)
}

struct Resampler {
    xs: Vec<(usize, f64)>,
    ys: Vec<(usize, f64)>,
    nearest_x: Vec<usize>,
    nearest_y: Vec<usize>,
}

impl Resampler {
    fn new(params: &CropResizeParams, src_w: usize, src_h: usize) -> Self {
        let r = &params.rect;
        let step_x = r.w / params.out_width as f64;
        let step_y = r.h / params.out_height as f64;
        let cx: Vec<f64> = (0..params.out_width).map(|u| r.x0 + u as f64 * step_x).collect();
        let cy: Vec<f64> = (0..params.out_height).map(|v| r.y0 + v as f64 * step_y).collect();
        Self {
            xs: cx.iter().map(|&c| lerp_index(c, src_w)).collect(),
            ys: cy.iter().map(|&c| lerp_index(c, src_h)).collect(),
            nearest_x: cx.iter().map(|&c| (c.round() as usize).min(src_w - 1)).collect(),
            nearest_y: cy.iter().map(|&c| (c.round() as usize).min(src_h - 1)).collect(),
        }
    }

    /// Resamples a single-channel (`stride` = 1) or interleaved channel.
    fn bilinear(&self, src: &[f64], src_w: usize, stride: usize, channel: usize, out: &mut [f64]) {
        let out_w = self.xs.len();
        for (v, &(iy, fy)) in self.ys.iter().enumerate() {
            for (u, &(ix, fx)) in self.xs.iter().enumerate() {
                let at = |x: usize, y: usize| src[(y * src_w + x) * stride + channel];
                let top = (1.0 - fx) * at(ix, iy) + fx * at(ix + 1, iy);
                let bottom = (1.0 - fx) * at(ix, iy + 1) + fx * at(ix + 1, iy + 1);
                out[(v * out_w + u) * stride + channel] = (1.0 - fy) * top + fy * bottom;
            }
        }
    }
}

/// Crops and resizes a sample and its intrinsics layer together.
///
/// Flow is resampled bilinearly and rescaled by the resize factors, the mask
/// by nearest neighbour. The returned sample carries the effective camera.
pub fn rcr(sample: &Sample, il: &ILGrid, params: &CropResizeParams) -> Result<(Sample, ILGrid)> {
    let (w, h) = (sample.flow.width, sample.flow.height);
    if il.width != w || il.height != h || sample.valid_mask.width != w || sample.valid_mask.height != h {
        return Err(Error::ShapeMismatch {
            expected: format!("{w}x{h}"),
            got: format!("IL {}x{}, mask {}x{}", il.width, il.height, sample.valid_mask.width, sample.valid_mask.height),
        });
    }
    if w < 2 || h < 2 {
        return Err(Error::InvalidCrop("source must be at least 2x2".into()));
    }
    params.validate(w, h)?;
    let rs = Resampler::new(params, w, h);
    let (ow, oh) = (params.out_width, params.out_height);

    let mut flow = vec![0.0; ow * oh * 2];
    rs.bilinear(&sample.flow.data, w, 2, 0, &mut flow);
    rs.bilinear(&sample.flow.data, w, 2, 1, &mut flow);
    let (sx, sy) = (params.scale_x(), params.scale_y());
    for px in flow.chunks_exact_mut(2) {
        px[0] *= sx;
        px[1] *= sy;
    }

    let mut kx = vec![0.0; ow * oh];
    let mut ky = vec![0.0; ow * oh];
    rs.bilinear(&il.kx, w, 1, 0, &mut kx);
    rs.bilinear(&il.ky, w, 1, 0, &mut ky);

    let mut mask = Vec::with_capacity(ow * oh);
    for &y in &rs.nearest_y {
        for &x in &rs.nearest_x {
            mask.push(sample.valid_mask.get(x, y));
        }
    }

    let out = Sample {
        flow: FlowField {
            width: ow,
            height: oh,
            data: flow,
        },
        motion: sample.motion,
        intrinsics: params.effective_intrinsics(&sample.intrinsics),
        valid_mask: ValidMask {
            width: ow,
            height: oh,
            data: mask,
        },
    };
    let il = ILGrid {
        width: ow,
        height: oh,
        kx,
        ky,
    };
    Ok((out, il))
}

/// Draws a crop whose effective horizontal field of view lies in
/// `fov_range_deg`, then resizes back to the source size.
///
/// The crop keeps the source aspect ratio. Its width is set by a field of
/// view drawn uniformly from the part of the requested range reachable with
/// resize factors in `[1, 2.5]`; its position is uniform over all placements
/// inside the frame, so the principal point can land far from the center.
pub fn sample_rcr_params(
    k: &CameraIntrinsics,
    seed: u64,
    fov_range_deg: (f64, f64),
) -> Result<CropResizeParams> {
    let (lo, hi) = fov_range_deg;
    if !(lo > 0.0 && hi >= lo && hi < 120.0) {
        return Err(invalid("fov range", format!("{lo}..{hi} degrees")));
    }
    let (width, height) = (k.width as f64, k.height as f64);
    // crop width giving horizontal fov `f`: w = 2 fx tan(f/2)
    let width_for = |deg: f64| 2.0 * k.fx * (deg.to_radians() / 2.0).tan();
    let w_min = width_for(lo).max(width / MAX_RESIZE);
    let w_max = width_for(hi).min(width);
    if w_min > w_max + 1e-9 {
        return Err(Error::Infeasible(format!(
            "fov {lo}..{hi} deg needs crop widths {:.3}..{:.3}, allowed {:.3}..{width}",
            width_for(lo),
            width_for(hi),
            width / MAX_RESIZE
        )));
    }
    let fov_of = |w: f64| 2.0 * (w / (2.0 * k.fx)).atan().to_degrees();
    let (f_lo, f_hi) = (fov_of(w_min), fov_of(w_max.max(w_min)));
    let mut rng = rng_for(&[seed, 0xC409]);
    let fov = if f_hi > f_lo { rng.random_range(f_lo..=f_hi) } else { f_lo };
    let w = width_for(fov).clamp(w_min, w_max.max(w_min)).min(width);
    let h = (w * height / width).min(height);
    let x0 = if width - w > 0.0 { rng.random_range(0.0..=width - w) } else { 0.0 };
    let y0 = if height - h > 0.0 { rng.random_range(0.0..=height - h) } else { 0.0 };
    let params = CropResizeParams {
        rect: CropRect { x0, y0, w, h },
        out_width: k.width,
        out_height: k.height,
    };
    params.validate(k.width, k.height)?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{RelativeMotion, Vec3};
    use crate::synthgen::{flow_from_depth_motion, DepthMap};
    use proptest::prelude::*;

    fn k640() -> CameraIntrinsics {
        CameraIntrinsics::new(320.0, 320.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn plane_sample(k: &CameraIntrinsics) -> Sample {
        // tilted plane: depth varies smoothly across the image
        let mut depth = DepthMap::constant(k.width, k.height, 1.0);
        for y in 0..k.height {
            for x in 0..k.width {
                depth.data[y * k.width + x] = 6.0 + 0.03 * x as f64 + 0.05 * y as f64;
            }
        }
        let motion = RelativeMotion::new(Vec3::new(0.1, -0.05, 0.3), Vec3::new(0.01, 0.02, -0.01)).unwrap();
        let (flow, valid_mask) = flow_from_depth_motion(&depth, &motion, k).unwrap();
        Sample {
            flow,
            motion,
            intrinsics: *k,
            valid_mask,
        }
    }

    #[test]
    fn il_examples() {
        let il = make_il(&k640());
        assert_eq!(il.get(320, 240), (0.0, 0.0));
        assert_eq!(il.get(0, 0), (-1.0, -0.75));
        let k2 = CameraIntrinsics { fx: 640.0, ..k640() };
        assert_eq!(make_il(&k2).get(0, 0).0, -0.5);
    }

    #[test]
    fn il_is_strictly_monotone() {
        let il = make_il(&CameraIntrinsics::desk());
        for y in 0..il.height {
            for x in 1..il.width {
                assert!(il.get(x, y).0 > il.get(x - 1, y).0);
            }
        }
        for y in 1..il.height {
            for x in 0..il.width {
                assert!(il.get(x, y).1 > il.get(x, y - 1).1);
            }
        }
    }

    #[test]
    fn full_frame_rcr_is_identity() {
        let k = CameraIntrinsics::desk();
        let s = plane_sample(&k);
        let il = make_il(&k);
        let (out, out_il) = rcr(&s, &il, &CropResizeParams::identity(64, 48)).unwrap();
        assert_eq!(out, s);
        assert_eq!(out_il, il);
    }

    #[test]
    fn half_crop_doubles_flow_and_focal() {
        let k = CameraIntrinsics::desk();
        // constant flow field so interpolation is exact
        let s = Sample {
            flow: FlowField::from_data(64, 48, [0.7, -0.3].repeat(64 * 48)).unwrap(),
            motion: RelativeMotion::identity(),
            intrinsics: k,
            valid_mask: ValidMask::all_valid(64, 48),
        };
        let params = CropResizeParams {
            rect: CropRect { x0: 16.0, y0: 12.0, w: 32.0, h: 24.0 },
            out_width: 64,
            out_height: 48,
        };
        let (out, _) = rcr(&s, &make_il(&k), &params).unwrap();
        assert_eq!(out.intrinsics.fx, 64.0);
        assert_eq!(out.intrinsics.fy, 64.0);
        assert_eq!((out.intrinsics.ox, out.intrinsics.oy), (32.0, 24.0));
        for px in out.flow.data.chunks_exact(2) {
            assert!((px[0] - 1.4).abs() < 1e-12 && (px[1] + 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_crops_are_rejected() {
        let k = CameraIntrinsics::desk();
        let s = plane_sample(&k);
        let il = make_il(&k);
        let exits = CropResizeParams {
            rect: CropRect { x0: 40.0, y0: 0.0, w: 32.0, h: 24.0 },
            out_width: 64,
            out_height: 48,
        };
        assert!(matches!(rcr(&s, &il, &exits), Err(Error::InvalidCrop(_))));
        let too_small = CropResizeParams {
            rect: CropRect { x0: 0.0, y0: 0.0, w: 20.0, h: 15.0 },
            out_width: 64,
            out_height: 48,
        };
        assert!(matches!(rcr(&s, &il, &too_small), Err(Error::InvalidCrop(_))));
        let shrink = CropResizeParams { out_width: 32, out_height: 24, ..CropResizeParams::identity(64, 48) };
        assert!(matches!(rcr(&s, &il, &shrink), Err(Error::InvalidCrop(_))));
    }

    #[test]
    fn fov_90_on_90_camera_is_unit_scale() {
        let p = sample_rcr_params(&CameraIntrinsics::desk(), 3, (90.0, 90.0)).unwrap();
        assert!((p.scale_x() - 1.0).abs() < 1e-9 && (p.scale_y() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sampled_fov_stays_in_range() {
        let k = CameraIntrinsics::desk();
        for seed in 0..1000 {
            let p = sample_rcr_params(&k, seed, (40.0, 90.0)).unwrap();
            let fov = p.effective_intrinsics(&k).fov_x_deg();
            assert!((40.0 - 1e-9..=90.0 + 1e-9).contains(&fov), "seed {seed}: {fov}");
            p.validate(64, 48).unwrap();
        }
        assert_eq!(sample_rcr_params(&k, 17, (40.0, 90.0)).unwrap(), sample_rcr_params(&k, 17, (40.0, 90.0)).unwrap());
    }

    #[test]
    fn unreachable_fov_is_infeasible() {
        // a 90 degree camera cannot be narrowed to 20 degrees with factor 2.5
        let r = sample_rcr_params(&CameraIntrinsics::desk(), 0, (10.0, 20.0));
        assert!(matches!(r, Err(Error::Infeasible(_))));
        assert!(sample_rcr_params(&CameraIntrinsics::desk(), 0, (30.0, 130.0)).is_err());
    }

    #[test]
    fn rcr_flow_matches_recomputed_flow() {
        let k = k640();
        let mut depth = DepthMap::constant(640, 480, 1.0);
        for y in 0..480 {
            for x in 0..640 {
                depth.data[y * 640 + x] = 8.0 + 0.004 * x as f64 + 0.006 * y as f64;
            }
        }
        let motion = RelativeMotion::new(Vec3::new(0.2, 0.1, 0.5), Vec3::new(0.01, -0.02, 0.005)).unwrap();
        let (flow, valid_mask) = flow_from_depth_motion(&depth, &motion, &k).unwrap();
        let sample = Sample { flow, motion, intrinsics: k, valid_mask };
        let params = sample_rcr_params(&k, 5, (40.0, 90.0)).unwrap();
        let (out, _) = rcr(&sample, &make_il(&k), &params).unwrap();
        let ek = out.intrinsics;
        // depth seen by the effective camera at each output pixel
        let r = params.rect;
        let mut ed = DepthMap::constant(ek.width, ek.height, 1.0);
        for v in 0..ek.height {
            for u in 0..ek.width {
                let sx = r.x0 + u as f64 * r.w / ek.width as f64;
                let sy = r.y0 + v as f64 * r.h / ek.height as f64;
                ed.data[v * ek.width + u] = 8.0 + 0.004 * sx + 0.006 * sy;
            }
        }
        let (expected, mask) = flow_from_depth_motion(&ed, &motion, &ek).unwrap();
        let mut worst: f64 = 0.0;
        for v in 1..ek.height - 1 {
            for u in 1..ek.width - 1 {
                if mask.get(u, v) && out.valid_mask.get(u, v) {
                    let (a, b) = (out.flow.get(u, v), expected.get(u, v));
                    worst = worst.max((a.0 - b.0).abs()).max((a.1 - b.1).abs());
                }
            }
        }
        assert!(worst < 0.1, "{worst}");
    }

    proptest! {
        #[test]
        fn rcr_il_matches_effective_camera(seed in 0u64..10_000) {
            let k = CameraIntrinsics::desk();
            let s = plane_sample(&k);
            let params = sample_rcr_params(&k, seed, (40.0, 90.0)).unwrap();
            let (out, il) = rcr(&s, &make_il(&k), &params).unwrap();
            prop_assert!(il.max_abs_diff(&make_il(&out.intrinsics)) < 1e-6);
        }
    }
}
