//! Training objectives with analytic gradients.
//!
//! The motion loss is a translation term plus `||r_hat - r||_2` on the so(3)
//! vectors. Translation is compared either with scale (`Full`) or up to a
//! positive scale (`Cos`, `Norm`). The joint objective adds `lambda` times the
//! mean L1 flow error.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::geometry::{RelativeMotion, Vec3};
use crate::synthgen::{FlowField, ValidMask};

/// Guard against division by zero in the up-to-scale terms.
pub const EPS: f64 = 1e-6;
pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossVariant {
    /// `||t_hat - t||`
    Full,
    /// `1 - cos(t_hat, t)`
    Cos,
    /// The raw cosine similarity `cos(t_hat, t)`. Minimizing it drives the
    /// prediction anti-parallel to the label; kept for reproducing that form.
    CosPrinted,
    /// `||t_hat / |t_hat| - t / |t|||`
    Norm,
}

impl LossVariant {
    pub fn is_up_to_scale(self) -> bool {
        !matches!(self, LossVariant::Full)
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "cos" => Ok(Self::Cos),
            "cos-printed" => Ok(Self::CosPrinted),
            "norm" => Ok(Self::Norm),
            other => Err(invalid("loss variant", other.to_string())),
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Cos => "cos",
            Self::CosPrinted => "cos-printed",
            Self::Norm => "norm",
        })
    }
}

/// Components of the joint loss. `total = lambda * flow_term +
/// translation_term + rotation_term`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValue {
    pub total: f64,
    pub translation_term: f64,
    pub rotation_term: f64,
    pub flow_term: f64,
}

impl LossValue {
    pub fn motion(&self) -> f64 {
        self.translation_term + self.rotation_term
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.translation_term, self.rotation_term, self.flow_term]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Motion loss with gradients w.r.t. the predicted translation and rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionLoss {
    pub translation_term: f64,
    pub rotation_term: f64,
    pub grad_translation: Vec3,
    pub grad_rotation: Vec3,
}

impl MotionLoss {
    pub fn value(&self) -> f64 {
        self.translation_term + self.rotation_term
    }
}

/// `||a - b||_2` and its gradient w.r.t. `a` (zero at `a = b`).
fn distance(a: &Vec3, b: &Vec3) -> (f64, Vec3) {
    let d = a - b;
    let n = d.norm();
    if n > 0.0 {
        (n, d / n)
    } else {
        (0.0, Vec3::zeros())
    }
}

/// `v / max(|v|, eps)` and its Jacobian-transpose product `J^T g`.
fn guarded_unit(v: &Vec3) -> (Vec3, impl Fn(&Vec3) -> Vec3) {
    let n = v.norm();
    let u = if n > EPS { v / n } else { v / EPS };
    let big = n > EPS;
    let back = move |g: &Vec3| -> Vec3 {
        if big {
            (g - u * u.dot(g)) / n
        } else {
            g / EPS
        }
    };
    (u, back)
}

fn rotation_part(pred: &RelativeMotion, label: &RelativeMotion) -> (f64, Vec3) {
    distance(&pred.rotation, &label.rotation)
}

pub fn motion_loss_full(pred: &RelativeMotion, label: &RelativeMotion) -> MotionLoss {
    let (tt, gt) = distance(&pred.translation, &label.translation);
    let (rt, gr) = rotation_part(pred, label);
    MotionLoss {
        translation_term: tt,
        rotation_term: rt,
        grad_translation: gt,
        grad_rotation: gr,
    }
}

/// Cosine similarity `t_hat . t / max(|t_hat||t|, eps)` and its gradient.
fn cosine(pred: &Vec3, label: &Vec3) -> (f64, Vec3) {
    let np = pred.norm();
    let nl = label.norm();
    let denom = np * nl;
    if denom > EPS {
        let c = pred.dot(label) / denom;
        (c, label / denom - pred * (c / (np * np)))
    } else {
        (pred.dot(label) / EPS, label / EPS)
    }
}

fn motion_loss_cosine(pred: &RelativeMotion, label: &RelativeMotion, printed: bool) -> MotionLoss {
    let (c, gc) = cosine(&pred.translation, &label.translation);
    let (tt, gt) = if printed { (c, gc) } else { (1.0 - c, -gc) };
    let (rt, gr) = rotation_part(pred, label);
    MotionLoss {
        translation_term: tt,
        rotation_term: rt,
        grad_translation: gt,
        grad_rotation: gr,
    }
}

pub fn motion_loss_cos(pred: &RelativeMotion, label: &RelativeMotion) -> MotionLoss {
    motion_loss_cosine(pred, label, false)
}

/// Raw cosine similarity form, see [`LossVariant::CosPrinted`].
pub fn motion_loss_cos_printed(pred: &RelativeMotion, label: &RelativeMotion) -> MotionLoss {
    motion_loss_cosine(pred, label, true)
}

pub fn motion_loss_norm(pred: &RelativeMotion, label: &RelativeMotion) -> MotionLoss {
    let (up, back) = guarded_unit(&pred.translation);
    let (ul, _) = guarded_unit(&label.translation);
    let (tt, gu) = distance(&up, &ul);
    let (rt, gr) = rotation_part(pred, label);
    MotionLoss {
        translation_term: tt,
        rotation_term: rt,
        grad_translation: back(&gu),
        grad_rotation: gr,
    }
}

pub fn motion_loss(variant: LossVariant, pred: &RelativeMotion, label: &RelativeMotion) -> MotionLoss {
    match variant {
        LossVariant::Full => motion_loss_full(pred, label),
        LossVariant::Cos => motion_loss_cos(pred, label),
        LossVariant::CosPrinted => motion_loss_cos_printed(pred, label),
        LossVariant::Norm => motion_loss_norm(pred, label),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowLoss {
    pub value: f64,
    /// Gradient w.r.t. the predicted flow, interleaved like the field.
    pub grad: Vec<f64>,
}

/// Mean over valid pixels of `|du| + |dv|`.
pub fn flow_loss(pred: &FlowField, label: &FlowField, mask: &ValidMask) -> Result<FlowLoss> {
    if pred.width != label.width
        || pred.height != label.height
        || mask.width != pred.width
        || mask.height != pred.height
    {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", label.width, label.height),
            got: format!(
                "pred {}x{}, mask {}x{}",
                pred.width, pred.height, mask.width, mask.height
            ),
        });
    }
    let count = mask.valid_count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let scale = 1.0 / count as f64;
    let mut grad = vec![0.0; pred.data.len()];
    let mut sum = 0.0;
    for (i, &valid) in mask.data.iter().enumerate() {
        if !valid {
            continue;
        }
        for c in 0..2 {
            let d = pred.data[2 * i + c] - label.data[2 * i + c];
            sum += d.abs();
            grad[2 * i + c] = if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            };
        }
    }
    Ok(FlowLoss {
        value: sum * scale,
        grad,
    })
}

/// Flow prediction, label and mask for the flow term of the joint loss.
#[derive(Debug, Clone, Copy)]
pub struct FlowTerm<'a> {
    pub pred: &'a FlowField,
    pub label: &'a FlowField,
    pub mask: &'a ValidMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: LossValue,
    pub grad_translation: Vec3,
    pub grad_rotation: Vec3,
    /// Gradient of `lambda * flow_term` w.r.t. the predicted flow; empty when
    /// no flow term was given.
    pub grad_flow: Vec<f64>,
}

/// `lambda * L_f + L_p` with the translation form chosen by `variant`.
pub fn total_loss(
    flow: Option<FlowTerm<'_>>,
    pred: &RelativeMotion,
    label: &RelativeMotion,
    lambda: f64,
    variant: LossVariant,
) -> Result<TotalLoss> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid("lambda", lambda.to_string()));
    }
    let (flow_term, grad_flow) = match flow {
        Some(f) => {
            let fl = flow_loss(f.pred, f.label, f.mask)?;
            (fl.value, fl.grad.into_iter().map(|g| g * lambda).collect())
        }
        None => (0.0, Vec::new()),
    };
    let m = motion_loss(variant, pred, label);
    Ok(TotalLoss {
        value: LossValue {
            total: lambda * flow_term + m.translation_term + m.rotation_term,
            translation_term: m.translation_term,
            rotation_term: m.rotation_term,
            flow_term,
        },
        grad_translation: m.grad_translation,
        grad_rotation: m.grad_rotation,
        grad_flow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn motion(t: [f64; 3], r: [f64; 3]) -> RelativeMotion {
        RelativeMotion {
            translation: Vec3::from(t),
            rotation: Vec3::from(r),
        }
    }

    #[test]
    fn full_loss_examples() {
        let l = motion(
            [1.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
        );
        assert_eq!(motion_loss_full(&l, &l).value(), 0.0);
        let p = motion([2.0, 0.0, 0.0], [0.1, 0.0, 0.0]);
        assert!((motion_loss_full(&p, &l).value() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cos_loss_examples() {
        let l = motion([0.3, -0.4, 1.2], [0.0, 0.02, 0.0]);
        let scaled = motion([0.9, -1.2, 3.6], [0.0, 0.02, 0.0]);
        assert!(motion_loss_cos(&scaled, &l).value().abs() < 1e-15);
        let a = motion([1.0, 0.0, 0.0], [0.0; 3]);
        let b = motion([0.0, 1.0, 0.0], [0.0; 3]);
        assert!((motion_loss_cos(&b, &a).value() - 1.0).abs() < 1e-15);
        let neg = motion([-1.0, 0.0, 0.0], [0.0; 3]);
        assert!((motion_loss_cos(&neg, &a).value() - 2.0).abs() < 1e-15);
        // printed form is the similarity itself
        assert!((motion_loss_cos_printed(&neg, &a).value() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn norm_loss_examples() {
        let l = motion([1.0, 0.0, 0.0], [0.0, 0.0, 0.3]);
        let p = motion([2.0, 0.0, 0.0], [0.0, 0.0, 0.3]);
        assert_eq!(motion_loss_norm(&p, &l).value(), 0.0);
        let p = motion([0.0, 1.0, 0.0], [0.0, 0.0, 0.3]);
        assert!((motion_loss_norm(&p, &l).value() - 2f64.sqrt()).abs() < 1e-15);
        let p = motion([0.0, 0.0, 0.0], [0.0, 0.0, 0.3]);
        assert!((motion_loss_norm(&p, &l).value() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn flow_loss_examples() {
        let label = FlowField::from_data(4, 3, (0..24).map(|i| i as f64 * 0.1).collect()).unwrap();
        let mask = ValidMask::all_valid(4, 3);
        assert_eq!(flow_loss(&label, &label, &mask).unwrap().value, 0.0);
        let mut pred = label.clone();
        for px in pred.data.chunks_exact_mut(2) {
            px[0] += 1.0;
        }
        assert!((flow_loss(&pred, &label, &mask).unwrap().value - 1.0).abs() < 1e-12);
        let empty = ValidMask { width: 4, height: 3, data: vec![false; 12] };
        assert!(matches!(flow_loss(&pred, &label, &empty), Err(Error::EmptyMask)));
    }

    #[test]
    fn total_loss_assembly() {
        let label = motion([0.2, 0.1, 0.9], [0.01, 0.0, -0.02]);
        let pred = motion([0.1, 0.3, 0.7], [0.0, 0.03, -0.02]);
        let fl = FlowField::from_data(2, 2, vec![0.5; 8]).unwrap();
        let fp = FlowField::from_data(2, 2, vec![1.0, 0.5, 0.5, 0.0, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let mask = ValidMask::all_valid(2, 2);
        let term = FlowTerm { pred: &fp, label: &fl, mask: &mask };
        for variant in [LossVariant::Full, LossVariant::Cos, LossVariant::Norm] {
            let perfect = total_loss(
                Some(FlowTerm { pred: &fl, label: &fl, mask: &mask }),
                &label,
                &label,
                0.1,
                variant,
            )
            .unwrap();
            assert!(perfect.value.total.abs() < 1e-12);

            let no_flow = total_loss(Some(term), &pred, &label, 0.0, variant).unwrap();
            assert_eq!(no_flow.value.total, motion_loss(variant, &pred, &label).value());

            let joint = total_loss(Some(term), &pred, &label, 1.0, variant).unwrap();
            let m = motion_loss(variant, &pred, &label);
            // flow term: two half-pixel offsets over four pixels
            assert!((joint.value.flow_term - 0.25).abs() < 1e-15);
            let expected = 0.25 + m.translation_term + m.rotation_term;
            assert!((joint.value.total - expected).abs() < 1e-12);
        }
        assert!(total_loss(None, &pred, &label, -1.0, LossVariant::Full).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [LossVariant::Full, LossVariant::Cos, LossVariant::CosPrinted, LossVariant::Norm] {
            assert_eq!(v.to_string().parse::<LossVariant>().unwrap(), v);
        }
        assert!("l2".parse::<LossVariant>().is_err());
    }
}
