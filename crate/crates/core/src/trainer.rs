//! Seeded training loop and the three desk-scale experiments.
//!
//! Batch composition, augmentation and noise are all keyed by
//! `(seed, step, slot)`, and per-sample gradients are summed in slot order,
//! so a run is bitwise reproducible and can be stopped and resumed at any
//! step without changing its result.

use std::fmt::{self, Write as _};
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::RngExt;
use rayon::prelude::*;

use crate::augment::{make_il, rcr, sample_rcr_params};
use crate::error::{invalid, Error, Result};
use crate::losses::{total_loss, FlowTerm, LossValue, LossVariant, DEFAULT_LAMBDA};
use crate::model::{stack_input, PoseNet, PoseNetConfig};
use crate::seed::{derive_seed, rng_for};
use crate::synthgen::{corrupt_flow, generate_split, MotionPattern, NoiseModel, Sample, SceneConfig};

const TAG_BATCH: u64 = 0xBA7C;
const TAG_AUG: u64 = 0xA06;
const TAG_EVAL: u64 = 0xE7A1;
const TAG_RCR_TEST: u64 = 0x7E57;
/// Per-step gradient accumulators; samples within one are processed in order.
const GRAD_CHUNKS: usize = 4;
const STATE_MAGIC: &[u8; 8] = b"FVOTRST1";
/// First environment id of held-out splits; training uses ids below it.
pub const HELD_OUT_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(invalid("optimizer", other.to_string())),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    /// Fractions of `iterations` at which the rate is multiplied by `decay_factor`.
    pub milestones: Vec<f64>,
    pub variant: LossVariant,
    pub lambda: f64,
    pub use_rcr: bool,
    pub use_il: bool,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Record the curve every this many steps (and at the last step).
    pub eval_every: usize,
    /// Flow is divided by this before entering the network.
    pub flow_scale: f64,
    /// Horizontal field-of-view range of random crops, degrees.
    pub rcr_fov_deg: (f64, f64),
    /// Probability that a training sample is cropped when `use_rcr` is set.
    pub rcr_probability: f64,
    /// Corrupt input flow and charge the flow term against the clean flow.
    pub noise: Option<NoiseModel>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 32,
            learning_rate: 1e-4,
            decay_factor: 0.2,
            milestones: vec![0.5, 0.875],
            variant: LossVariant::Norm,
            lambda: DEFAULT_LAMBDA,
            use_rcr: false,
            use_il: false,
            seed: 0,
            optimizer: Optimizer::Adam,
            clip_norm: Some(5.0),
            eval_every: 500,
            flow_scale: 2.0,
            rcr_fov_deg: (40.0, 90.0),
            rcr_probability: 1.0,
            noise: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| invalid("config value", format!("{key}: cannot parse {value:?}")))
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok((parse(key, a)?, parse(key, b)?)),
        _ => Err(invalid(
            "config value",
            format!("{key}: expected two comma-separated numbers, got {value:?}"),
        )),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate", self.learning_rate.to_string()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(invalid("decay_factor", self.decay_factor.to_string()));
        }
        let mut prev = 0.0;
        for &m in &self.milestones {
            if !(m > prev && m <= 1.0) {
                return Err(invalid(
                    "milestones",
                    format!("{:?} must be strictly increasing in (0, 1]", self.milestones),
                ));
            }
            prev = m;
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda", self.lambda.to_string()));
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every", "must be positive"));
        }
        if !(self.flow_scale > 0.0 && self.flow_scale.is_finite()) {
            return Err(invalid("flow_scale", self.flow_scale.to_string()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(invalid("clip_norm", c.to_string()));
            }
        }
        if !(0.0..=1.0).contains(&self.rcr_probability) {
            return Err(invalid("rcr_probability", self.rcr_probability.to_string()));
        }
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        Ok(())
    }

    /// Learning rate used for the update at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let frac = step as f64 / self.iterations.max(1) as f64;
        let passed = self.milestones.iter().filter(|&&m| frac >= m).count();
        let mut lr = self.learning_rate;
        for _ in 0..passed {
            lr *= self.decay_factor;
        }
        lr
    }

    /// `(key, value)` pairs in a stable order; accepted back by [`set`](Self::set).
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let milestones: Vec<String> = self.milestones.iter().map(|m| m.to_string()).collect();
        let (sigma, dropout) = self.noise.map_or((0.0, 0.0), |n| (n.sigma, n.dropout));
        vec![
            ("iterations", self.iterations.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("decay_factor", self.decay_factor.to_string()),
            ("milestones", milestones.join(",")),
            ("variant", self.variant.to_string()),
            ("lambda", self.lambda.to_string()),
            ("use_rcr", self.use_rcr.to_string()),
            ("use_il", self.use_il.to_string()),
            ("seed", self.seed.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("clip_norm", self.clip_norm.unwrap_or(0.0).to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("flow_scale", self.flow_scale.to_string()),
            ("rcr_fov_deg", format!("{},{}", self.rcr_fov_deg.0, self.rcr_fov_deg.1)),
            ("rcr_probability", self.rcr_probability.to_string()),
            ("noise_sigma", sigma.to_string()),
            ("noise_dropout", dropout.to_string()),
        ]
    }

    /// Sets one field from its textual form. Returns `Ok(false)` for keys
    /// that are not training keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "iterations" => self.iterations = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "decay_factor" => self.decay_factor = parse(key, value)?,
            "milestones" => {
                self.milestones = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "variant" => self.variant = value.trim().parse()?,
            "lambda" => self.lambda = parse(key, value)?,
            "use_rcr" => self.use_rcr = parse(key, value)?,
            "use_il" => self.use_il = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "optimizer" => self.optimizer = value.trim().parse()?,
            "clip_norm" => {
                let c: f64 = parse(key, value)?;
                self.clip_norm = (c > 0.0).then_some(c);
            }
            "eval_every" => self.eval_every = parse(key, value)?,
            "flow_scale" => self.flow_scale = parse(key, value)?,
            "rcr_fov_deg" => self.rcr_fov_deg = parse_pair(key, value)?,
            "rcr_probability" => self.rcr_probability = parse(key, value)?,
            "noise_sigma" | "noise_dropout" => {
                let v: f64 = parse(key, value)?;
                let mut n = self.noise.unwrap_or_else(NoiseModel::none);
                if key == "noise_sigma" {
                    n.sigma = v;
                } else {
                    n.dropout = v;
                }
                self.noise = (n.sigma > 0.0 || n.dropout > 0.0).then_some(n);
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            if !cfg.set(k.trim(), v).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })? {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("unknown key {:?}", k.trim()),
                });
            }
        }
        Ok(cfg)
    }
}

/// One row of a loss curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRecord {
    pub step: usize,
    /// Mean training-batch loss since the previous record.
    pub train: LossValue,
    /// Loss on each held-out split, in `LossCurve::test_names` order.
    pub test: Vec<LossValue>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub test_names: Vec<String>,
    pub records: Vec<CurveRecord>,
}

impl LossCurve {
    /// Tab-separated table with a header row. Each loss contributes its
    /// total, translation and rotation terms.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("step\ttrain\ttrain_translation\ttrain_rotation");
        for name in &self.test_names {
            let _ = write!(s, "\t{name}\t{name}_translation\t{name}_rotation");
        }
        s.push('\n');
        for r in &self.records {
            let _ = write!(
                s,
                "{}\t{}\t{}\t{}",
                r.step, r.train.total, r.train.translation_term, r.train.rotation_term
            );
            for t in &r.test {
                let _ = write!(s, "\t{}\t{}\t{}", t.total, t.translation_term, t.rotation_term);
            }
            s.push('\n');
        }
        s
    }

    pub fn last(&self) -> Option<&CurveRecord> {
        self.records.last()
    }
}

/// A held-out split evaluated at every curve record.
#[derive(Debug, Clone, Copy)]
pub struct TestSet<'a> {
    pub name: &'a str,
    pub samples: &'a [Sample],
}

fn add_loss(acc: &mut LossValue, v: &LossValue) {
    acc.total += v.total;
    acc.translation_term += v.translation_term;
    acc.rotation_term += v.rotation_term;
    acc.flow_term += v.flow_term;
}

fn scale_loss(v: &LossValue, s: f64) -> LossValue {
    LossValue {
        total: v.total * s,
        translation_term: v.translation_term * s,
        rotation_term: v.rotation_term * s,
        flow_term: v.flow_term * s,
    }
}

/// Network input and loss for one sample. `aug_seed` enables the configured
/// random crop; `noise_seed` keys the flow corruption.
fn sample_loss(
    net: &PoseNet,
    sample: &Sample,
    cfg: &TrainConfig,
    aug_seed: Option<u64>,
    noise_seed: u64,
    grad: Option<&mut [f64]>,
) -> Result<LossValue> {
    let cropped;
    let mut sample = sample;
    if let Some(seed) = aug_seed {
        let mut rng = rng_for(&[seed, 0]);
        if cfg.rcr_probability >= 1.0 || rng.random_bool(cfg.rcr_probability) {
            let params = sample_rcr_params(&sample.intrinsics, seed, cfg.rcr_fov_deg)?;
            cropped = rcr(sample, &make_il(&sample.intrinsics), &params)?.0;
            sample = &cropped;
        }
    }
    let noisy = match &cfg.noise {
        Some(n) => Some(corrupt_flow(&sample.flow, n, noise_seed)?),
        None => None,
    };
    let flow_in = noisy.as_ref().unwrap_or(&sample.flow);
    let il = cfg.use_il.then(|| make_il(&sample.intrinsics));
    let input = stack_input(flow_in, il.as_ref(), cfg.flow_scale)?;
    let flow_term = noisy.as_ref().map(|pred| FlowTerm {
        pred,
        label: &sample.flow,
        mask: &sample.valid_mask,
    });
    match grad {
        Some(grad) => {
            let (pred, cache) = net.forward_cached(&input)?;
            let loss = total_loss(flow_term, &pred, &sample.motion, cfg.lambda, cfg.variant)?;
            net.backward(&cache, &loss.grad_translation, &loss.grad_rotation, grad)?;
            Ok(loss.value)
        }
        None => {
            let pred = net.forward(&input)?;
            Ok(total_loss(flow_term, &pred, &sample.motion, cfg.lambda, cfg.variant)?.value)
        }
    }
}

/// Mean loss of `net` over `samples` without augmentation.
pub fn evaluate(net: &PoseNet, samples: &[Sample], cfg: &TrainConfig) -> Result<LossValue> {
    if samples.is_empty() {
        return Err(invalid("evaluation set", "empty"));
    }
    let losses: Vec<LossValue> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| sample_loss(net, s, cfg, None, derive_seed(&[cfg.seed, TAG_EVAL, i as u64]), None))
        .collect::<Result<_>>()?;
    let mut acc = LossValue::default();
    for l in &losses {
        add_loss(&mut acc, l);
    }
    Ok(scale_loss(&acc, 1.0 / samples.len() as f64))
}

/// A copy of `samples` with one fixed random crop per sample.
pub fn rcr_test_split(samples: &[Sample], fov_deg: (f64, f64), seed: u64) -> Result<Vec<Sample>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let params = sample_rcr_params(&s.intrinsics, derive_seed(&[seed, TAG_RCR_TEST, i as u64]), fov_deg)?;
            Ok(rcr(s, &make_il(&s.intrinsics), &params)?.0)
        })
        .collect()
}

/// A training run that can be advanced in pieces, saved and restored.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    net: PoseNet,
    step: usize,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    window: LossValue,
    window_len: usize,
    curve: LossCurve,
}

impl Trainer {
    pub fn new(net: PoseNet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let expected = if cfg.use_il { 4 } else { 2 };
        if net.config().in_channels != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} input channels (use_il = {})", cfg.use_il),
                got: net.config().in_channels.to_string(),
            });
        }
        let n = net.param_count();
        Ok(Self {
            cfg,
            net,
            step: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            window: LossValue::default(),
            window_len: 0,
            curve: LossCurve::default(),
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.iterations
    }

    pub fn net(&self) -> &PoseNet {
        &self.net
    }

    pub fn curve(&self) -> &LossCurve {
        &self.curve
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn into_parts(self) -> (PoseNet, LossCurve) {
        (self.net, self.curve)
    }

    /// Dataset indices of the batch at `step`: consecutive slices of a
    /// per-epoch permutation.
    fn batch_indices(&self, n: usize, step: usize, perm: &mut Option<(usize, Vec<usize>)>) -> Vec<usize> {
        let b = self.cfg.batch_size;
        (0..b)
            .map(|slot| {
                let global = step * b + slot;
                let epoch = global / n;
                if perm.as_ref().map(|p| p.0) != Some(epoch) {
                    let mut order: Vec<usize> = (0..n).collect();
                    order.shuffle(&mut rng_for(&[self.cfg.seed, TAG_BATCH, epoch as u64]));
                    *perm = Some((epoch, order));
                }
                perm.as_ref().expect("set above").1[global % n]
            })
            .collect()
    }

    /// Runs steps until `until` (capped at the configured iterations).
    pub fn run(&mut self, dataset: &[Sample], test_sets: &[TestSet<'_>], until: usize) -> Result<()> {
        if dataset.is_empty() {
            return Err(invalid("dataset", "empty"));
        }
        let names: Vec<String> = test_sets.iter().map(|t| t.name.to_string()).collect();
        if self.curve.records.is_empty() {
            self.curve.test_names = names;
        } else if self.curve.test_names != names {
            return Err(Error::Mismatch(format!(
                "test sets {:?} differ from the run's {:?}",
                names, self.curve.test_names
            )));
        }
        let until = until.min(self.cfg.iterations);
        let mut perm = None;
        let np = self.net.param_count();
        while self.step < until {
            let step = self.step;
            let indices = self.batch_indices(dataset.len(), step, &mut perm);
            let net = &self.net;
            let cfg = &self.cfg;
            // fixed chunking keeps the reduction order independent of thread count
            let chunk = indices.len().div_ceil(GRAD_CHUNKS);
            let partial: Vec<(Vec<f64>, LossValue)> = indices
                .par_chunks(chunk)
                .enumerate()
                .map(|(c, idx)| {
                    let mut g = vec![0.0; np];
                    let mut loss = LossValue::default();
                    for (i, &sample) in idx.iter().enumerate() {
                        let slot = (c * chunk + i) as u64;
                        let key = derive_seed(&[cfg.seed, TAG_AUG, step as u64, slot]);
                        let aug = cfg.use_rcr.then_some(key);
                        let l = sample_loss(net, &dataset[sample], cfg, aug, key ^ 1, Some(&mut g))?;
                        add_loss(&mut loss, &l);
                    }
                    Ok((g, loss))
                })
                .collect::<Result<_>>()?;
            let inv = 1.0 / indices.len() as f64;
            let mut partial = partial.into_iter();
            let (mut grad, mut batch_loss) = partial.next().expect("batch is non-empty");
            for (g, l) in partial {
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                add_loss(&mut batch_loss, &l);
            }
            let batch_loss = scale_loss(&batch_loss, inv);
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: batch_loss.total,
                });
            }
            grad.iter_mut().for_each(|g| *g *= inv);
            if let Some(c) = self.cfg.clip_norm {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > c {
                    let s = c / norm;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }
            self.apply_update(&grad, step);
            if self.net.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    loss: f64::NAN,
                });
            }
            self.step += 1;
            add_loss(&mut self.window, &batch_loss);
            self.window_len += 1;
            if self.step.is_multiple_of(self.cfg.eval_every) || self.step == self.cfg.iterations {
                let train = scale_loss(&self.window, 1.0 / self.window_len as f64);
                let test = test_sets
                    .iter()
                    .map(|t| evaluate(&self.net, t.samples, &self.cfg))
                    .collect::<Result<Vec<_>>>()?;
                if test.iter().any(|t| !t.is_finite()) {
                    return Err(Error::Diverged {
                        step,
                        loss: f64::NAN,
                    });
                }
                self.curve.records.push(CurveRecord {
                    step: self.step,
                    train,
                    test,
                });
                self.window = LossValue::default();
                self.window_len = 0;
            }
        }
        Ok(())
    }

    fn apply_update(&mut self, grad: &[f64], step: usize) {
        let lr = self.cfg.lr_at(step);
        let params = self.net.params_mut();
        match self.cfg.optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let t = (step + 1) as i32;
                let c1 = 1.0 - B1.powi(t);
                let c2 = 1.0 - B2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grad)
                    .zip(self.first_moment.iter_mut())
                    .zip(self.second_moment.iter_mut())
                {
                    *m = B1 * *m + (1.0 - B1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                }
            }
        }
    }

    /// Serializes the full training state, network included.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let cfg = self.cfg.to_text();
        w.write_all(STATE_MAGIC)?;
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(cfg.as_bytes())?;
        let put = |w: &mut W, v: u64| w.write_all(&v.to_le_bytes());
        put(&mut w, self.step as u64)?;
        put(&mut w, self.window_len as u64)?;
        write_loss(&mut w, &self.window)?;
        put(&mut w, self.first_moment.len() as u64)?;
        for x in self.first_moment.iter().chain(&self.second_moment) {
            w.write_all(&x.to_le_bytes())?;
        }
        put(&mut w, self.curve.test_names.len() as u64)?;
        for name in &self.curve.test_names {
            put(&mut w, name.len() as u64)?;
            w.write_all(name.as_bytes())?;
        }
        put(&mut w, self.curve.records.len() as u64)?;
        for r in &self.curve.records {
            put(&mut w, r.step as u64)?;
            write_loss(&mut w, &r.train)?;
            for t in &r.test {
                write_loss(&mut w, t)?;
            }
        }
        self.net.write_checkpoint(w)
    }

    /// Restores a state written by [`save`](Self::save). The stored config
    /// must equal `cfg` except for `iterations`-independent fields, which
    /// are compared as text.
    pub fn load<R: Read>(mut r: R, cfg: &TrainConfig) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != STATE_MAGIC {
            return Err(Error::Format("not a training-state file".into()));
        }
        let len = read_u64(&mut r)? as usize;
        let text = read_string(&mut r, len)?;
        if text != cfg.to_text() {
            return Err(Error::Mismatch("training config differs from the saved run".into()));
        }
        let step = read_u64(&mut r)? as usize;
        let window_len = read_u64(&mut r)? as usize;
        let window = read_loss(&mut r)?;
        let n = read_u64(&mut r)? as usize;
        let mut moments = vec![0.0; 2 * n];
        for x in &mut moments {
            *x = read_f64(&mut r)?;
        }
        let second_moment = moments.split_off(n);
        let names = read_u64(&mut r)? as usize;
        let test_names = (0..names)
            .map(|_| {
                let len = read_u64(&mut r)? as usize;
                read_string(&mut r, len)
            })
            .collect::<Result<Vec<_>>>()?;
        let count = read_u64(&mut r)? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let step = read_u64(&mut r)? as usize;
            let train = read_loss(&mut r)?;
            let test = (0..names).map(|_| read_loss(&mut r)).collect::<Result<_>>()?;
            records.push(CurveRecord { step, train, test });
        }
        let net = PoseNet::read_checkpoint(r)?;
        if net.param_count() != n {
            return Err(Error::Format("optimizer state does not match the network".into()));
        }
        let mut t = Self::new(net, cfg.clone())?;
        t.step = step;
        t.window = window;
        t.window_len = window_len;
        t.first_moment = moments;
        t.second_moment = second_moment;
        t.curve = LossCurve { test_names, records };
        Ok(t)
    }
}

fn write_loss<W: Write>(w: &mut W, l: &LossValue) -> Result<()> {
    for v in [l.total, l.translation_term, l.rotation_term, l.flow_term] {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    if len > 1 << 20 {
        return Err(Error::Format(format!("string of {len} bytes")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Format(e.to_string()))
}

fn read_loss<R: Read>(r: &mut R) -> Result<LossValue> {
    Ok(LossValue {
        total: read_f64(r)?,
        translation_term: read_f64(r)?,
        rotation_term: read_f64(r)?,
        flow_term: read_f64(r)?,
    })
}

/// Trains `net` on `dataset` for `cfg.iterations` steps.
pub fn train(net: PoseNet, dataset: &[Sample], test_sets: &[TestSet<'_>], cfg: &TrainConfig) -> Result<(PoseNet, LossCurve)> {
    if dataset.is_empty() {
        return Err(invalid("dataset", "empty"));
    }
    let mut t = Trainer::new(net, cfg.clone())?;
    t.run(dataset, test_sets, cfg.iterations)?;
    Ok(t.into_parts())
}

/// A fresh network shaped like `base` with input channels matching
/// `cfg.use_il`, seeded from `seed`.
pub fn new_net(base: &PoseNetConfig, cfg: &TrainConfig, seed: u64) -> Result<PoseNet> {
    PoseNet::new(PoseNetConfig {
        seed,
        in_channels: if cfg.use_il { 4 } else { 2 },
        ..base.clone()
    })
}

/// Data and schedule shared by the experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub pattern: MotionPattern,
    pub train: TrainConfig,
    /// Network shape; input channels follow `train.use_il`.
    pub net: PoseNetConfig,
    /// Training environments are ids `0..train_environments`.
    pub train_environments: usize,
    /// Held-out environments are ids `HELD_OUT_BASE + 0..test_environments`.
    pub test_environments: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Training-set sizes of the data-quantity experiment.
    pub sizes: Vec<usize>,
    /// Factor applied to depth and translation ranges of the shifted test
    /// split in the up-to-scale experiment.
    pub test_scale: f64,
    /// Cap on training samples re-evaluated for the final train loss.
    pub train_eval_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            pattern: MotionPattern::Full6Dof,
            train: TrainConfig::default(),
            net: PoseNetConfig::default(),
            train_environments: 64,
            test_environments: 16,
            train_size: 20_000,
            test_size: 2_000,
            sizes: vec![1_000, 5_000, 20_000],
            test_scale: 3.0,
            train_eval_size: 2_000,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        if self.train_environments == 0 || self.test_environments == 0 {
            return Err(invalid("environments", "train and test counts must be positive"));
        }
        if self.train_environments as u64 >= HELD_OUT_BASE {
            return Err(invalid("train_environments", "overlaps held-out ids"));
        }
        if self.train_size == 0 || self.test_size == 0 || self.train_eval_size == 0 {
            return Err(invalid("sample counts", "must be positive"));
        }
        if !(self.test_scale > 0.0 && self.test_scale.is_finite()) {
            return Err(invalid("test_scale", self.test_scale.to_string()));
        }
        Ok(())
    }

    pub fn train_environment_ids(&self) -> Vec<u64> {
        (0..self.train_environments as u64).collect()
    }

    pub fn test_environment_ids(&self) -> Vec<u64> {
        (0..self.test_environments as u64).map(|i| HELD_OUT_BASE + i).collect()
    }

    fn train_split(&self, n: usize) -> Result<Vec<Sample>> {
        generate_split(&self.scene, &self.train_environment_ids(), n, self.pattern)
    }

    fn test_split(&self, scene: &SceneConfig) -> Result<Vec<Sample>> {
        generate_split(scene, &self.test_environment_ids(), self.test_size, self.pattern)
    }

    fn run_seed(&self, run: u64) -> u64 {
        derive_seed(&[self.train.seed, run])
    }
}

/// Final losses of one trained network.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub net: PoseNet,
    pub curve: LossCurve,
    pub train: LossValue,
    pub test: LossValue,
}

impl RunSummary {
    pub fn gap(&self) -> f64 {
        self.test.total - self.train.total
    }

    pub fn translation_gap(&self) -> f64 {
        self.test.translation_term - self.train.translation_term
    }

    pub fn rotation_gap(&self) -> f64 {
        self.test.rotation_term - self.train.rotation_term
    }
}

fn train_and_summarize(
    label: String,
    base: &PoseNetConfig,
    cfg: &TrainConfig,
    net_seed: u64,
    dataset: &[Sample],
    test: &[Sample],
    train_eval: &[Sample],
) -> Result<RunSummary> {
    let net = new_net(base, cfg, net_seed)?;
    let (net, curve) = train(net, dataset, &[TestSet { name: "test", samples: test }], cfg)?;
    Ok(RunSummary {
        label,
        train: evaluate(&net, train_eval, cfg)?,
        test: evaluate(&net, test, cfg)?,
        net,
        curve,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataQuantityResult {
    pub sizes: Vec<usize>,
    pub runs: Vec<RunSummary>,
}

impl DataQuantityResult {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("size\ttrain\ttest\tgap\n");
        for (n, r) in self.sizes.iter().zip(&self.runs) {
            let _ = writeln!(s, "{n}\t{}\t{}\t{}", r.train.total, r.test.total, r.gap());
        }
        s
    }
}

/// One network per training-set size, all on prefixes of one split and all
/// tested on the same held-out environments.
pub fn experiment_data_quantity(sizes: &[usize], cfg: &ExperimentConfig) -> Result<DataQuantityResult> {
    cfg.validate()?;
    if sizes.len() < 3 {
        return Err(invalid("sizes", "need at least three training-set sizes"));
    }
    if sizes.contains(&0) {
        return Err(invalid("sizes", "size 0"));
    }
    let largest = *sizes.iter().max().expect("non-empty");
    let full = cfg.train_split(largest)?;
    let test = cfg.test_split(&cfg.scene)?;
    let runs = sizes
        .iter()
        .map(|&n| {
            let data = &full[..n];
            let eval = &data[..n.min(cfg.train_eval_size)];
            train_and_summarize(format!("n{n}"), &cfg.net, &cfg.train, cfg.run_seed(0), data, &test, eval)
        })
        .collect::<Result<_>>()?;
    Ok(DataQuantityResult {
        sizes: sizes.to_vec(),
        runs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpToScaleResult {
    pub full: RunSummary,
    pub norm: RunSummary,
}

impl UpToScaleResult {
    /// Translation-term gap of the norm variant over that of the full variant.
    pub fn gap_ratio(&self) -> f64 {
        self.norm.translation_gap() / self.full.translation_gap()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "variant\ttrain_translation\ttest_translation\ttranslation_gap\ttrain_rotation\ttest_rotation\trotation_gap\n",
        );
        for r in [&self.full, &self.norm] {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.label,
                r.train.translation_term,
                r.test.translation_term,
                r.translation_gap(),
                r.train.rotation_term,
                r.test.rotation_term,
                r.rotation_gap()
            );
        }
        s
    }
}

/// Trains the scale-aware and the up-to-scale variant on the same data and
/// tests both on held-out environments whose depths and translations are
/// scaled by `cfg.test_scale`, so flow statistics match training but
/// translation magnitudes do not.
pub fn experiment_up_to_scale(cfg: &ExperimentConfig) -> Result<UpToScaleResult> {
    experiment_variants(cfg, LossVariant::Full, LossVariant::Norm).map(|(full, norm)| UpToScaleResult { full, norm })
}

/// The up-to-scale experiment with any two variants, sharing data and seeds.
pub fn experiment_variants(cfg: &ExperimentConfig, a: LossVariant, b: LossVariant) -> Result<(RunSummary, RunSummary)> {
    cfg.validate()?;
    let data = cfg.train_split(cfg.train_size)?;
    let test = cfg.test_split(&cfg.scene.rescaled(cfg.test_scale))?;
    let eval = &data[..cfg.train_size.min(cfg.train_eval_size)];
    let run = |variant: LossVariant| {
        let tc = TrainConfig {
            variant,
            ..cfg.train.clone()
        };
        train_and_summarize(variant.to_string(), &cfg.net, &tc, cfg.run_seed(0), &data, &test, eval)
    };
    Ok((run(a)?, run(b)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RcrIlRow {
    pub use_rcr: bool,
    pub use_il: bool,
    pub net: PoseNet,
    pub curve: LossCurve,
    /// Loss on the training set, cropped like training data when `use_rcr`.
    pub train: LossValue,
    pub test_rcr: LossValue,
    pub test_fixed: LossValue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RcrIlResult {
    /// Rows in the order (RCR, IL), (RCR, no IL), (no RCR, IL), (no RCR, no IL).
    pub rows: Vec<RcrIlRow>,
}

impl RcrIlResult {
    pub fn row(&self, use_rcr: bool, use_il: bool) -> &RcrIlRow {
        self.rows
            .iter()
            .find(|r| r.use_rcr == use_rcr && r.use_il == use_il)
            .expect("all four combinations present")
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("rcr\til\ttrain\ttest_rcr\ttest_fixed\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                r.use_rcr, r.use_il, r.train.total, r.test_rcr.total, r.test_fixed.total
            );
        }
        s
    }
}

/// The four-way crop-augmentation by intrinsics-layer ablation. All runs
/// share the dataset, the network seed and the fixed crops of the test
/// split.
pub fn experiment_rcr_il(cfg: &ExperimentConfig) -> Result<RcrIlResult> {
    cfg.validate()?;
    let data = cfg.train_split(cfg.train_size)?;
    let test_fixed = cfg.test_split(&cfg.scene)?;
    let test_rcr = rcr_test_split(&test_fixed, cfg.train.rcr_fov_deg, cfg.train.seed)?;
    let eval = &data[..cfg.train_size.min(cfg.train_eval_size)];
    let eval_rcr = rcr_test_split(eval, cfg.train.rcr_fov_deg, derive_seed(&[cfg.train.seed, 1]))?;
    let mut rows = Vec::with_capacity(4);
    for (use_rcr, use_il) in [(true, true), (true, false), (false, true), (false, false)] {
        let tc = TrainConfig {
            use_rcr,
            use_il,
            ..cfg.train.clone()
        };
        let net = new_net(&cfg.net, &tc, cfg.run_seed(0))?;
        let tests = [
            TestSet { name: "test_rcr", samples: &test_rcr },
            TestSet { name: "test_fixed", samples: &test_fixed },
        ];
        let (net, curve) = train(net, &data, &tests, &tc)?;
        rows.push(RcrIlRow {
            use_rcr,
            use_il,
            train: evaluate(&net, if use_rcr { &eval_rcr } else { eval }, &tc)?,
            test_rcr: evaluate(&net, &test_rcr, &tc)?,
            test_fixed: evaluate(&net, &test_fixed, &tc)?,
            net,
            curve,
        });
    }
    Ok(RcrIlResult { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::generate_dataset;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            iterations: 6,
            batch_size: 4,
            eval_every: 2,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn data(n: usize) -> Vec<Sample> {
        generate_dataset(&SceneConfig::default(), n, MotionPattern::Full6Dof).unwrap()
    }

    #[test]
    fn default_schedule() {
        let cfg = TrainConfig {
            iterations: 100_000,
            ..TrainConfig::default()
        };
        let rel = |a: f64, b: f64| ((a - b) / b).abs() < 1e-12;
        assert!(rel(cfg.lr_at(0), 1e-4) && rel(cfg.lr_at(49_999), 1e-4));
        assert!(rel(cfg.lr_at(50_000), 2e-5) && rel(cfg.lr_at(87_499), 2e-5));
        assert!(rel(cfg.lr_at(87_500), 4e-6) && rel(cfg.lr_at(100_000), 4e-6));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            milestones: vec![0.5, 0.5],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = TrainConfig {
            use_rcr: true,
            clip_norm: None,
            noise: Some(NoiseModel::default()),
            variant: LossVariant::CosPrinted,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(matches!(TrainConfig::from_text("batch = 3"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn zero_iterations_leave_net_unchanged() {
        let d = data(4);
        let cfg = TrainConfig {
            iterations: 0,
            ..tiny_cfg()
        };
        let net = new_net(&PoseNetConfig::default(), &cfg, 1).unwrap();
        let (out, curve) = train(net.clone(), &d, &[], &cfg).unwrap();
        assert_eq!(out, net);
        assert!(curve.records.is_empty());
    }

    #[test]
    fn empty_dataset_is_error() {
        let cfg = tiny_cfg();
        assert!(train(new_net(&PoseNetConfig::default(), &cfg, 1).unwrap(), &[], &[], &cfg).is_err());
    }

    #[test]
    fn deterministic_and_resumable() {
        let d = data(10);
        let t = data(3);
        let cfg = TrainConfig {
            use_rcr: true,
            use_il: true,
            noise: Some(NoiseModel::default()),
            ..tiny_cfg()
        };
        let tests = [TestSet { name: "t", samples: &t }];
        let a = train(new_net(&PoseNetConfig::default(), &cfg, 3).unwrap(), &d, &tests, &cfg).unwrap();
        let b = train(new_net(&PoseNetConfig::default(), &cfg, 3).unwrap(), &d, &tests, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, new_net(&PoseNetConfig::default(), &cfg, 3).unwrap());
        assert_eq!(a.1.records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 4, 6]);

        let mut first = Trainer::new(new_net(&PoseNetConfig::default(), &cfg, 3).unwrap(), cfg.clone()).unwrap();
        first.run(&d, &tests, 3).unwrap();
        let mut buf = Vec::new();
        first.save(&mut buf).unwrap();
        let mut resumed = Trainer::load(buf.as_slice(), &cfg).unwrap();
        resumed.run(&d, &tests, cfg.iterations).unwrap();
        assert_eq!(resumed.into_parts(), a);

        let other = TrainConfig { seed: 9, ..cfg };
        assert!(matches!(Trainer::load(buf.as_slice(), &other), Err(Error::Mismatch(_))));
    }

    #[test]
    fn dataset_is_not_mutated() {
        let d = data(6);
        let copy = d.clone();
        let cfg = TrainConfig {
            use_rcr: true,
            ..tiny_cfg()
        };
        train(new_net(&PoseNetConfig::default(), &cfg, 0).unwrap(), &d, &[], &cfg).unwrap();
        assert_eq!(d, copy);
    }

    #[test]
    fn divergence_is_reported() {
        let d = data(4);
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 1e300,
            clip_norm: None,
            variant: LossVariant::Full,
            ..tiny_cfg()
        };
        let r = train(new_net(&PoseNetConfig::default(), &cfg, 0).unwrap(), &d, &[], &cfg);
        assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
    }

    #[test]
    fn channel_count_must_match_il_flag() {
        let cfg = TrainConfig {
            use_il: true,
            ..tiny_cfg()
        };
        let net = new_net(&PoseNetConfig::default(), &TrainConfig::default(), 0).unwrap();
        assert!(Trainer::new(net, cfg).is_err());
    }

    #[test]
    fn experiment_preconditions() {
        let cfg = ExperimentConfig::default();
        assert!(experiment_data_quantity(&[10, 20], &cfg).is_err());
        assert!(experiment_data_quantity(&[0, 10, 20], &cfg).is_err());
        assert!(cfg
            .train_environment_ids()
            .iter()
            .all(|e| !cfg.test_environment_ids().contains(e)));
    }

    #[test]
    fn same_variant_twice_has_no_gap_difference() {
        let cfg = ExperimentConfig {
            train: tiny_cfg(),
            train_environments: 2,
            test_environments: 1,
            train_size: 8,
            test_size: 4,
            train_eval_size: 4,
            ..ExperimentConfig::default()
        };
        let (a, b) = experiment_variants(&cfg, LossVariant::Norm, LossVariant::Norm).unwrap();
        assert_eq!(a.translation_gap() - b.translation_gap(), 0.0);
    }
}
