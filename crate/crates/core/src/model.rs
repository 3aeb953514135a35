//! Pose regressor: strided 3x3 convolutions followed by separate translation
//! and rotation heads, with a hand-written backward pass.
//!
//! All parameters live in one flat vector in declaration order (each conv
//! stage's weight then bias, then the translation head layers, then the
//! rotation head layers). Activations are channel-major; convolutions are
//! unpadded and lowered to GEMM through an im2col buffer.

use std::fmt::Write as _;
use std::io::{Read, Write};

use rand::RngExt;

use crate::augment::ILGrid;
use crate::error::{invalid, Error, Result};
use crate::geometry::{RelativeMotion, Vec3};
use crate::seed::rng_for;
use crate::synthgen::FlowField;

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const OUTPUTS: usize = 3;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FVOPOSE1";

#[derive(Debug, Clone, PartialEq)]
pub struct PoseNetConfig {
    pub width: usize,
    pub height: usize,
    /// 2 for flow only, 4 for flow plus intrinsics layer.
    pub in_channels: usize,
    /// Output channels of each stride-2 conv stage.
    pub conv_channels: Vec<usize>,
    /// Hidden widths of each head; a final layer of 3 outputs is appended.
    pub head_widths: Vec<usize>,
    pub seed: u64,
    /// Start both heads' last layer at zero so the initial output is zero motion.
    pub zero_init_output: bool,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 48,
            in_channels: 4,
            conv_channels: vec![8, 16, 32, 64],
            head_widths: vec![128, 32],
            seed: 0,
            zero_init_output: true,
        }
    }
}

impl PoseNetConfig {
    pub fn with_il(use_il: bool) -> Self {
        Self {
            in_channels: if use_il { 4 } else { 2 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 2 && self.in_channels != 4 {
            return Err(invalid("in_channels", format!("{} (expected 2 or 4)", self.in_channels)));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(invalid("conv_channels", "need at least one non-empty stage"));
        }
        if self.head_widths.contains(&0) {
            return Err(invalid("head_widths", "zero-width layer"));
        }
        let (mut w, mut h) = (self.width, self.height);
        for _ in &self.conv_channels {
            if w < KERNEL || h < KERNEL {
                return Err(invalid("input size", format!("{}x{} too small for the conv stages", self.width, self.height)));
            }
            w = (w - KERNEL) / STRIDE + 1;
            h = (h - KERNEL) / STRIDE + 1;
        }
        Ok(())
    }

    /// Flat key = value echo, one entry per line.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "in_channels = {}", self.in_channels);
        let _ = writeln!(s, "conv_channels = {}", list(&self.conv_channels));
        let _ = writeln!(s, "head_widths = {}", list(&self.head_widths));
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "zero_init_output = {}", self.zero_init_output);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let list = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .map(|x| x.trim().parse().map_err(|_| Error::Format(format!("bad list {v:?}"))))
                .collect()
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config line {line:?}")))?;
            let v = v.trim();
            let num = || v.parse::<u64>().map_err(|_| Error::Format(format!("bad number {v:?}")));
            match k.trim() {
                "width" => cfg.width = num()? as usize,
                "height" => cfg.height = num()? as usize,
                "in_channels" => cfg.in_channels = num()? as usize,
                "conv_channels" => cfg.conv_channels = list(v)?,
                "head_widths" => cfg.head_widths = list(v)?,
                "seed" => cfg.seed = num()?,
                "zero_init_output" => {
                    cfg.zero_init_output = v.parse().map_err(|_| Error::Format(format!("bad bool {v:?}")))?
                }
                other => return Err(Error::Format(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvLayer {
    in_c: usize,
    out_c: usize,
    in_w: usize,
    in_h: usize,
    out_w: usize,
    out_h: usize,
    weight: usize,
    bias: usize,
}

impl ConvLayer {
    fn patch(&self) -> usize {
        self.in_c * KERNEL * KERNEL
    }

    fn positions(&self) -> usize {
        self.out_w * self.out_h
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DenseLayer {
    inputs: usize,
    outputs: usize,
    weight: usize,
    bias: usize,
    relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    convs: Vec<ConvLayer>,
    trans_head: Vec<DenseLayer>,
    rot_head: Vec<DenseLayer>,
    features: usize,
    len: usize,
}

impl Layout {
    fn new(cfg: &PoseNetConfig) -> Self {
        let mut offset = 0;
        let mut convs = Vec::new();
        let (mut w, mut h, mut c) = (cfg.width, cfg.height, cfg.in_channels);
        for &out_c in &cfg.conv_channels {
            let (ow, oh) = ((w - KERNEL) / STRIDE + 1, (h - KERNEL) / STRIDE + 1);
            let weight = offset;
            offset += out_c * c * KERNEL * KERNEL;
            let bias = offset;
            offset += out_c;
            convs.push(ConvLayer {
                in_c: c,
                out_c,
                in_w: w,
                in_h: h,
                out_w: ow,
                out_h: oh,
                weight,
                bias,
            });
            (w, h, c) = (ow, oh, out_c);
        }
        let features = w * h * c;
        let head = |offset: &mut usize| {
            let mut layers = Vec::new();
            let mut inputs = features;
            let widths = cfg.head_widths.iter().copied().chain(std::iter::once(OUTPUTS));
            let n = cfg.head_widths.len();
            for (i, outputs) in widths.enumerate() {
                let weight = *offset;
                *offset += outputs * inputs;
                let bias = *offset;
                *offset += outputs;
                layers.push(DenseLayer {
                    inputs,
                    outputs,
                    weight,
                    bias,
                    relu: i < n,
                });
                inputs = outputs;
            }
            layers
        };
        let trans_head = head(&mut offset);
        let rot_head = head(&mut offset);
        Self {
            convs,
            trans_head,
            rot_head,
            features,
            len: offset,
        }
    }
}

/// The pose network `P(F, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseNet {
    config: PoseNetConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    cols: Vec<Vec<f64>>,
    /// Post-ReLU conv outputs.
    conv_out: Vec<Vec<f64>>,
    /// Inputs to each dense layer of the translation head, then its output.
    trans_acts: Vec<Vec<f64>>,
    rot_acts: Vec<Vec<f64>>,
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold m*k, k*n and m*n elements and the strides above
    // describe row-major (or transposed row-major) matrices of those shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(layer: &ConvLayer, input: &[f64], cols: &mut [f64]) {
    let p = layer.positions();
    for c in 0..layer.in_c {
        let plane = &input[c * layer.in_w * layer.in_h..(c + 1) * layer.in_w * layer.in_h];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[((c * KERNEL + ky) * KERNEL + kx) * p..][..p];
                for oy in 0..layer.out_h {
                    let src = &plane[(oy * STRIDE + ky) * layer.in_w + kx..];
                    let dst = &mut row[oy * layer.out_w..(oy + 1) * layer.out_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        *d = src[ox * STRIDE];
                    }
                }
            }
        }
    }
}

fn col2im(layer: &ConvLayer, cols: &[f64], grad_input: &mut [f64]) {
    grad_input.iter_mut().for_each(|g| *g = 0.0);
    let p = layer.positions();
    for c in 0..layer.in_c {
        let plane = &mut grad_input[c * layer.in_w * layer.in_h..(c + 1) * layer.in_w * layer.in_h];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[((c * KERNEL + ky) * KERNEL + kx) * p..][..p];
                for oy in 0..layer.out_h {
                    let base = (oy * STRIDE + ky) * layer.in_w + kx;
                    for ox in 0..layer.out_w {
                        plane[base + ox * STRIDE] += row[oy * layer.out_w + ox];
                    }
                }
            }
        }
    }
}

impl PoseNet {
    pub fn new(config: PoseNetConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.len];
        let mut rng = rng_for(&[config.seed, 0x1417]);
        let mut fill = |offset: usize, count: usize, fan_in: usize, zero: bool| {
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut params[offset..offset + count] {
                // draw even when zeroing so the other layers do not depend on the flag
                let v = rng.random_range(-bound..bound);
                *p = if zero { 0.0 } else { v };
            }
        };
        for l in &layout.convs {
            fill(l.weight, l.out_c * l.patch(), l.patch(), false);
        }
        for head in [&layout.trans_head, &layout.rot_head] {
            for l in head.iter() {
                let last = !l.relu;
                fill(l.weight, l.outputs * l.inputs, l.inputs, last && config.zero_init_output);
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &PoseNetConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_len(&self) -> usize {
        self.config.in_channels * self.config.width * self.config.height
    }

    /// Named parameter tensors as `(name, offset, len)` in declaration order.
    pub fn tensors(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for (i, l) in self.layout.convs.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), l.weight, l.out_c * l.patch()));
            out.push((format!("conv{}.bias", i + 1), l.bias, l.out_c));
        }
        for (name, head) in [("trans", &self.layout.trans_head), ("rot", &self.layout.rot_head)] {
            for (i, l) in head.iter().enumerate() {
                out.push((format!("{name}_fc{}.weight", i + 1), l.weight, l.outputs * l.inputs));
                out.push((format!("{name}_fc{}.bias", i + 1), l.bias, l.outputs));
            }
        }
        out
    }

    /// Raw head outputs; the rotation is not wrapped into the canonical chart.
    pub fn forward(&self, input: &[f64]) -> Result<RelativeMotion> {
        Ok(self.forward_cached(input)?.0)
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<(RelativeMotion, ForwardCache)> {
        if input.len() != self.input_len() {
            return Err(Error::ShapeMismatch {
                expected: format!(
                    "{}x{}x{} input",
                    self.config.in_channels, self.config.height, self.config.width
                ),
                got: format!("{} values", input.len()),
            });
        }
        let mut cols = Vec::with_capacity(self.layout.convs.len());
        let mut conv_out: Vec<Vec<f64>> = Vec::with_capacity(self.layout.convs.len());
        for l in &self.layout.convs {
            let x = conv_out.last().map_or(input, |v| v.as_slice());
            let p = l.positions();
            let mut col = vec![0.0; l.patch() * p];
            im2col(l, x, &mut col);
            let mut y = vec![0.0; l.out_c * p];
            for (o, row) in y.chunks_exact_mut(p).enumerate() {
                row.fill(self.params[l.bias + o]);
            }
            let w = &self.params[l.weight..l.weight + l.out_c * l.patch()];
            gemm(l.out_c, l.patch(), p, w, false, &col, false, 1.0, &mut y);
            y.iter_mut().for_each(|v| *v = v.max(0.0));
            cols.push(col);
            conv_out.push(y);
        }
        let features = conv_out.last().expect("at least one conv stage").clone();
        let trans_acts = self.dense_forward(&self.layout.trans_head, features.clone());
        let rot_acts = self.dense_forward(&self.layout.rot_head, features);
        let t = trans_acts.last().expect("head output");
        let r = rot_acts.last().expect("head output");
        let out = RelativeMotion {
            translation: Vec3::new(t[0], t[1], t[2]),
            rotation: Vec3::new(r[0], r[1], r[2]),
        };
        Ok((
            out,
            ForwardCache {
                cols,
                conv_out,
                trans_acts,
                rot_acts,
            },
        ))
    }

    fn dense_forward(&self, layers: &[DenseLayer], x: Vec<f64>) -> Vec<Vec<f64>> {
        let mut acts = vec![x];
        for l in layers {
            let x = acts.last().expect("input");
            let mut y = self.params[l.bias..l.bias + l.outputs].to_vec();
            let w = &self.params[l.weight..l.weight + l.outputs * l.inputs];
            gemm(l.outputs, l.inputs, 1, w, false, x, false, 1.0, &mut y);
            if l.relu {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(y);
        }
        acts
    }

    /// Accumulates head gradients into `grad`; returns the gradient w.r.t. the
    /// head input.
    fn dense_backward(&self, layers: &[DenseLayer], acts: &[Vec<f64>], upstream: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut d = upstream.to_vec();
        for (i, l) in layers.iter().enumerate().rev() {
            let x = &acts[i];
            let y = &acts[i + 1];
            if l.relu {
                for (g, &v) in d.iter_mut().zip(y) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            for (gb, g) in grad[l.bias..l.bias + l.outputs].iter_mut().zip(&d) {
                *gb += g;
            }
            gemm(l.outputs, 1, l.inputs, &d, false, x, false, 1.0, &mut grad[l.weight..l.weight + l.outputs * l.inputs]);
            let mut dx = vec![0.0; l.inputs];
            let w = &self.params[l.weight..l.weight + l.outputs * l.inputs];
            gemm(l.inputs, l.outputs, 1, w, true, &d, false, 0.0, &mut dx);
            d = dx;
        }
        d
    }

    /// Adds `d loss / d params` to `grad` given the loss gradient w.r.t. the
    /// two head outputs.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_translation: &Vec3,
        grad_rotation: &Vec3,
        grad: &mut [f64],
    ) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} gradient slots", self.params.len()),
                got: grad.len().to_string(),
            });
        }
        let mut d_feat = vec![0.0; self.layout.features];
        if grad_translation.iter().any(|g| *g != 0.0) {
            let d = self.dense_backward(&self.layout.trans_head, &cache.trans_acts, grad_translation.as_slice(), grad);
            d_feat.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        }
        if grad_rotation.iter().any(|g| *g != 0.0) {
            let d = self.dense_backward(&self.layout.rot_head, &cache.rot_acts, grad_rotation.as_slice(), grad);
            d_feat.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        }
        let mut d_out = d_feat;
        for (i, l) in self.layout.convs.iter().enumerate().rev() {
            let y = &cache.conv_out[i];
            for (g, &v) in d_out.iter_mut().zip(y) {
                if v <= 0.0 {
                    *g = 0.0;
                }
            }
            let p = l.positions();
            for (o, row) in d_out.chunks_exact(p).enumerate() {
                grad[l.bias + o] += row.iter().sum::<f64>();
            }
            let col = &cache.cols[i];
            gemm(
                l.out_c,
                p,
                l.patch(),
                &d_out,
                false,
                col,
                true,
                1.0,
                &mut grad[l.weight..l.weight + l.out_c * l.patch()],
            );
            if i == 0 {
                break;
            }
            let w = &self.params[l.weight..l.weight + l.out_c * l.patch()];
            let mut d_col = vec![0.0; l.patch() * p];
            gemm(l.patch(), l.out_c, p, w, true, &d_out, false, 0.0, &mut d_col);
            let mut d_in = vec![0.0; l.in_c * l.in_w * l.in_h];
            col2im(l, &d_col, &mut d_in);
            d_out = d_in;
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let text = self.config.to_text();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a pose-net checkpoint".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let mut text = vec![0u8; u32::from_le_bytes(u32b) as usize];
        r.read_exact(&mut text)?;
        let text = String::from_utf8(text).map_err(|_| Error::Format("config echo is not UTF-8".into()))?;
        let config = PoseNetConfig::from_text(&text)?;
        let mut net = PoseNet::new(config)?;
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b)?;
        let count = u64::from_le_bytes(u64b) as usize;
        if count != net.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {count} parameters, config implies {}",
                net.params.len()
            )));
        }
        for p in &mut net.params {
            r.read_exact(&mut u64b)?;
            *p = f64::from_le_bytes(u64b);
        }
        Ok(net)
    }
}

/// Stacks `[u, v]` flow channels (divided by `flow_scale`) and, when given,
/// the two intrinsics-layer channels into a channel-major input.
pub fn stack_input(flow: &FlowField, il: Option<&ILGrid>, flow_scale: f64) -> Result<Vec<f64>> {
    let n = flow.width * flow.height;
    let channels = if il.is_some() { 4 } else { 2 };
    let mut out = vec![0.0; channels * n];
    let inv = 1.0 / flow_scale;
    for (i, px) in flow.data.chunks_exact(2).enumerate() {
        out[i] = px[0] * inv;
        out[n + i] = px[1] * inv;
    }
    if let Some(il) = il {
        if il.width != flow.width || il.height != flow.height {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", flow.width, flow.height),
                got: format!("IL {}x{}", il.width, il.height),
            });
        }
        out[2 * n..3 * n].copy_from_slice(&il.kx);
        out[3 * n..].copy_from_slice(&il.ky);
    }
    Ok(out)
}

/// Wraps a raw rotation output into the canonical chart `|r| < pi`.
pub fn canonicalize_output(raw: &RelativeMotion) -> Result<RelativeMotion> {
    if raw.translation.iter().chain(raw.rotation.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network output"));
    }
    let theta = raw.rotation.norm();
    if theta < std::f64::consts::PI {
        return Ok(*raw);
    }
    let tau = 2.0 * std::f64::consts::PI;
    let wrapped = theta - tau * (theta / tau).round();
    RelativeMotion::new(raw.translation, raw.rotation * (wrapped / theta))
}
