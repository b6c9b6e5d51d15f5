//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is acyclic by
//! construction and `backward` is a single reverse sweep. Every op is
//! batched; values are `f64`.
//!
//! Spike nonlinearities have two modes. `Hard` reproduces the inference
//! engine's forward exactly and differentiates it with the surrogate (binary)
//! or straight-through (burst) rule. `Smooth` replaces every step function
//! and the reset clamp with a smooth antiderivative, so finite differences
//! can check the chain rule end to end.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::neuron::{logistic, softplus, squash, NeuronKind, SurrogateSpec};
use crate::params::{ParamSet, Tensor64};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpikeMode {
    Hard,
    /// Steps become softplus ramps of this sharpness.
    Smooth { sharpness: f64 },
}

/// Spike function of one neuron layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpikeFn {
    pub kind: NeuronKind,
    pub v_theta: f64,
    pub n_max: u32,
    pub surrogate: SurrogateSpec,
    pub mode: SpikeMode,
}

impl SpikeFn {
    fn fire(&self, u: f64) -> f64 {
        let th = self.v_theta;
        match (self.mode, self.kind) {
            (SpikeMode::Hard, NeuronKind::Binary) => f64::from(u8::from(u > th)),
            (SpikeMode::Hard, NeuronKind::Burst) => (u / th).floor().clamp(0.0, self.n_max as f64),
            (SpikeMode::Smooth { .. }, NeuronKind::Binary) => self.surrogate.primitive((u - th) / th),
            (SpikeMode::Smooth { sharpness: k }, NeuronKind::Burst) => {
                softplus(u / th, k) - softplus(u / th - self.n_max as f64, k)
            }
        }
    }

    fn fire_grad(&self, u: f64) -> f64 {
        let th = self.v_theta;
        match (self.mode, self.kind) {
            (_, NeuronKind::Binary) => self.surrogate.grad((u - th) / th) / th,
            (SpikeMode::Hard, NeuronKind::Burst) => {
                let q = u / th;
                if q > 0.0 && q < self.n_max as f64 {
                    1.0 / th
                } else {
                    0.0
                }
            }
            (SpikeMode::Smooth { sharpness: k }, NeuronKind::Burst) => {
                (logistic(k * u / th) - logistic(k * (u / th - self.n_max as f64))) / th
            }
        }
    }

    fn reset(&self, z: f64) -> f64 {
        match self.mode {
            SpikeMode::Hard => z.clamp(0.0, 1.0),
            SpikeMode::Smooth { sharpness: k } => softplus(z, k),
        }
    }

    fn reset_grad(&self, z: f64) -> f64 {
        match self.mode {
            SpikeMode::Hard => f64::from(u8::from(z > 0.0 && z <= 1.0)),
            SpikeMode::Smooth { sharpness: k } => logistic(k * z),
        }
    }
}

/// Which statistics a tape batch-norm normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a> {
    Batch,
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Batch statistics observed by a train-mode batch-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const TAPE_BN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Sum(Var),
    AddBias { x: Var, bias: Var, axis: usize },
    ScaleExp { x: Var, log_s: Var },
    Conv { x: Var, w: Var, pad: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, axis: usize, xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    Neuron { x: Var, beta: Var, alpha: Var, f: SpikeFn, steps: usize, u: Vec<f64>, h: Vec<f64>, r: Vec<f64> },
    ToTokens(Var),
    Reshape(Var),
    Scores { q: Var, k: Var, heads: usize },
    Mask { x: Var, mask: Arc<[u8]> },
    AttnApply { a: Var, v: Var, heads: usize },
    MeanTokens(Var),
    MeanTime { x: Var, steps: usize },
    CrossEntropy { logits: Var, probs: Vec<f64>, target: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor64,
}

/// Recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const PAR_WORK: usize = 1 << 14;

// out[m×p] = a[m×k] · b[k×p]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    let row = |(i, o): (usize, &mut [f64])| {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            for (x, &bv) in o.iter_mut().zip(&b[kk * p..(kk + 1) * p]) {
                *x += av * bv;
            }
        }
    };
    if m * k * p >= PAR_WORK {
        out.par_chunks_mut(p).enumerate().for_each(row);
    } else {
        out.chunks_mut(p).enumerate().for_each(row);
    }
    out
}

// out[k×p] = aᵀ · b with a[m×k], b[m×p]
fn mm_at(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * p];
    let row = |(kk, o): (usize, &mut [f64])| {
        for i in 0..m {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            for (x, &bv) in o.iter_mut().zip(&b[i * p..(i + 1) * p]) {
                *x += av * bv;
            }
        }
    };
    if m * k * p >= PAR_WORK {
        out.par_chunks_mut(p).enumerate().for_each(row);
    } else {
        out.chunks_mut(p).enumerate().for_each(row);
    }
    out
}

// out[m×p] = a · bᵀ with a[m×k], b[p×k]
fn mm_bt(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    let row = |(i, o): (usize, &mut [f64])| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, x) in o.iter_mut().enumerate() {
            *x = ar.iter().zip(&b[j * k..(j + 1) * k]).map(|(u, v)| u * v).sum();
        }
    };
    if m * k * p >= PAR_WORK {
        out.par_chunks_mut(p).enumerate().for_each(row);
    } else {
        out.chunks_mut(p).enumerate().for_each(row);
    }
    out
}

#[derive(Clone, Copy)]
struct ConvShape {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvShape {
    fn taps(&self) -> usize {
        self.ci * self.kh * self.kw
    }
    fn pixels(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], s: &ConvShape) -> Vec<f64> {
    let mut cols = vec![0.0; s.taps() * s.pixels()];
    for ci in 0..s.ci {
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let r = (ci * s.kh + ky) * s.kw + kx;
                let dst = &mut cols[r * s.pixels()..(r + 1) * s.pixels()];
                for oy in 0..s.ho {
                    let iy = (oy + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for ox in 0..s.wo {
                        let ix = (ox + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            dst[oy * s.wo + ox] = x[(ci * s.h + iy as usize) * s.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], s: &ConvShape, dx: &mut [f64]) {
    for ci in 0..s.ci {
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let r = (ci * s.kh + ky) * s.kw + kx;
                let src = &cols[r * s.pixels()..(r + 1) * s.pixels()];
                for oy in 0..s.ho {
                    let iy = (oy + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for ox in 0..s.wo {
                        let ix = (ox + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            dx[(ci * s.h + iy as usize) * s.w + ix as usize] += src[oy * s.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

// Images per parallel work item in conv backward; partial kernel gradients
// are summed in chunk order so the result does not depend on thread count.
const CONV_CHUNK: usize = 4;

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product()))
}

fn t64(shape: &[usize], data: Vec<f64>) -> Tensor64 {
    Tensor64::new(shape, data).expect("tape op produced a consistent shape")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor64) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor64 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input.
    pub fn leaf(&mut self, value: Tensor64) -> Var {
        self.push(Op::Leaf, value)
    }

    /// A parameter; its gradient is reported under `id`.
    pub fn param(&mut self, set: &ParamSet, id: usize) -> Var {
        self.push(Op::Param(id), set.by_id(id).value.clone())
    }

    pub fn param_named(&mut self, set: &ParamSet, name: &str) -> Result<Var> {
        Ok(self.param(set, set.id(name)?))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, p) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(format!("matmul {:?} x {:?}", self.shape(a), self.shape(b))));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, p);
        Ok(self.push(Op::MatMul(a, b), t64(&[m, p], out)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add(a, b), t64(&shape, data)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Sub(a, b), t64(&shape, data)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), t64(&[1], vec![s]))
    }

    /// Adds a per-channel bias along `axis`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let (outer, c, inner) = split_axis(self.shape(x), axis)?;
        if self.value(bias).len() != c {
            return Err(Error::dim(format!("bias of {} for {c} channels", self.value(bias).len())));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v += b[ch]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::AddBias { x, bias, axis }, t64(&shape, data)))
    }

    /// `x · exp(log_s)` with a scalar `log_s`.
    pub fn scale_exp(&mut self, x: Var, log_s: Var) -> Var {
        let s = self.value(log_s).data()[0].exp();
        let v = self.value(x).map(|e| e * s);
        self.push(Op::ScaleExp { x, log_s }, v)
    }

    fn conv_shape(&self, x: Var, w: Var, pad: usize) -> Result<(usize, ConvShape)> {
        let (b, ci, h, wd) = self.value(x).dims4()?;
        let (co, ci2, kh, kw) = self.value(w).dims4()?;
        if ci != ci2 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::dim(format!("conv {:?} with kernel {:?}", self.shape(x), self.shape(w))));
        }
        let s = ConvShape {
            ci,
            h,
            w: wd,
            co,
            kh,
            kw,
            pad,
            ho: h + 2 * pad - kh + 1,
            wo: wd + 2 * pad - kw + 1,
        };
        Ok((b, s))
    }

    /// Stride-1 convolution with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (b, s) = self.conv_shape(x, w, pad)?;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let in_sz = s.ci * s.h * s.w;
        let out_sz = s.co * s.pixels();
        let mut out = vec![0.0; b * out_sz];
        out.par_chunks_mut(out_sz).enumerate().for_each(|(bi, o)| {
            let cols = im2col(&xd[bi * in_sz..(bi + 1) * in_sz], &s);
            o.copy_from_slice(&mm(wd, &cols, s.co, s.taps(), s.pixels()));
        });
        Ok(self.push(Op::Conv { x, w, pad }, t64(&[b, s.co, s.ho, s.wo], out)))
    }

    /// 2×2 stride-2 max pooling; ties keep the first element in scan order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("maxpool2 needs even spatial dims, got {:?}", self.shape(x))));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for (pi, plane) in xd.chunks(h * w).enumerate() {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = (2 * oy + dy) * w + 2 * ox + dx;
                        if plane[j] > plane[best] {
                            best = j;
                        }
                    }
                    out.push(plane[best]);
                    argmax.push(pi * h * w + best);
                }
            }
        }
        Ok(self.push(Op::MaxPool { x, argmax }, t64(&[b, c, ho, wo], out)))
    }

    /// Batch normalization over every axis except `axis`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        stats: BnStats<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (outer, c, inner) = split_axis(self.shape(x), axis)?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim(format!("batchnorm affine does not cover {c} channels")));
        }
        let xd = self.value(x).data();
        let count = (outer * inner) as f64;
        let (mean, var, batch) = match stats {
            BnStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        mean[ch] += xd[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        var[ch] += xd[base..base + inner].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var, true)
            }
            BnStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim(format!("running statistics do not cover {c} channels")));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + TAPE_BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let v = self.push(
            Op::BatchNorm { x, gamma, beta, axis, xhat, inv_std, batch },
            t64(&shape, out),
        );
        Ok((v, batch.then_some(BatchStats { mean, var })))
    }

    /// Runs a LIF layer over time axis 0 (`steps` slices of the flattened
    /// input). `beta_raw`, `alpha_raw` are scalars passed through a sigmoid.
    pub fn neuron(&mut self, x: Var, beta_raw: Var, alpha_raw: Var, f: SpikeFn, steps: usize) -> Result<Var> {
        let len = self.value(x).len();
        if steps == 0 || !len.is_multiple_of(steps) {
            return Err(Error::dim(format!("{len} elements do not split into {steps} timesteps")));
        }
        let per = len / steps;
        let beta = squash(self.value(beta_raw).data()[0]);
        let alpha = squash(self.value(alpha_raw).data()[0]);
        let xd = self.value(x).data();
        let mut u = vec![0.0; len];
        let mut h = vec![0.0; len];
        let mut r = vec![0.0; len];
        let mut s = vec![0.0; len];
        for t in 0..steps {
            for e in 0..per {
                let i = t * per + e;
                let (up, sp) = if t > 0 { (u[i - per], s[i - per]) } else { (0.0, 0.0) };
                h[i] = beta * up + xd[i];
                r[i] = f.reset(1.0 - alpha * sp);
                u[i] = h[i] * r[i];
                s[i] = f.fire(u[i]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Op::Neuron { x, beta: beta_raw, alpha: alpha_raw, f, steps, u, h, r },
            t64(&shape, s),
        ))
    }

    /// `[G, D, H, W]` feature maps to `[G, H·W, D]` tokens (row-major patches).
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let (g, d, h, w) = self.value(x).dims4()?;
        let n = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0; g * n * d];
        for gi in 0..g {
            for c in 0..d {
                for t in 0..n {
                    out[(gi * n + t) * d + c] = xd[(gi * d + c) * n + t];
                }
            }
        }
        Ok(self.push(Op::ToTokens(x), t64(&[g, n, d], out)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    fn attn_dims(&self, q: Var, heads: usize) -> Result<(usize, usize, usize, usize)> {
        let [g, n, d] = self.shape(q)[..] else {
            return Err(Error::dim(format!("attention input must be [G, N, D], got {:?}", self.shape(q))));
        };
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("dim {d} not divisible by {heads} heads")));
        }
        Ok((g, n, d, d / heads))
    }

    /// Per-head similarity `A[g, h, i, j] = Σ_c Q[g,i,c]·K[g,j,c]`.
    pub fn attn_scores(&mut self, q: Var, k: Var, heads: usize) -> Result<Var> {
        self.same_shape(q, k, "attention scores")?;
        let (g, n, d, dh) = self.attn_dims(q, heads)?;
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![0.0; g * heads * n * n];
        out.par_chunks_mut(heads * n * n).enumerate().for_each(|(gi, o)| {
            for hh in 0..heads {
                for i in 0..n {
                    for j in 0..n {
                        let qi = &qd[(gi * n + i) * d + hh * dh..][..dh];
                        let kj = &kd[(gi * n + j) * d + hh * dh..][..dh];
                        o[(hh * n + i) * n + j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    }
                }
            }
        });
        Ok(self.push(Op::Scores { q, k, heads }, t64(&[g, heads, n, n], out)))
    }

    /// Multiplies each trailing `N × N` map by a fixed 0/1 mask.
    pub fn attn_mask(&mut self, x: Var, mask: Arc<[u8]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let nn = shape[shape.len().saturating_sub(2)..].iter().product::<usize>();
        if mask.len() != nn {
            return Err(Error::dim(format!("mask of {} entries for maps {:?}", mask.len(), shape)));
        }
        let data = self
            .value(x)
            .data()
            .chunks(nn)
            .flat_map(|m| m.iter().zip(mask.iter()).map(|(&v, &b)| if b != 0 { v } else { 0.0 }))
            .collect();
        Ok(self.push(Op::Mask { x, mask }, t64(&shape, data)))
    }

    /// `O[g, i, c] = Σ_j A[g, head(c), i, j]·V[g, j, c]`.
    pub fn attn_apply(&mut self, a: Var, v: Var, heads: usize) -> Result<Var> {
        let (g, n, d, dh) = self.attn_dims(v, heads)?;
        if self.shape(a) != [g, heads, n, n] {
            return Err(Error::dim(format!("attention map {:?} for values {:?}", self.shape(a), self.shape(v))));
        }
        let (ad, vd) = (self.value(a).data(), self.value(v).data());
        let mut out = vec![0.0; g * n * d];
        out.par_chunks_mut(n * d).enumerate().for_each(|(gi, o)| {
            for hh in 0..heads {
                for i in 0..n {
                    for j in 0..n {
                        let w = ad[((gi * heads + hh) * n + i) * n + j];
                        if w == 0.0 {
                            continue;
                        }
                        let vj = &vd[(gi * n + j) * d + hh * dh..][..dh];
                        for (x, &vv) in o[i * d + hh * dh..][..dh].iter_mut().zip(vj) {
                            *x += w * vv;
                        }
                    }
                }
            }
        });
        Ok(self.push(Op::AttnApply { a, v, heads }, t64(&[g, n, d], out)))
    }

    /// Mean over the token axis: `[G, N, D]` → `[G, D]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let [g, n, d] = self.shape(x)[..] else {
            return Err(Error::dim(format!("mean_tokens needs [G, N, D], got {:?}", self.shape(x))));
        };
        let xd = self.value(x).data();
        let mut out = vec![0.0; g * d];
        for gi in 0..g {
            for t in 0..n {
                for c in 0..d {
                    out[gi * d + c] += xd[(gi * n + t) * d + c];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        Ok(self.push(Op::MeanTokens(x), t64(&[g, d], out)))
    }

    /// Mean over time of time-major rows: `[T·B, C]` → `[B, C]`.
    pub fn mean_time(&mut self, x: Var, steps: usize) -> Result<Var> {
        let (rows, c) = self.value(x).dims2()?;
        if steps == 0 || rows % steps != 0 {
            return Err(Error::dim(format!("{rows} rows do not split into {steps} timesteps")));
        }
        let b = rows / steps;
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c];
        for t in 0..steps {
            for (o, v) in out.iter_mut().zip(&xd[t * b * c..(t + 1) * b * c]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= steps as f64);
        Ok(self.push(Op::MeanTime { x, steps }, t64(&[b, c], out)))
    }

    /// Mean label-smoothed cross-entropy of `[B, C]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let (b, c) = self.value(logits).dims2()?;
        if labels.len() != b {
            return Err(Error::dim(format!("{} labels for {b} rows", labels.len())));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut target = vec![smoothing / c as f64; b * c];
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Argument(format!("label {y} out of range for {c} classes")));
            }
            target[i * c + y] += 1.0 - smoothing;
            let row = &ld[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
                loss -= target[i * c + j] * (row[j] - lse);
            }
        }
        Ok(self.push(Op::CrossEntropy { logits, probs, target }, t64(&[1], vec![loss / b as f64])))
    }

    /// Reverse sweep from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called on an empty tape".to_string()));
        }
        if loss.0 >= self.nodes.len() || self.value(loss).len() != 1 {
            return Err(Error::Usage("backward needs a scalar node of this tape".to_string()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, delta: Vec<f64>| {
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let p = self.value(*b).dims2()?.1;
                acc(*a, mm_bt(g, self.value(*b).data(), m, p, k));
                acc(*b, mm_at(self.value(*a).data(), g, m, k, p));
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::AddBias { x, bias, axis } => {
                let (outer, c, inner) = split_axis(self.shape(*x), *axis)?;
                let mut gb = vec![0.0; c];
                for o in 0..outer {
                    for (ch, gbc) in gb.iter_mut().enumerate() {
                        let base = (o * c + ch) * inner;
                        *gbc += g[base..base + inner].iter().sum::<f64>();
                    }
                }
                acc(*x, g.to_vec());
                acc(*bias, gb);
            }
            Op::ScaleExp { x, log_s } => {
                let s = self.value(*log_s).data()[0].exp();
                let xd = self.value(*x).data();
                let gs: f64 = g.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>() * s;
                acc(*x, g.iter().map(|v| v * s).collect());
                acc(*log_s, vec![gs]);
            }
            Op::Conv { x, w, pad } => {
                let (b, s) = self.conv_shape(*x, *w, *pad)?;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let in_sz = s.ci * s.h * s.w;
                let out_sz = s.co * s.pixels();
                let mut dx = vec![0.0; b * in_sz];
                let partial: Vec<Vec<f64>> = dx
                    .par_chunks_mut(CONV_CHUNK * in_sz)
                    .enumerate()
                    .map(|(ck, dxc)| {
                        let mut dw = vec![0.0; wd.len()];
                        for (local, dxb) in dxc.chunks_mut(in_sz).enumerate() {
                            let bi = ck * CONV_CHUNK + local;
                            let gy = &g[bi * out_sz..(bi + 1) * out_sz];
                            let cols = im2col(&xd[bi * in_sz..(bi + 1) * in_sz], &s);
                            let part = mm_bt(gy, &cols, s.co, s.pixels(), s.taps());
                            dw.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
                            let dcols = mm_at(wd, gy, s.co, s.taps(), s.pixels());
                            col2im(&dcols, &s, dxb);
                        }
                        dw
                    })
                    .collect();
                let mut dw = vec![0.0; wd.len()];
                for p in partial {
                    dw.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
                }
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&j, &gv) in argmax.iter().zip(g) {
                    dx[j] += gv;
                }
                acc(*x, dx);
            }
            Op::BatchNorm { x, gamma, beta, axis, xhat, inv_std, batch } => {
                let (outer, c, inner) = split_axis(self.shape(*x), *axis)?;
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut s1 = vec![0.0; c];
                let mut s2 = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                            let dxh = g[i] * gm[ch];
                            s1[ch] += dxh;
                            s2[ch] += dxh * xhat[i];
                        }
                    }
                }
                let m = (outer * inner) as f64;
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            let dxh = g[i] * gm[ch];
                            dx[i] = if *batch {
                                inv_std[ch] / m * (m * dxh - s1[ch] - xhat[i] * s2[ch])
                            } else {
                                dxh * inv_std[ch]
                            };
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Neuron { x, beta, alpha, f, steps, u, h, r } => {
                let s = node.value.data();
                let per = s.len() / steps;
                let b = squash(self.value(*beta).data()[0]);
                let a = squash(self.value(*alpha).data()[0]);
                let mut dx = vec![0.0; s.len()];
                let (mut gb, mut ga) = (0.0, 0.0);
                for e in 0..per {
                    let (mut carry_u, mut carry_s) = (0.0, 0.0);
                    for t in (0..*steps).rev() {
                        let i = t * per + e;
                        let gs = g[i] + carry_s;
                        let gu = carry_u + gs * f.fire_grad(u[i]);
                        let gh = gu * r[i];
                        let gr = gu * h[i];
                        dx[i] = gh;
                        if t == 0 {
                            break;
                        }
                        let (up, sp) = (u[i - per], s[i - per]);
                        gb += gh * up;
                        carry_u = gh * b;
                        let dz = gr * f.reset_grad(1.0 - a * sp);
                        ga -= dz * sp;
                        carry_s = -dz * a;
                    }
                }
                acc(*x, dx);
                acc(*beta, vec![gb * b * (1.0 - b)]);
                acc(*alpha, vec![ga * a * (1.0 - a)]);
            }
            Op::ToTokens(x) => {
                let (gg, d, hh, ww) = self.value(*x).dims4()?;
                let n = hh * ww;
                let mut dx = vec![0.0; g.len()];
                for gi in 0..gg {
                    for c in 0..d {
                        for t in 0..n {
                            dx[(gi * d + c) * n + t] = g[(gi * n + t) * d + c];
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Scores { q, k, heads } => {
                let (gg, n, d, dh) = self.attn_dims(*q, *heads)?;
                let (qd, kd) = (self.value(*q).data(), self.value(*k).data());
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                dq.par_chunks_mut(n * d)
                    .zip(dk.par_chunks_mut(n * d))
                    .enumerate()
                    .for_each(|(gi, (dqg, dkg))| {
                        for hh in 0..*heads {
                            for i in 0..n {
                                for j in 0..n {
                                    let ga = g[((gi * heads + hh) * n + i) * n + j];
                                    if ga == 0.0 {
                                        continue;
                                    }
                                    for c in hh * dh..(hh + 1) * dh {
                                        dqg[i * d + c] += ga * kd[(gi * n + j) * d + c];
                                        dkg[j * d + c] += ga * qd[(gi * n + i) * d + c];
                                    }
                                }
                            }
                        }
                    });
                let _ = gg;
                acc(*q, dq);
                acc(*k, dk);
            }
            Op::Mask { x, mask } => {
                let nn = mask.len();
                let dx = g
                    .chunks(nn)
                    .flat_map(|m| m.iter().zip(mask.iter()).map(|(&v, &b)| if b != 0 { v } else { 0.0 }))
                    .collect();
                acc(*x, dx);
            }
            Op::AttnApply { a, v, heads } => {
                let (_, n, d, dh) = self.attn_dims(*v, *heads)?;
                let (ad, vd) = (self.value(*a).data(), self.value(*v).data());
                let mut da = vec![0.0; ad.len()];
                let mut dv = vec![0.0; vd.len()];
                da.par_chunks_mut(heads * n * n)
                    .zip(dv.par_chunks_mut(n * d))
                    .enumerate()
                    .for_each(|(gi, (dag, dvg))| {
                        for hh in 0..*heads {
                            for i in 0..n {
                                let go = &g[(gi * n + i) * d + hh * dh..][..dh];
                                for j in 0..n {
                                    let vj = &vd[(gi * n + j) * d + hh * dh..][..dh];
                                    dag[(hh * n + i) * n + j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                                    let w = ad[((gi * heads + hh) * n + i) * n + j];
                                    if w != 0.0 {
                                        for (dvx, &gv) in dvg[j * d + hh * dh..][..dh].iter_mut().zip(go) {
                                            *dvx += w * gv;
                                        }
                                    }
                                }
                            }
                        }
                    });
                acc(*a, da);
                acc(*v, dv);
            }
            Op::MeanTokens(x) => {
                let [gg, n, d] = self.shape(*x)[..] else { unreachable!("checked in forward") };
                let mut dx = vec![0.0; gg * n * d];
                for gi in 0..gg {
                    for t in 0..n {
                        for c in 0..d {
                            dx[(gi * n + t) * d + c] = g[gi * d + c] / n as f64;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::MeanTime { x, steps } => {
                let bc = g.len();
                let mut dx = vec![0.0; bc * steps];
                for t in 0..*steps {
                    for (o, v) in dx[t * bc..(t + 1) * bc].iter_mut().zip(g) {
                        *o = v / *steps as f64;
                    }
                }
                acc(*x, dx);
            }
            Op::CrossEntropy { logits, probs, target } => {
                let b = self.value(*logits).dims2()?.0 as f64;
                acc(*logits, probs.iter().zip(target).map(|(p, y)| g[0] * (p - y) / b).collect());
            }
        }
        Ok(())
    }
}

/// Gradients of one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a node; `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients, summed over every use on the tape.
    pub fn params(&self, tape: &Tape, n_params: usize) -> Vec<Option<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = (0..n_params).map(|_| None).collect();
        for (i, node) in tape.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                match &mut out[*id] {
                    Some(e) => e.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
        Tensor64::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    // Central differences of `f` with respect to the leaf at `which`.
    fn check<F>(inputs: Vec<Tensor64>, f: F, tol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let eps = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; input.len()]);
            for e in 0..input.len() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, v)| {
                            let mut v = v.clone();
                            if j == k {
                                v.data_mut()[e] += delta;
                            }
                            t.leaf(v)
                        })
                        .collect();
                    let o = f(&mut t, &vs);
                    t.value(o).data()[0]
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let err = (numeric - analytic[e]).abs();
                assert!(
                    err <= tol * numeric.abs().max(analytic[e].abs()).max(1.0),
                    "input {k} elem {e}: numeric {numeric} analytic {}",
                    analytic[e]
                );
            }
        }
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let x = Tensor64::new(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let w = Tensor64::from_fn(&[3, 2], |i| i as f64);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(w));
        let y = tape.matmul(xv, wv).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(wv).unwrap(), &[1.0, 1.0, -2.0, -2.0, 0.5, 0.5]);
    }

    #[test]
    fn empty_tape_is_usage_error() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::Usage(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor64::zeros(&[2]));
        assert!(matches!(tape.backward(v), Err(Error::Usage(_))));
    }

    #[test]
    fn matmul_bias_scale_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[4, 5]), rand_t(&mut rng, &[5]), rand_t(&mut rng, &[1])];
        check(
            inputs,
            |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                let y = t.add_bias(y, v[2], 1).unwrap();
                let y = t.scale_exp(y, v[3]);
                let z = t.sub(y, v[0]).ok();
                assert!(z.is_none());
                let y2 = t.reshape(y, &[15]).unwrap();
                let m = t.attn_mask(y2, Arc::from(vec![1u8; 15])).unwrap();
                let sq = t.reshape(m, &[3, 5]).unwrap();
                let w = t.matmul(v[0], v[1]).unwrap();
                let d = t.sub(sq, w).unwrap();
                let d2 = t.add(d, sq).unwrap();
                let d2t = t.reshape(d2, &[1, 15]).unwrap();
                let mt = t.reshape(m, &[15, 1]).unwrap();
                let o = t.matmul(d2t, mt).unwrap();
                t.sum(o)
            },
            1e-6,
        );
    }

    #[test]
    fn conv_and_pool_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![rand_t(&mut rng, &[5, 2, 4, 4]), rand_t(&mut rng, &[3, 2, 3, 3]), rand_t(&mut rng, &[5 * 3 * 2 * 2])];
        check(
            inputs,
            |t, v| {
                let y = t.conv2d(v[0], v[1], 1).unwrap();
                let y = t.maxpool2(y).unwrap();
                let y = t.reshape(y, &[60]).unwrap();
                let w = t.reshape(v[2], &[60]).unwrap();
                let y = t.add(y, w).unwrap();
                let r = t_row(t, y);
                let c = t_col(t, w);
                let m = t.matmul(r, c).unwrap();
                t.sum(m)
            },
            1e-5,
        );
    }

    fn t_row(t: &mut Tape, v: Var) -> Var {
        let n = t.value(v).len();
        t.reshape(v, &[1, n]).unwrap()
    }

    fn t_col(t: &mut Tape, v: Var) -> Var {
        let n = t.value(v).len();
        t.reshape(v, &[n, 1]).unwrap()
    }

    #[test]
    fn conv_matches_engine_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&mut rng, &[2, 3, 5, 4]);
        let w = rand_t(&mut rng, &[4, 3, 3, 3]);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
        let y = tape.conv2d(xv, wv, 1).unwrap();
        let engine = crate::tensor::conv2d(&x.map(|v| v as f32), &w.map(|v| v as f32), 1, 1).unwrap();
        assert_eq!(engine.shape(), tape.shape(y));
        for (a, b) in engine.data().iter().zip(tape.value(y).data()) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_grads_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![rand_t(&mut rng, &[4, 3, 2]), rand_t(&mut rng, &[3]), rand_t(&mut rng, &[3]), rand_t(&mut rng, &[24])];
        check(
            inputs.clone(),
            |t, v| {
                let (y, _) = t.batchnorm(v[0], v[1], v[2], 1, BnStats::Batch).unwrap();
                let y = t.reshape(y, &[1, 24]).unwrap();
                let w = t.reshape(v[3], &[24, 1]).unwrap();
                let o = t.matmul(y, w).unwrap();
                t.sum(o)
            },
            1e-5,
        );
        check(
            inputs,
            |t, v| {
                let (y, _) = t
                    .batchnorm(v[0], v[1], v[2], 1, BnStats::Running { mean: &[0.1, 0.2, -0.3], var: &[1.0, 0.5, 2.0] })
                    .unwrap();
                let y = t.reshape(y, &[1, 24]).unwrap();
                let w = t.reshape(v[3], &[24, 1]).unwrap();
                let o = t.matmul(y, w).unwrap();
                t.sum(o)
            },
            1e-5,
        );
    }

    #[test]
    fn attention_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (g, n, d) = (2, 4, 4);
        let mask: Arc<[u8]> = Arc::from((0..n * n).map(|i| u8::from(i % 3 != 0)).collect::<Vec<_>>());
        let inputs = vec![rand_t(&mut rng, &[g, n, d]), rand_t(&mut rng, &[g, n, d]), rand_t(&mut rng, &[g, n, d]), rand_t(&mut rng, &[d, 3])];
        check(
            inputs,
            move |t, v| {
                let a = t.attn_scores(v[0], v[1], 2).unwrap();
                let a = t.attn_mask(a, mask.clone()).unwrap();
                let o = t.attn_apply(a, v[2], 2).unwrap();
                let m = t.mean_tokens(o).unwrap();
                let l = t.matmul(m, v[3]).unwrap();
                let l = t.mean_time(l, 2).unwrap();
                t.cross_entropy(l, &[2], 0.1).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn masked_entries_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let a = tape.leaf(rand_t(&mut rng, &[1, 1, 3, 3]));
        let v = tape.leaf(rand_t(&mut rng, &[1, 3, 2]));
        let mask: Arc<[u8]> = Arc::from(vec![1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let am = tape.attn_mask(a, mask.clone()).unwrap();
        let o = tape.attn_apply(am, v, 1).unwrap();
        let l = tape.sum(o);
        let g = tape.backward(l).unwrap();
        for (gv, &m) in g.wrt(a).unwrap().iter().zip(mask.iter()) {
            if m == 0 {
                assert_eq!(*gv, 0.0);
            } else {
                assert_ne!(*gv, 0.0);
            }
        }
    }

    #[test]
    fn tokens_round_trip_layout() {
        let x = Tensor64::from_fn(&[1, 2, 2, 3], |i| i as f64);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let t = tape.to_tokens(xv).unwrap();
        assert_eq!(tape.shape(t), &[1, 6, 2]);
        // token 4 = (row 1, col 1); channel 1 is offset by 6
        assert_eq!(tape.value(t).data()[4 * 2..4 * 2 + 2], [4.0, 10.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        check(
            vec![rand_t(&mut rng, &[2, 3, 2, 2]), rand_t(&mut rng, &[24])],
            |t, v| {
                let y = t.to_tokens(v[0]).unwrap();
                let y = t.reshape(y, &[1, 24]).unwrap();
                let w = t.reshape(v[1], &[24, 1]).unwrap();
                let o = t.matmul(y, w).unwrap();
                t.sum(o)
            },
            1e-6,
        );
    }

    fn smooth(kind: NeuronKind) -> SpikeFn {
        SpikeFn {
            kind,
            v_theta: 0.8,
            n_max: 3,
            surrogate: SurrogateSpec::arctan(1.0),
            mode: SpikeMode::Smooth { sharpness: 4.0 },
        }
    }

    #[test]
    fn smooth_neuron_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for kind in [NeuronKind::Binary, NeuronKind::Burst] {
            let inputs = vec![
                Tensor64::from_fn(&[3, 5], |_| rng.random_range(-1.0..3.0)),
                Tensor64::full(&[1], 0.3),
                Tensor64::full(&[1], 1.2),
                rand_t(&mut rng, &[15]),
            ];
            check(
                inputs,
                move |t, v| {
                    let s = t.neuron(v[0], v[1], v[2], smooth(kind), 3).unwrap();
                    let s = t.reshape(s, &[1, 15]).unwrap();
                    let w = t.reshape(v[3], &[15, 1]).unwrap();
                    let o = t.matmul(s, w).unwrap();
                    t.sum(o)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn hard_neuron_matches_engine() {
        use crate::energy::LayerRecord;
        use crate::neuron::{NeuronLayer, NeuronParams};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in [NeuronKind::Binary, NeuronKind::Burst] {
            let x = Tensor64::from_fn(&[4, 6], |_| (rng.random_range(-1.0f32..4.0)) as f64);
            let (braw, araw) = (0.4f64, 2.0f64);
            let f = SpikeFn { kind, v_theta: 1.0, n_max: 5, surrogate: SurrogateSpec::default(), mode: SpikeMode::Hard };
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let bv = tape.leaf(Tensor64::full(&[1], braw));
            let av = tape.leaf(Tensor64::full(&[1], araw));
            let s = tape.neuron(xv, bv, av, f, 4).unwrap();
            let params = NeuronParams::new(squash(braw) as f32, squash(araw) as f32, 1.0, 5).unwrap();
            let mut layer = NeuronLayer::new(kind, params);
            let out = layer.run_sequence(&x.map(|v| v as f32), &mut LayerRecord::default()).unwrap();
            let tape_out: Vec<i32> = tape.value(s).data().iter().map(|&v| v as i32).collect();
            assert_eq!(out.data(), &tape_out[..]);
        }
    }

    #[test]
    fn hard_binary_uses_surrogate() {
        let f = SpikeFn {
            kind: NeuronKind::Binary,
            v_theta: 1.0,
            n_max: 1,
            surrogate: SurrogateSpec::default(),
            mode: SpikeMode::Hard,
        };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor64::new(&[1, 3], vec![0.2, 1.3, 5.0]).unwrap());
        let b = tape.leaf(Tensor64::full(&[1], 0.0));
        let a = tape.leaf(Tensor64::full(&[1], 0.0));
        let s = tape.neuron(x, b, a, f, 1).unwrap();
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        // rectangular width 1 around θ: only 1.3 lies inside |u-θ| < 0.5
        assert_eq!(g.wrt(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn dead_neuron_passes_no_gradient() {
        let f = SpikeFn {
            kind: NeuronKind::Burst,
            v_theta: 1.0,
            n_max: 4,
            surrogate: SurrogateSpec::default(),
            mode: SpikeMode::Hard,
        };
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor64::full(&[2, 2], -1.0));
        let x = tape.leaf(Tensor64::full(&[3, 2], 1.0));
        let y = tape.matmul(x, w).unwrap();
        let b = tape.leaf(Tensor64::full(&[1], 0.0));
        let a = tape.leaf(Tensor64::full(&[1], 0.0));
        let s = tape.neuron(y, b, a, f, 3).unwrap();
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(w).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn smoothed_cross_entropy_floor() {
        let c = 4;
        let eps = 0.1;
        let mut tape = Tape::new();
        // logits matching the smoothed target exactly reach the entropy floor
        let target: Vec<f64> = (0..c).map(|j| if j == 1 { 1.0 - eps + eps / c as f64 } else { eps / c as f64 }).collect();
        let logits = tape.leaf(Tensor64::new(&[1, c], target.iter().map(|p| p.ln()).collect()).unwrap());
        let l = tape.cross_entropy(logits, &[1], eps).unwrap();
        let floor: f64 = -target.iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((tape.value(l).data()[0] - floor).abs() < 1e-12);
        // without smoothing a confident correct prediction approaches zero
        let hard = tape.leaf(Tensor64::new(&[1, c], vec![0.0, 60.0, 0.0, 0.0]).unwrap());
        let l0 = tape.cross_entropy(hard, &[1], 0.0).unwrap();
        assert!(tape.value(l0).data()[0] < 1e-20);
        let l1 = tape.cross_entropy(hard, &[1], eps).unwrap();
        assert!(tape.value(l1).data()[0] > floor);
    }

    #[test]
    fn matmul_helpers_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (m, k, p) = (37, 29, 41);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = mm(&a, &b, m, k, p);
        let mut bt = vec![0.0; p * k];
        for i in 0..k {
            for j in 0..p {
                bt[j * k + i] = b[i * p + j];
            }
        }
        let c2 = mm_bt(&a, &bt, m, k, p);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let c3 = mm_at(&at, &b, k, m, p);
        for ((x, y), z) in c.iter().zip(&c2).zip(&c3) {
            assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
        }
    }
}
