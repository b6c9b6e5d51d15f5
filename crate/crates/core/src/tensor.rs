//! Dense row-major arrays and the bulk kernels the engine is built on.
//!
//! Floats are `f32`, spike payloads are `i32`. Time, when present, is the
//! outermost axis. Reductions accumulate in `f64`, which makes the
//! addition-only kernels agree bit-for-bit with their multiply-based
//! counterparts whenever spike counts are small integers.

use crate::energy::LayerRecord;
use crate::error::{Error, Result};
use crate::trap;

/// Row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

/// Float tensor (weights, membrane potentials, images).
pub type Tensor = Array<f32>;
/// Integer tensor (binary and burst spike counts).
pub type IntTensor = Array<i32>;

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::dim(format!("shape {shape:?} must have nonzero dimensions")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::dim(format!(
            "shape {shape:?} holds {n} elements but buffer has {len}"
        )));
    }
    Ok(())
}

impl<E: Copy + Default> Array<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// # Panics
    /// If any dimension is zero.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::default())
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("zero-sized dimension")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect()).expect("zero-sized dimension")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        check_shape(shape, self.data.len())?;
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> E {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} of size {d}");
            flat = flat * d + ix;
        }
        self.data[flat]
    }

    /// Interprets the array as a matrix.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::dim(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::dim(format!(
                "expected a rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn map<F: Copy + Default>(&self, f: impl Fn(E) -> F) -> Array<F> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

impl IntTensor {
    /// Sum of all entries (total spike count).
    pub fn total(&self) -> i64 {
        self.data.iter().map(|&s| s as i64).sum()
    }

    /// Number of nonzero entries.
    pub fn nnz(&self) -> u64 {
        self.data.iter().filter(|&&s| s != 0).count() as u64
    }

    pub fn to_float(&self) -> Tensor {
        self.map(|s| s as f32)
    }

    fn check_nonnegative(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|&s| s < 0) {
            Some(i) => Err(Error::Contract(format!(
                "{what} must be nonnegative spike counts; entry {i} is {}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }
}

/// Standard matrix product `a · b`.
pub fn matmul_float(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, p) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    trap::note_float_mul((m * k * p) as u64);
    let mut acc = vec![0f64; p];
    let mut out = Vec::with_capacity(m * p);
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for kk in 0..k {
            let a_ik = a.data[i * k + kk] as f64;
            let row = &b.data[kk * p..(kk + 1) * p];
            for (o, &w) in acc.iter_mut().zip(row) {
                *o += a_ik * w as f64;
            }
        }
        out.extend(acc.iter().map(|&x| x as f32));
    }
    Tensor::new(&[m, p], out)
}

/// Spike-driven matrix product using additions only.
///
/// A spike count `s` at `(i, k)` adds weight row `k` into output row `i`
/// exactly `s` times. The record's SOP count grows by `Σ spikes · P`.
pub fn matmul_addonly(spikes: &IntTensor, weights: &Tensor, rec: &mut LayerRecord) -> Result<Tensor> {
    let (m, k) = spikes.dims2()?;
    let (k2, p) = weights.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "addition-only matmul inner dimensions disagree: {:?} x {:?}",
            spikes.shape(),
            weights.shape()
        )));
    }
    spikes.check_nonnegative("matmul_addonly input")?;
    let mut acc = vec![0f64; p];
    let mut out = Vec::with_capacity(m * p);
    let mut events = 0u64;
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for kk in 0..k {
            let s = spikes.data[i * k + kk];
            if s == 0 {
                continue;
            }
            let row = &weights.data[kk * p..(kk + 1) * p];
            for _ in 0..s {
                for (o, &w) in acc.iter_mut().zip(row) {
                    *o += w as f64;
                }
            }
            events += s as u64;
        }
        out.extend(acc.iter().map(|&x| x as f32));
    }
    rec.sop += events * p as u64;
    Tensor::new(&[m, p], out)
}

/// Output spatial size of a convolution, or `None` if the window does not fit.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

fn conv_geom(in_shape: &[usize], kernel: &Tensor, stride: usize, padding: usize) -> Result<ConvGeom> {
    let [batch, cin, h, w] = in_shape[..] else {
        return Err(Error::dim(format!("conv2d input must be rank 4, got {in_shape:?}")));
    };
    let (cout, kcin, kh, kw) = kernel.dims4()?;
    if kcin != cin {
        return Err(Error::dim(format!(
            "conv2d kernel {:?} expects {kcin} input channels, input {in_shape:?} has {cin}",
            kernel.shape()
        )));
    }
    let (Some(ho), Some(wo)) = (conv_out_dim(h, kh, stride, padding), conv_out_dim(w, kw, stride, padding))
    else {
        return Err(Error::dim(format!(
            "conv2d geometry incompatible: input {in_shape:?}, kernel {:?}, stride {stride}, padding {padding}",
            kernel.shape()
        )));
    };
    Ok(ConvGeom {
        batch,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho,
        wo,
        stride,
        pad: padding,
    })
}

/// Cross-correlation applied independently to each leading-axis slice
/// (timestep or sample). Input `[B, C, H, W]`, kernel `[Co, C, kh, kw]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geom(input.shape(), kernel, stride, padding)?;
    let mut out = vec![0f32; g.batch * g.cout * g.ho * g.wo];
    let mut muls = 0u64;
    for b in 0..g.batch {
        for co in 0..g.cout {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = 0f64;
                    for ci in 0..g.cin {
                        for ky in 0..g.kh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.kw {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let x = input.data[((b * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize];
                                let k = kernel.data[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                                acc += x as f64 * k as f64;
                                muls += 1;
                            }
                        }
                    }
                    out[((b * g.cout + co) * g.ho + oy) * g.wo + ox] = acc as f32;
                }
            }
        }
    }
    trap::note_float_mul(muls);
    Tensor::new(&[g.batch, g.cout, g.ho, g.wo], out)
}

/// [`conv2d`] that also tallies its multiply-accumulates into `rec.mac`.
pub fn conv2d_counted(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    rec: &mut LayerRecord,
) -> Result<Tensor> {
    let out = conv2d(input, kernel, stride, padding)?;
    let g = conv_geom(input.shape(), kernel, stride, padding)?;
    let mut taps = 0u64;
    for oy in 0..g.ho {
        let ys = (0..g.kh)
            .filter(|ky| {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                iy >= 0 && iy < g.h as isize
            })
            .count();
        for ox in 0..g.wo {
            let xs = (0..g.kw)
                .filter(|kx| {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    ix >= 0 && ix < g.w as isize
                })
                .count();
            taps += (ys * xs) as u64;
        }
    }
    rec.mac += taps * (g.batch * g.cout * g.cin) as u64;
    Ok(out)
}

/// Event-driven convolution over spike counts.
///
/// Each spike of value `s` scatters its kernel footprint into the output `s`
/// times; the SOP count grows by one per weight added.
pub fn conv2d_addonly(
    spikes: &IntTensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    rec: &mut LayerRecord,
) -> Result<Tensor> {
    let g = conv_geom(spikes.shape(), kernel, stride, padding)?;
    spikes.check_nonnegative("conv2d_addonly input")?;
    let mut acc = vec![0f64; g.batch * g.cout * g.ho * g.wo];
    let mut sops = 0u64;
    for b in 0..g.batch {
        for ci in 0..g.cin {
            for iy in 0..g.h {
                for ix in 0..g.w {
                    let s = spikes.data[((b * g.cin + ci) * g.h + iy) * g.w + ix];
                    if s == 0 {
                        continue;
                    }
                    for ky in 0..g.kh {
                        let ty = iy as isize + g.pad as isize - ky as isize;
                        if ty < 0 || ty % g.stride as isize != 0 {
                            continue;
                        }
                        let oy = (ty / g.stride as isize) as usize;
                        if oy >= g.ho {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let tx = ix as isize + g.pad as isize - kx as isize;
                            if tx < 0 || tx % g.stride as isize != 0 {
                                continue;
                            }
                            let ox = (tx / g.stride as isize) as usize;
                            if ox >= g.wo {
                                continue;
                            }
                            for co in 0..g.cout {
                                let w = kernel.data[((co * g.cin + ci) * g.kh + ky) * g.kw + kx] as f64;
                                let o = &mut acc[((b * g.cout + co) * g.ho + oy) * g.wo + ox];
                                for _ in 0..s {
                                    *o += w;
                                }
                            }
                            sops += s as u64 * g.cout as u64;
                        }
                    }
                }
            }
        }
    }
    rec.sop += sops;
    Tensor::new(
        &[g.batch, g.cout, g.ho, g.wo],
        acc.into_iter().map(|x| x as f32).collect(),
    )
}

/// 2×2 max pooling with stride 2 over the last two axes of a rank-4 array.
pub fn maxpool2<E: Copy + Default + PartialOrd>(x: &Array<E>) -> Result<Array<E>> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!("maxpool2 needs even spatial dims, got {:?}", x.shape())));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    for plane in x.data.chunks(h * w) {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = plane[2 * oy * w + 2 * ox];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let v = plane[(2 * oy + dy) * w + 2 * ox + dx];
                    if v > best {
                        best = v;
                    }
                }
                out.push(best);
            }
        }
    }
    Array::new(&[b, c, ho, wo], out)
}

/// Default numerical guard added to variances.
pub const BN_EPS: f32 = 1e-5;
/// Default running-statistics momentum.
pub const BN_MOMENTUM: f32 = 0.1;

/// Batch-normalization parameters and running statistics for `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

impl BnParams {
    /// Identity statistics: mean 0, variance 1, γ = 1, β = 0.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Inference-time per-channel `(scale, shift)` with `y = scale·x + shift`.
    pub fn affine(&self) -> (Vec<f32>, Vec<f32>) {
        let mut scale = Vec::with_capacity(self.channels());
        let mut shift = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let inv = 1.0 / (self.running_var[c] as f64 + self.eps as f64).sqrt();
            let s = self.gamma[c] as f64 * inv;
            scale.push(s as f32);
            shift.push((self.beta[c] as f64 - s * self.running_mean[c] as f64) as f32);
        }
        (scale, shift)
    }

    /// Folds inference BN into a `[in, out]` linear weight; returns the new
    /// weight and the per-output bias.
    pub fn fold_linear(&self, weight: &Tensor) -> Result<(Tensor, Vec<f32>)> {
        let (k, p) = weight.dims2()?;
        if p != self.channels() {
            return Err(Error::dim(format!(
                "cannot fold {} BN channels into linear weight {:?}",
                self.channels(),
                weight.shape()
            )));
        }
        let (scale, shift) = self.affine();
        let mut w = weight.clone();
        for row in w.data.chunks_mut(p) {
            for (x, s) in row.iter_mut().zip(&scale) {
                *x *= s;
            }
        }
        debug_assert_eq!(w.len(), k * p);
        Ok((w, shift))
    }

    /// Folds inference BN into a `[Co, Ci, kh, kw]` conv kernel.
    pub fn fold_conv(&self, kernel: &Tensor) -> Result<(Tensor, Vec<f32>)> {
        let (co, ..) = kernel.dims4()?;
        if co != self.channels() {
            return Err(Error::dim(format!(
                "cannot fold {} BN channels into conv kernel {:?}",
                self.channels(),
                kernel.shape()
            )));
        }
        let (scale, shift) = self.affine();
        let mut w = kernel.clone();
        let per = w.len() / co;
        for (c, chunk) in w.data.chunks_mut(per).enumerate() {
            chunk.iter_mut().for_each(|x| *x *= scale[c]);
        }
        Ok((w, shift))
    }
}

/// Splits a shape around `axis` into `(outer, channels, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("channel axis {axis} out of range for {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Batch normalization over every axis except `channel_axis`.
///
/// Train mode normalizes with the batch statistics (population variance)
/// and updates the running statistics; infer mode applies the frozen affine.
pub fn batchnorm(x: &Tensor, bn: &mut BnParams, mode: BnMode, channel_axis: usize) -> Result<Tensor> {
    let (outer, c, inner) = split_axis(x.shape(), channel_axis)?;
    if c != bn.channels() {
        return Err(Error::dim(format!(
            "batchnorm has {} channels, input {:?} has {c} on axis {channel_axis}",
            bn.channels(),
            x.shape()
        )));
    }
    // Per channel: y = (x - center) * scale + shift, evaluated in f64.
    let (center, scale, shift): (Vec<f64>, Vec<f64>, Vec<f64>) = match mode {
        BnMode::Infer => {
            let (scale, shift) = bn.affine();
            (
                vec![0.0; c],
                scale.iter().map(|&v| v as f64).collect(),
                shift.iter().map(|&v| v as f64).collect(),
            )
        }
        BnMode::Train => {
            let count = (outer * inner) as f64;
            let mut mean = vec![0f64; c];
            for o in 0..outer {
                for (ch, m) in mean.iter_mut().enumerate() {
                    let base = (o * c + ch) * inner;
                    *m += x.data[base..base + inner].iter().map(|&v| v as f64).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            let mut var = vec![0f64; c];
            for o in 0..outer {
                for (ch, v) in var.iter_mut().enumerate() {
                    let base = (o * c + ch) * inner;
                    *v += x.data[base..base + inner]
                        .iter()
                        .map(|&e| (e as f64 - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            let mom = bn.momentum as f64;
            let mut scale = Vec::with_capacity(c);
            for ch in 0..c {
                scale.push(bn.gamma[ch] as f64 / (var[ch] + bn.eps as f64).sqrt());
                bn.running_mean[ch] = ((1.0 - mom) * bn.running_mean[ch] as f64 + mom * mean[ch]) as f32;
                bn.running_var[ch] = ((1.0 - mom) * bn.running_var[ch] as f64 + mom * var[ch]) as f32;
            }
            (mean, scale, bn.beta.iter().map(|&b| b as f64).collect())
        }
    };
    let mut out = x.clone();
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for v in &mut out.data[base..base + inner] {
                *v = ((*v as f64 - center[ch]) * scale[ch] + shift[ch]) as f32;
            }
        }
    }
    Ok(out)
}

/// Adds a per-channel bias along `channel_axis` in place.
pub fn add_channel_bias(x: &mut Tensor, bias: &[f32], channel_axis: usize) -> Result<()> {
    let (outer, c, inner) = split_axis(x.shape(), channel_axis)?;
    if c != bias.len() {
        return Err(Error::dim(format!(
            "bias of length {} does not match axis {channel_axis} of {:?}",
            bias.len(),
            x.shape()
        )));
    }
    for o in 0..outer {
        for (ch, &b) in bias.iter().enumerate() {
            let base = (o * c + ch) * inner;
            x.data[base..base + inner].iter_mut().for_each(|v| *v += b);
        }
    }
    Ok(())
}

/// Elementwise `a + b` for equal shapes.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "cannot add shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Tensor::new(
        a.shape(),
        a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    )
}
