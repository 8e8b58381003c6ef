//! Forward and backward kernels for the differentiable primitives.
//!
//! All reductions accumulate in `f64` and visit their terms in a fixed order,
//! so a given output element is computed by the same sequence of operations
//! regardless of how large the surrounding tensor is. Tiled rendering relies
//! on this.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Stride and padding of a (transposed) convolution. The kernel size comes
/// from the weight tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, output_padding: usize) -> Self {
        ConvGeom {
            stride,
            padding,
            output_padding,
        }
    }

    /// Output extent of a transposed convolution along one axis.
    pub fn transposed_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let len = (input as isize - 1) * self.stride as isize - 2 * self.padding as isize
            + kernel as isize
            + self.output_padding as isize;
        (input > 0 && len > 0).then_some(len as usize)
    }

    /// Output extent of a regular convolution along one axis.
    pub fn conv_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (input > 0 && self.stride > 0 && padded >= kernel)
            .then(|| (padded - kernel) / self.stride + 1)
    }
}

/// Which elements `i` of the small axis map to a valid index
/// `i * stride + k - pad` of the big axis.
#[inline]
fn valid_range(small: usize, big: usize, stride: usize, k: usize, pad: usize) -> Range<usize> {
    let s = stride as isize;
    let off = k as isize - pad as isize;
    // i*s + off >= 0  <=>  i >= ceil(-off / s)
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    // i*s + off <= big-1
    let hi_num = big as isize - 1 - off;
    if hi_num < 0 {
        return 0..0;
    }
    let hi = (hi_num / s + 1).min(small as isize);
    if lo >= hi {
        0..0
    } else {
        lo as usize..hi as usize
    }
}

/// Strided planes are stored split by output phase: element `(y, x)` lives
/// in sub-plane `(y % s, x % s)` at `(y / s, x / s)`. Each kernel tap then
/// touches a contiguous run of every row.
#[derive(Clone, Copy)]
struct Phases {
    stride: usize,
    height: usize,
    width: usize,
    ph: usize,
    pw: usize,
}

impl Phases {
    fn new(stride: usize, height: usize, width: usize) -> Self {
        Phases {
            stride,
            height,
            width,
            ph: height.div_ceil(stride),
            pw: width.div_ceil(stride),
        }
    }

    fn len(&self) -> usize {
        self.stride * self.stride * self.ph * self.pw
    }

    fn index(&self, y: usize, x: usize) -> usize {
        let s = self.stride;
        ((y % s) * s + x % s) * self.ph * self.pw + (y / s) * self.pw + x / s
    }

    fn split<T: Copy + Default>(&self, plane: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                out[self.index(y, x)] = plane[y * self.width + x];
            }
        }
        out
    }

    fn merge(&self, phases: &[f64], plane: &mut [f64]) {
        for y in 0..self.height {
            for x in 0..self.width {
                plane[y * self.width + x] = phases[self.index(y, x)];
            }
        }
    }

    /// For tap `(ky, kx)`, the valid rows and columns of the small plane, and
    /// the offset of the run for small row `i` in the phase buffer.
    fn tap(
        &self,
        (sh, sw): (usize, usize),
        pad: usize,
        (ky, kx): (usize, usize),
    ) -> (Range<usize>, Range<usize>, impl Fn(usize) -> usize) {
        let s = self.stride as isize;
        let mut rows = valid_range(sh, self.height, self.stride, ky, pad);
        let cols = valid_range(sw, self.width, self.stride, kx, pad);
        if cols.is_empty() {
            rows = 0..0;
        }
        let (oy, ox) = (ky as isize - pad as isize, kx as isize - pad as isize);
        let base = (oy.rem_euclid(s) * s + ox.rem_euclid(s)) as usize * self.ph * self.pw;
        let (dy, dx) = (oy.div_euclid(s), ox.div_euclid(s));
        let (pw, c0) = (self.pw, cols.start as isize);
        let offset = move |i: usize| base + ((i as isize + dy) as usize) * pw + (c0 + dx) as usize;
        (rows, cols, offset)
    }
}

/// `big[i*s+ky-p, j*s+kx-p] += small[i, j] * w` over the valid region, with
/// `big` in phase layout.
fn scatter_plane<T: Scalar>(
    big: &mut [f64],
    layout: &Phases,
    small: &[T],
    (sh, sw): (usize, usize),
    pad: usize,
    tap: (usize, usize),
    w: f64,
) {
    let (rows, cols, offset) = layout.tap((sh, sw), pad, tap);
    let n = cols.len();
    for i in rows {
        let src = &small[i * sw + cols.start..i * sw + cols.end];
        let at = offset(i);
        for (d, s) in big[at..at + n].iter_mut().zip(src) {
            *d += s.as_f64() * w;
        }
    }
}

/// `small[i, j] += big[i*s+ky-p, j*s+kx-p] * w` over the valid region, with
/// `big` in phase layout.
fn gather_plane<T: Scalar>(
    small: &mut [f64],
    (sh, sw): (usize, usize),
    big: &[T],
    layout: &Phases,
    pad: usize,
    tap: (usize, usize),
    w: f64,
) {
    let (rows, cols, offset) = layout.tap((sh, sw), pad, tap);
    let n = cols.len();
    for i in rows {
        let dst = &mut small[i * sw + cols.start..i * sw + cols.end];
        let at = offset(i);
        for (d, s) in dst.iter_mut().zip(&big[at..at + n]) {
            *d += s.as_f64() * w;
        }
    }
}

/// `Σ small[i, j] * big[i*s+ky-p, j*s+kx-p]` over the valid region, with
/// `big` in phase layout.
fn gather_dot<T: Scalar>(
    small: &[T],
    (sh, sw): (usize, usize),
    big: &[T],
    layout: &Phases,
    pad: usize,
    tap: (usize, usize),
) -> f64 {
    let (rows, cols, offset) = layout.tap((sh, sw), pad, tap);
    let n = cols.len();
    let mut acc = 0.0;
    for i in rows {
        let a = &small[i * sw + cols.start..i * sw + cols.end];
        let at = offset(i);
        for (x, y) in a.iter().zip(&big[at..at + n]) {
            acc += x.as_f64() * y.as_f64();
        }
    }
    acc
}

/// Every plane of `t` in phase layout, concatenated.
fn split_planes<T: Scalar>(t: &Tensor4<T>, layout: &Phases) -> Vec<T> {
    let s = t.shape();
    let mut out = Vec::with_capacity(s.batch * s.channels * layout.len());
    for n in 0..s.batch {
        for c in 0..s.channels {
            out.extend(layout.split(t.plane(n, c)));
        }
    }
    out
}

fn to_tensor<T: Scalar>(shape: Shape4, acc: Vec<f64>) -> Tensor4<T> {
    let data = acc.into_iter().map(T::from_f64).collect();
    Tensor4::from_vec(shape, data).expect("accumulator sized from shape")
}

fn check_bias<T>(bias: Option<&[T]>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(Error::Dimension(format!(
            "bias has {} entries but the layer has {channels} output channels",
            b.len()
        ))),
        _ => Ok(()),
    }
}

/// Transposed 2-D convolution. `weight` is laid out (in_ch, out_ch, kh, kw).
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    geom: ConvGeom,
) -> Result<Tensor4<T>> {
    let xs = input.shape();
    let ws = weight.shape();
    if ws.batch != xs.channels {
        return Err(Error::Dimension(format!(
            "conv_transpose2d: input {xs} has {} channels but weight {ws} expects {}",
            xs.channels, ws.batch
        )));
    }
    if geom.stride == 0 || geom.output_padding >= geom.stride {
        return Err(Error::Validation(format!(
            "conv_transpose2d: invalid geometry {geom:?}"
        )));
    }
    let (kh, kw) = (ws.height, ws.width);
    let (oh, ow) = match (
        geom.transposed_len(xs.height, kh),
        geom.transposed_len(xs.width, kw),
    ) {
        (Some(h), Some(w)) => (h, w),
        _ => {
            return Err(Error::Dimension(format!(
                "conv_transpose2d: input {xs} with weight {ws} and {geom:?} has empty output"
            )))
        }
    };
    let out_ch = ws.channels;
    check_bias(bias, out_ch)?;
    let out_shape = Shape4::new(xs.batch, out_ch, oh, ow);
    let layout = Phases::new(geom.stride, oh, ow);
    let mut acc = vec![0.0f64; out_shape.numel()];
    acc.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (n, oc) = (idx / out_ch, idx % out_ch);
            let start = bias.map_or(0.0, |b| b[oc].as_f64());
            let mut phases = vec![start; layout.len()];
            for ic in 0..xs.channels {
                let x = input.plane(n, ic);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let w = weight.get(ic, oc, ky, kx).as_f64();
                        scatter_plane(
                            &mut phases,
                            &layout,
                            x,
                            (xs.height, xs.width),
                            geom.padding,
                            (ky, kx),
                            w,
                        );
                    }
                }
            }
            layout.merge(&phases, plane);
        });
    Ok(to_tensor(out_shape, acc))
}

/// Gradient of [`conv_transpose2d`] with respect to its input.
pub fn conv_transpose2d_grad_input<T: Scalar>(
    grad_out: &Tensor4<T>,
    weight: &Tensor4<T>,
    input_shape: Shape4,
    geom: ConvGeom,
) -> Tensor4<T> {
    let gs = grad_out.shape();
    let ws = weight.shape();
    let (ih, iw) = (input_shape.height, input_shape.width);
    let in_ch = input_shape.channels;
    let layout = Phases::new(geom.stride, gs.height, gs.width);
    let split = split_planes(grad_out, &layout);
    let mut acc = vec![0.0f64; input_shape.numel()];
    acc.par_chunks_mut(ih * iw)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (n, ic) = (idx / in_ch, idx % in_ch);
            for oc in 0..gs.channels {
                let at = (n * gs.channels + oc) * layout.len();
                let g = &split[at..at + layout.len()];
                for ky in 0..ws.height {
                    for kx in 0..ws.width {
                        let w = weight.get(ic, oc, ky, kx).as_f64();
                        gather_plane(
                            plane,
                            (ih, iw),
                            g,
                            &layout,
                            geom.padding,
                            (ky, kx),
                            w,
                        );
                    }
                }
            }
        });
    to_tensor(input_shape, acc)
}

/// Gradient of [`conv_transpose2d`] with respect to its weight.
pub fn conv_transpose2d_grad_weight<T: Scalar>(
    grad_out: &Tensor4<T>,
    input: &Tensor4<T>,
    weight_shape: Shape4,
    geom: ConvGeom,
) -> Tensor4<T> {
    let gs = grad_out.shape();
    let xs = input.shape();
    let (kh, kw) = (weight_shape.height, weight_shape.width);
    let out_ch = weight_shape.channels;
    let layout = Phases::new(geom.stride, gs.height, gs.width);
    let split = split_planes(grad_out, &layout);
    let mut acc = vec![0.0f64; weight_shape.numel()];
    acc.par_chunks_mut(kh * kw)
        .enumerate()
        .for_each(|(idx, taps)| {
            let (ic, oc) = (idx / out_ch, idx % out_ch);
            for n in 0..xs.batch {
                let x = input.plane(n, ic);
                let at = (n * gs.channels + oc) * layout.len();
                let g = &split[at..at + layout.len()];
                for ky in 0..kh {
                    for kx in 0..kw {
                        taps[ky * kw + kx] += gather_dot(
                            x,
                            (xs.height, xs.width),
                            g,
                            &layout,
                            geom.padding,
                            (ky, kx),
                        );
                    }
                }
            }
        });
    to_tensor(weight_shape, acc)
}

/// Per-channel sum of a gradient, i.e. the bias gradient of a convolution.
pub fn channel_sums<T: Scalar>(grad_out: &Tensor4<T>) -> Vec<T> {
    let s = grad_out.shape();
    (0..s.channels)
        .map(|c| {
            let mut acc = 0.0;
            for n in 0..s.batch {
                acc += grad_out.plane(n, c).iter().map(|v| v.as_f64()).sum::<f64>();
            }
            T::from_f64(acc)
        })
        .collect()
}

/// Regular strided 2-D convolution (cross-correlation). `weight` is laid out
/// (out_ch, in_ch, kh, kw).
pub fn conv2d<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    geom: ConvGeom,
) -> Result<Tensor4<T>> {
    let xs = input.shape();
    let ws = weight.shape();
    if ws.channels != xs.channels {
        return Err(Error::Dimension(format!(
            "conv2d: input {xs} has {} channels but weight {ws} expects {}",
            xs.channels, ws.channels
        )));
    }
    let (kh, kw) = (ws.height, ws.width);
    let (oh, ow) = match (geom.conv_len(xs.height, kh), geom.conv_len(xs.width, kw)) {
        (Some(h), Some(w)) => (h, w),
        _ => {
            return Err(Error::Dimension(format!(
                "conv2d: input {xs} is smaller than kernel {ws} under {geom:?}"
            )))
        }
    };
    let out_ch = ws.batch;
    check_bias(bias, out_ch)?;
    let out_shape = Shape4::new(xs.batch, out_ch, oh, ow);
    let layout = Phases::new(geom.stride, xs.height, xs.width);
    let split = split_planes(input, &layout);
    let mut acc = vec![0.0f64; out_shape.numel()];
    acc.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (n, oc) = (idx / out_ch, idx % out_ch);
            if let Some(b) = bias {
                plane.fill(b[oc].as_f64());
            }
            for ic in 0..xs.channels {
                let at = (n * xs.channels + ic) * layout.len();
                let x = &split[at..at + layout.len()];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let w = weight.get(oc, ic, ky, kx).as_f64();
                        gather_plane(
                            plane,
                            (oh, ow),
                            x,
                            &layout,
                            geom.padding,
                            (ky, kx),
                            w,
                        );
                    }
                }
            }
        });
    Ok(to_tensor(out_shape, acc))
}

pub fn conv2d_grad_input<T: Scalar>(
    grad_out: &Tensor4<T>,
    weight: &Tensor4<T>,
    input_shape: Shape4,
    geom: ConvGeom,
) -> Tensor4<T> {
    let gs = grad_out.shape();
    let ws = weight.shape();
    let (ih, iw) = (input_shape.height, input_shape.width);
    let in_ch = input_shape.channels;
    let layout = Phases::new(geom.stride, ih, iw);
    let mut acc = vec![0.0f64; input_shape.numel()];
    acc.par_chunks_mut(ih * iw)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (n, ic) = (idx / in_ch, idx % in_ch);
            let mut phases = vec![0.0; layout.len()];
            for oc in 0..gs.channels {
                let g = grad_out.plane(n, oc);
                for ky in 0..ws.height {
                    for kx in 0..ws.width {
                        let w = weight.get(oc, ic, ky, kx).as_f64();
                        scatter_plane(
                            &mut phases,
                            &layout,
                            g,
                            (gs.height, gs.width),
                            geom.padding,
                            (ky, kx),
                            w,
                        );
                    }
                }
            }
            layout.merge(&phases, plane);
        });
    to_tensor(input_shape, acc)
}

pub fn conv2d_grad_weight<T: Scalar>(
    grad_out: &Tensor4<T>,
    input: &Tensor4<T>,
    weight_shape: Shape4,
    geom: ConvGeom,
) -> Tensor4<T> {
    let gs = grad_out.shape();
    let xs = input.shape();
    let (kh, kw) = (weight_shape.height, weight_shape.width);
    let in_ch = weight_shape.channels;
    let layout = Phases::new(geom.stride, xs.height, xs.width);
    let split = split_planes(input, &layout);
    let mut acc = vec![0.0f64; weight_shape.numel()];
    acc.par_chunks_mut(kh * kw)
        .enumerate()
        .for_each(|(idx, taps)| {
            let (oc, ic) = (idx / in_ch, idx % in_ch);
            for n in 0..xs.batch {
                let g = grad_out.plane(n, oc);
                let at = (n * xs.channels + ic) * layout.len();
                let x = &split[at..at + layout.len()];
                for ky in 0..kh {
                    for kx in 0..kw {
                        taps[ky * kw + kx] += gather_dot(
                            g,
                            (gs.height, gs.width),
                            x,
                            &layout,
                            geom.padding,
                            (ky, kx),
                        );
                    }
                }
            }
        });
    to_tensor(weight_shape, acc)
}

pub fn avg_pool2d<T: Scalar>(input: &Tensor4<T>, k: usize) -> Result<Tensor4<T>> {
    let s = input.shape();
    if k == 0 || !s.height.is_multiple_of(k) || !s.width.is_multiple_of(k) {
        return Err(Error::Dimension(format!(
            "avg_pool2d: spatial size {}x{} is not divisible by {k}",
            s.height, s.width
        )));
    }
    let (oh, ow) = (s.height / k, s.width / k);
    let out_shape = Shape4::new(s.batch, s.channels, oh, ow);
    let norm = 1.0 / (k * k) as f64;
    let mut acc = vec![0.0f64; out_shape.numel()];
    for (idx, plane) in acc.chunks_mut(oh * ow).enumerate() {
        let x = input.plane(idx / s.channels, idx % s.channels);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum = 0.0;
                for dy in 0..k {
                    let row = &x[(oy * k + dy) * s.width + ox * k..][..k];
                    sum += row.iter().map(|v| v.as_f64()).sum::<f64>();
                }
                plane[oy * ow + ox] = sum * norm;
            }
        }
    }
    Ok(to_tensor(out_shape, acc))
}

pub fn avg_pool2d_grad<T: Scalar>(grad_out: &Tensor4<T>, k: usize, input_shape: Shape4) -> Tensor4<T> {
    let norm = T::from_f64(1.0 / (k * k) as f64);
    Tensor4::from_fn(input_shape, |n, c, h, w| {
        grad_out.get(n, c, h / k, w / k) * norm
    })
}

/// Per-channel constant affine map `(x - mean) / sqrt(var + eps) * gamma + beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAffine {
    pub scale: Vec<f64>,
    pub mean: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ChannelAffine {
    pub fn from_batch_norm(
        mean: &[f32],
        var: &[f32],
        gamma: &[f32],
        beta: &[f32],
        eps: f64,
    ) -> Result<Self> {
        let c = mean.len();
        if var.len() != c || gamma.len() != c || beta.len() != c {
            return Err(Error::Dimension(format!(
                "batch norm vectors have lengths mean={c}, var={}, gamma={}, beta={}",
                var.len(),
                gamma.len(),
                beta.len()
            )));
        }
        if let Some(v) = var.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Validation(format!(
                "batch norm variance must be non-negative, got {v}"
            )));
        }
        let scale = var
            .iter()
            .zip(gamma)
            .map(|(&v, &g)| g as f64 / (v as f64 + eps).sqrt())
            .collect::<Vec<_>>();
        if scale.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric(
                "batch norm with zero variance and zero eps".into(),
            ));
        }
        Ok(ChannelAffine {
            scale,
            mean: mean.iter().map(|&v| v as f64).collect(),
            beta: beta.iter().map(|&v| v as f64).collect(),
        })
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn apply<T: Scalar>(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        let s = input.shape();
        if s.channels != self.channels() {
            return Err(Error::Dimension(format!(
                "batch norm over {} channels applied to {s}",
                self.channels()
            )));
        }
        let mut out = input.clone();
        for (idx, plane) in out.data_mut().chunks_mut(s.plane()).enumerate() {
            let c = idx % s.channels;
            let (m, k, b) = (self.mean[c], self.scale[c], self.beta[c]);
            for v in plane {
                *v = T::from_f64((v.as_f64() - m) * k + b);
            }
        }
        Ok(out)
    }

    pub fn grad<T: Scalar>(&self, grad_out: &Tensor4<T>) -> Tensor4<T> {
        let s = grad_out.shape();
        let mut out = grad_out.clone();
        for (idx, plane) in out.data_mut().chunks_mut(s.plane()).enumerate() {
            let k = self.scale[idx % s.channels];
            for v in plane {
                *v = T::from_f64(v.as_f64() * k);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sin,
}

impl Activation {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sin => x.sin(),
        }
    }

    /// Derivative at input `x`; relu'(0) is 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Sin => x.cos(),
        }
    }
}

pub fn activate<T: Scalar>(input: &Tensor4<T>, f: Activation) -> Tensor4<T> {
    input.map(|v| T::from_f64(f.eval(v.as_f64())))
}

pub fn activate_grad<T: Scalar>(grad_out: &Tensor4<T>, input: &Tensor4<T>, f: Activation) -> Tensor4<T> {
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(g, x)| T::from_f64(g.as_f64() * f.derivative(x.as_f64())))
        .collect();
    Tensor4::from_vec(grad_out.shape(), data).expect("same shape")
}

/// Plane waves `sin(k_y * (y0 + y) + k_x * (x0 + x) + phase)` for each wave.
///
/// `wave_numbers` has `2 * phases.len()` channels, interleaved as
/// `(k_y, k_x)` per wave; `origin` is the absolute lattice coordinate of the
/// tensor's top-left position.
pub fn plane_wave<T: Scalar>(
    wave_numbers: &Tensor4<T>,
    phases: &[f64],
    origin: (usize, usize),
) -> Result<Tensor4<T>> {
    let s = wave_numbers.shape();
    if s.channels != 2 * phases.len() {
        return Err(Error::Dimension(format!(
            "plane_wave: {} wave-number channels for {} phases",
            s.channels,
            phases.len()
        )));
    }
    let out_shape = Shape4::new(s.batch, phases.len(), s.height, s.width);
    Ok(Tensor4::from_fn(out_shape, |n, i, y, x| {
        T::from_f64(wave_argument(wave_numbers, phases, origin, n, i, y, x).sin())
    }))
}

#[inline]
fn wave_argument<T: Scalar>(
    k: &Tensor4<T>,
    phases: &[f64],
    origin: (usize, usize),
    n: usize,
    i: usize,
    y: usize,
    x: usize,
) -> f64 {
    let ky = k.get(n, 2 * i, y, x).as_f64();
    let kx = k.get(n, 2 * i + 1, y, x).as_f64();
    ky * (origin.0 + y) as f64 + kx * (origin.1 + x) as f64 + phases[i]
}

pub fn plane_wave_grad<T: Scalar>(
    grad_out: &Tensor4<T>,
    wave_numbers: &Tensor4<T>,
    phases: &[f64],
    origin: (usize, usize),
) -> Tensor4<T> {
    Tensor4::from_fn(wave_numbers.shape(), |n, c, y, x| {
        let i = c / 2;
        let arg = wave_argument(wave_numbers, phases, origin, n, i, y, x);
        let coord = if c % 2 == 0 { origin.0 + y } else { origin.1 + x } as f64;
        T::from_f64(grad_out.get(n, i, y, x).as_f64() * arg.cos() * coord)
    })
}

pub fn concat_channels<T: Scalar>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Validation("concat of zero tensors".into()))?
        .shape();
    for p in parts {
        let s = p.shape();
        if s.batch != first.batch || s.height != first.height || s.width != first.width {
            return Err(Error::Dimension(format!(
                "concat_channels: {s} does not match {first} outside the channel axis"
            )));
        }
    }
    let channels = parts.iter().map(|p| p.shape().channels).sum();
    let shape = Shape4::new(first.batch, channels, first.height, first.width);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..first.batch {
        for p in parts {
            for c in 0..p.shape().channels {
                data.extend_from_slice(p.plane(n, c));
            }
        }
    }
    Tensor4::from_vec(shape, data)
}

/// Extracts channels `[start, start + count)`.
pub fn channel_slice<T: Scalar>(input: &Tensor4<T>, start: usize, count: usize) -> Tensor4<T> {
    let s = input.shape();
    let shape = Shape4::new(s.batch, count, s.height, s.width);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..s.batch {
        for c in start..start + count {
            data.extend_from_slice(input.plane(n, c));
        }
    }
    Tensor4::from_vec(shape, data).expect("sized from shape")
}

pub fn channel_mean<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    let s = input.shape();
    let shape = Shape4::new(s.batch, 1, s.height, s.width);
    let inv = 1.0 / s.channels as f64;
    Tensor4::from_fn(shape, |n, _, h, w| {
        let mut acc = 0.0;
        for c in 0..s.channels {
            acc += input.get(n, c, h, w).as_f64();
        }
        T::from_f64(acc * inv)
    })
}

pub fn channel_mean_grad<T: Scalar>(grad_out: &Tensor4<T>, input_shape: Shape4) -> Tensor4<T> {
    let inv = 1.0 / input_shape.channels as f64;
    Tensor4::from_fn(input_shape, |n, _, h, w| {
        T::from_f64(grad_out.get(n, 0, h, w).as_f64() * inv)
    })
}

pub fn mean_sq<T: Scalar>(input: &Tensor4<T>) -> Result<f64> {
    if input.numel() == 0 {
        return Err(Error::Validation("mean_sq of an empty tensor".into()));
    }
    let sum: f64 = input
        .data()
        .iter()
        .map(|v| {
            let v = v.as_f64();
            v * v
        })
        .sum();
    Ok(sum / input.numel() as f64)
}

pub fn zip_with<T: Scalar>(
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    op: &str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor4<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shapes {} and {} differ",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| T::from_f64(f(x.as_f64(), y.as_f64())))
        .collect();
    Tensor4::from_vec(a.shape(), data)
}
