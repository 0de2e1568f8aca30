//! Primitive numerical operators over [`Tensor`].
//!
//! Every operator is a pure function. Where work is split across threads it is
//! split by output channel, so each output element is accumulated in the same
//! order (input channel, kernel row, kernel column) regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{BnParams, Kernel, LabelMap, Shape, Tensor};

/// Stride, dilation and zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, dilation: usize, pad_h: usize, pad_w: usize) -> Self {
        ConvGeometry {
            stride,
            dilation,
            pad_h,
            pad_w,
        }
    }

    /// Stride 1, no dilation, no padding.
    pub const fn unit() -> Self {
        Self::new(1, 1, 0, 0)
    }
}

/// Spatial extent covered by `taps` kernel taps spaced `dilation` apart.
pub fn effective_extent(taps: usize, dilation: usize) -> usize {
    dilation * (taps - 1) + 1
}

/// `floor((size + 2·pad − extent) / stride) + 1`, or an error when the window
/// does not fit.
pub fn conv_output_len(size: usize, extent: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if stride == 0 {
        return Err(Error::shape("stride must be at least 1"));
    }
    if padded < extent {
        return Err(Error::shape(format!(
            "window of {extent} does not fit input of {size} with padding {pad}"
        )));
    }
    Ok((padded - extent) / stride + 1)
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d(input: &Tensor, kernel: &Kernel, geom: ConvGeometry) -> Result<Tensor> {
    let s = input.shape();
    if s.c != kernel.in_channels {
        return Err(Error::ChannelMismatch {
            context: "conv2d".into(),
            expected: kernel.in_channels,
            found: s.c,
        });
    }
    if geom.dilation == 0 {
        return Err(Error::shape("dilation must be at least 1"));
    }
    let oh = conv_output_len(s.h, effective_extent(kernel.kh, geom.dilation), geom.stride, geom.pad_h)?;
    let ow = conv_output_len(s.w, effective_extent(kernel.kw, geom.dilation), geom.stride, geom.pad_w)?;
    let out_shape = Shape::new(s.n, kernel.out_channels, oh, ow);
    let in_image = s.c * s.plane();
    let out_plane = oh * ow;

    let mut out = vec![0.0f32; out_shape.numel()];
    for (n, image_out) in out.chunks_mut(kernel.out_channels * out_plane).enumerate() {
        let image_in = &input.data()[n * in_image..(n + 1) * in_image];
        image_out
            .par_chunks_mut(out_plane)
            .enumerate()
            .for_each(|(o, dst)| {
                correlate_plane(dst, image_in, s, kernel, o, geom, oh, ow);
            });
    }
    Ok(Tensor::from_parts(out_shape, out))
}

#[allow(clippy::too_many_arguments)]
fn correlate_plane(
    dst: &mut [f32],
    image: &[f32],
    s: Shape,
    kernel: &Kernel,
    o: usize,
    geom: ConvGeometry,
    oh: usize,
    ow: usize,
) {
    let (h, w) = (s.h as isize, s.w as isize);
    let stride = geom.stride as isize;
    let filter = kernel.filter(o);
    for ic in 0..kernel.in_channels {
        let src = &image[ic * s.plane()..(ic + 1) * s.plane()];
        for ky in 0..kernel.kh {
            let y_off = (ky * geom.dilation) as isize - geom.pad_h as isize;
            for kx in 0..kernel.kw {
                let weight = filter[(ic * kernel.kh + ky) * kernel.kw + kx];
                let x_off = (kx * geom.dilation) as isize - geom.pad_w as isize;
                let Some((x_lo, x_hi)) = valid_range(x_off, stride, w, ow) else {
                    continue;
                };
                for oy in 0..oh {
                    let iy = oy as isize * stride + y_off;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src_row = &src[iy as usize * s.w..(iy as usize + 1) * s.w];
                    let dst_row = &mut dst[oy * ow + x_lo..oy * ow + x_hi];
                    let first = (x_lo as isize * stride + x_off) as usize;
                    let len = dst_row.len();
                    if stride == 1 {
                        for (d, &x) in dst_row.iter_mut().zip(&src_row[first..first + len]) {
                            *d += weight * x;
                        }
                    } else {
                        let step = stride as usize;
                        for (j, d) in dst_row.iter_mut().enumerate() {
                            *d += weight * src_row[first + j * step];
                        }
                    }
                }
            }
        }
    }
    if let Some(bias) = &kernel.bias {
        let b = bias[o];
        for d in dst.iter_mut() {
            *d += b;
        }
    }
}

/// Output columns `[lo, hi)` whose input index `ox·stride + offset` lies in `[0, len)`.
fn valid_range(offset: isize, stride: isize, len: isize, out_len: usize) -> Option<(usize, usize)> {
    let lo = if offset >= 0 { 0 } else { (-offset + stride - 1) / stride };
    let last = len - 1 - offset;
    if last < 0 {
        return None;
    }
    let hi = (last / stride + 1).min(out_len as isize);
    (lo < hi).then_some((lo as usize, hi as usize))
}

/// Transposed convolution without padding or output padding.
///
/// Each input value scatter-adds `kernel[o, i]` scaled by itself into the
/// output window at `(y·stride, x·stride)`.
pub fn transposed_conv2d(input: &Tensor, kernel: &Kernel, stride: usize) -> Result<Tensor> {
    let s = input.shape();
    if s.c != kernel.in_channels {
        return Err(Error::ChannelMismatch {
            context: "transposed_conv2d".into(),
            expected: kernel.in_channels,
            found: s.c,
        });
    }
    if stride == 0 {
        return Err(Error::shape("stride must be at least 1"));
    }
    let oh = (s.h - 1) * stride + kernel.kh;
    let ow = (s.w - 1) * stride + kernel.kw;
    let out_shape = Shape::new(s.n, kernel.out_channels, oh, ow);
    let in_image = s.c * s.plane();
    let out_plane = oh * ow;

    let mut out = vec![0.0f32; out_shape.numel()];
    for (n, image_out) in out.chunks_mut(kernel.out_channels * out_plane).enumerate() {
        let image_in = &input.data()[n * in_image..(n + 1) * in_image];
        image_out
            .par_chunks_mut(out_plane)
            .enumerate()
            .for_each(|(o, dst)| {
                let filter = kernel.filter(o);
                for ic in 0..kernel.in_channels {
                    let src = &image_in[ic * s.plane()..(ic + 1) * s.plane()];
                    for ky in 0..kernel.kh {
                        for kx in 0..kernel.kw {
                            let weight = filter[(ic * kernel.kh + ky) * kernel.kw + kx];
                            for iy in 0..s.h {
                                let row = (iy * stride + ky) * ow + kx;
                                for (ix, &x) in src[iy * s.w..(iy + 1) * s.w].iter().enumerate() {
                                    dst[row + ix * stride] += weight * x;
                                }
                            }
                        }
                    }
                }
                if let Some(bias) = &kernel.bias {
                    for d in dst.iter_mut() {
                        *d += bias[o];
                    }
                }
            });
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn pooled_len(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(Error::shape("pool window and stride must be at least 1"));
    }
    if k == stride && pad == 0 && !size.is_multiple_of(stride) {
        return Err(Error::shape(format!(
            "spatial size {size} is not divisible by pool stride {stride}"
        )));
    }
    if pad >= k {
        return Err(Error::shape(format!("pool padding {pad} must be smaller than window {k}")));
    }
    conv_output_len(size, k, stride, pad)
}

fn map_planes(input: &Tensor, out_h: usize, out_w: usize, f: impl Fn(&[f32], &mut [f32]) + Sync) -> Tensor {
    let s = input.shape();
    let out_shape = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = vec![0.0f32; out_shape.numel()];
    out.par_chunks_mut(out_h * out_w)
        .zip(input.data().par_chunks(s.plane()))
        .for_each(|(dst, src)| f(src, dst));
    Tensor::from_parts(out_shape, out)
}

/// Windowed maximum; padded positions never win.
pub fn max_pool2d(input: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let s = input.shape();
    let oh = pooled_len(s.h, k, stride, pad)?;
    let ow = pooled_len(s.w, k, stride, pad)?;
    Ok(map_planes(input, oh, ow, |src, dst| {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        best = best.max(src[iy as usize * s.w + ix as usize]);
                    }
                }
                dst[oy * ow + ox] = best;
            }
        }
    }))
}

/// Windowed arithmetic mean without padding.
pub fn avg_pool2d(input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let s = input.shape();
    let oh = pooled_len(s.h, k, stride, 0)?;
    let ow = pooled_len(s.w, k, stride, 0)?;
    let count = (k * k) as f32;
    Ok(map_planes(input, oh, ow, |src, dst| {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for ky in 0..k {
                    let row = (oy * stride + ky) * s.w + ox * stride;
                    for &v in &src[row..row + k] {
                        acc += v;
                    }
                }
                dst[oy * ow + ox] = acc / count;
            }
        }
    }))
}

/// Mean of every plane, giving a `1×1` spatial output.
///
/// The sum is accumulated in `f64`; a single `f32` running sum over a full
/// feature plane loses several digits.
pub fn global_avg_pool(input: &Tensor) -> Tensor {
    let count = input.shape().plane() as f64;
    map_planes(input, 1, 1, |src, dst| {
        let sum: f64 = src.iter().map(|&v| v as f64).sum();
        dst[0] = (sum / count) as f32;
    })
}

/// Inference-mode batch normalization with running statistics.
pub fn batch_norm(input: &Tensor, p: &BnParams) -> Result<Tensor> {
    let s = input.shape();
    if p.channels() != s.c {
        return Err(Error::ChannelMismatch {
            context: "batch_norm".into(),
            expected: p.channels(),
            found: s.c,
        });
    }
    let denom: Vec<f32> = p.running_var.iter().map(|v| (v + p.eps).sqrt()).collect();
    Ok(map_channels(input, |c, x| p.gamma[c] * (x - p.running_mean[c]) / denom[c] + p.beta[c]))
}

/// `x·scale[c] + shift[c]` per channel.
pub fn channel_affine(input: &Tensor, scale: &[f32], shift: &[f32]) -> Result<Tensor> {
    let c = input.shape().c;
    if scale.len() != c || shift.len() != c {
        return Err(Error::ChannelMismatch {
            context: "channel_affine".into(),
            expected: c,
            found: scale.len().min(shift.len()),
        });
    }
    Ok(map_channels(input, |ch, x| x * scale[ch] + shift[ch]))
}

fn map_channels(input: &Tensor, f: impl Fn(usize, f32) -> f32 + Sync) -> Tensor {
    let s = input.shape();
    let mut out = input.data().to_vec();
    out.par_chunks_mut(s.plane()).enumerate().for_each(|(i, plane)| {
        let c = i % s.c;
        for v in plane.iter_mut() {
            *v = f(c, *v);
        }
    });
    Tensor::from_parts(s, out)
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_parts(input.shape(), data)
}

/// Stack `a` then `b` along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    concat_all(&[a, b])
}

/// Channel concatenation of any number of tensors, in order.
pub fn concat_all(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?
        .shape();
    for t in parts {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(format!("cannot concat {first} with {s}")));
        }
    }
    let channels: usize = parts.iter().map(|t| t.shape().c).sum();
    let shape = Shape::new(first.n, channels, first.h, first.w);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..first.n {
        for t in parts {
            let image = t.shape().c * first.plane();
            data.extend_from_slice(&t.data()[n * image..(n + 1) * image]);
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("cannot add {} and {}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape(), data))
}

/// Source index pair and blend weight for one output coordinate.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f32,
}

fn resize_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f32 / out_len as f32;
    let max = (in_len - 1) as f32;
    (0..out_len)
        .map(|d| {
            let src = ((d as f32 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = src.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(in_len - 1),
                frac: src - lo as f32,
            }
        })
        .collect()
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize target must be at least 1x1"));
    }
    let s = input.shape();
    let rows = resize_taps(s.h, out_h);
    let cols = resize_taps(s.w, out_w);
    Ok(map_planes(input, out_h, out_w, |src, dst| {
        for (oy, r) in rows.iter().enumerate() {
            let top = &src[r.lo * s.w..(r.lo + 1) * s.w];
            let bottom = &src[r.hi * s.w..(r.hi + 1) * s.w];
            for (ox, c) in cols.iter().enumerate() {
                let upper = lerp(top[c.lo], top[c.hi], c.frac);
                let lower = lerp(bottom[c.lo], bottom[c.hi], c.frac);
                dst[oy * out_w + ox] = lerp(upper, lower, r.frac);
            }
        }
    }))
}

/// Per-pixel index of the largest channel; ties go to the lowest index.
pub fn argmax_channels(input: &Tensor) -> Result<LabelMap> {
    let s = input.shape();
    if s.n != 1 {
        return Err(Error::shape(format!("argmax expects a single image, got batch {}", s.n)));
    }
    let mut best = input.plane(0, 0).to_vec();
    let mut labels = vec![0u32; s.plane()];
    for c in 1..s.c {
        for ((b, l), &v) in best.iter_mut().zip(labels.iter_mut()).zip(input.plane(0, c)) {
            if v > *b {
                *b = v;
                *l = c as u32;
            }
        }
    }
    LabelMap::new(s.h, s.w, labels)
}
