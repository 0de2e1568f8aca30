//! Dense NCHW tensors and the parameter bundles consumed by the operators.

use std::fmt;

use crate::error::{Error, Result};

/// Dimensions of a 4-D activation tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Single-image shape `c×h×w`.
    pub const fn chw(c: usize, h: usize, w: usize) -> Self {
        Shape { n: 1, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::shape(format!("zero-sized dimension in {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.n == 1 {
            write!(f, "{}x{}x{}", self.c, self.h, self.w)
        } else {
            write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
        }
    }
}

/// Immutable row-major NCHW tensor of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn filled(shape: Shape, value: f32) -> Result<Self> {
        shape.validate()?;
        Ok(Tensor {
            shape,
            data: vec![value; shape.numel()],
        })
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Result<Self> {
        shape.validate()?;
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Built by operators that have already established the shape law.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + y) * s.w + x]
    }

    /// The `h×w` plane of image `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// Channels `[start, end)` of every image, as a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        let s = self.shape;
        if start >= end || end > s.c {
            return Err(Error::shape(format!(
                "channel range {start}..{end} out of bounds for {s}"
            )));
        }
        let p = s.plane();
        let mut data = Vec::with_capacity(s.n * (end - start) * p);
        for n in 0..s.n {
            let base = n * s.c * p;
            data.extend_from_slice(&self.data[base + start * p..base + end * p]);
        }
        Ok(Tensor::from_parts(Shape::new(s.n, end - start, s.h, s.w), data))
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot compare {} with {}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

/// Convolution weights laid out `(out, in, kh, kw)`, with optional per-output bias.
///
/// Transposed convolution uses the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub weights: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl Kernel {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        weights: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || kh == 0 || kw == 0 {
            return Err(Error::shape("kernel dimensions must be at least 1"));
        }
        let expected = out_channels * in_channels * kh * kw;
        if weights.len() != expected {
            return Err(Error::shape(format!(
                "kernel {out_channels}x{in_channels}x{kh}x{kw} needs {expected} weights, got {}",
                weights.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(Error::shape(format!(
                    "bias length {} does not match {out_channels} output channels",
                    b.len()
                )));
            }
        }
        Ok(Kernel {
            out_channels,
            in_channels,
            kh,
            kw,
            weights,
            bias,
        })
    }

    pub fn filled(out_channels: usize, in_channels: usize, kh: usize, kw: usize, value: f32) -> Result<Self> {
        Self::new(
            out_channels,
            in_channels,
            kh,
            kw,
            vec![value; out_channels * in_channels * kh * kw],
            None,
        )
    }

    pub fn with_bias(mut self, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != self.out_channels {
            return Err(Error::shape(format!(
                "bias length {} does not match {} output channels",
                bias.len(),
                self.out_channels
            )));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn weight(&self, o: usize, i: usize, y: usize, x: usize) -> f32 {
        self.weights[((o * self.in_channels + i) * self.kh + y) * self.kw + x]
    }

    /// Weights of output channel `o`, laid out `(in, kh, kw)`.
    pub fn filter(&self, o: usize) -> &[f32] {
        let len = self.in_channels * self.kh * self.kw;
        &self.weights[o * len..(o + 1) * len]
    }
}

/// Batch-normalization statistics and affine parameters for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

/// Epsilon used by every batch-normalization layer in this crate.
pub const BN_EPS: f32 = 1e-3;

impl BnParams {
    pub fn new(
        gamma: Vec<f32>,
        beta: Vec<f32>,
        running_mean: Vec<f32>,
        running_var: Vec<f32>,
        eps: f32,
    ) -> Result<Self> {
        let c = gamma.len();
        if beta.len() != c || running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch-norm parameter vectors differ in length"));
        }
        if !(eps > 0.0) {
            return Err(Error::Domain(format!("batch-norm eps must be positive, got {eps}")));
        }
        if running_var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Domain("batch-norm running variance must be non-negative".into()));
        }
        Ok(BnParams {
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
        })
    }

    /// gamma=1, beta=0, mean=0, var=1.
    pub fn unit(channels: usize) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` such that `bn(x) = scale * x + shift`.
    pub fn scale_shift(&self) -> (Vec<f32>, Vec<f32>) {
        let scale: Vec<f32> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = scale
            .iter()
            .zip(self.beta.iter().zip(&self.running_mean))
            .map(|(s, (b, m))| b - s * m)
            .collect();
        (scale, shift)
    }
}

/// Per-pixel class indices, the output of segmentation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::shape(format!(
                "label map {height}x{width} cannot hold {} labels",
                labels.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u32) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data() {
        assert!(Tensor::new(Shape::chw(1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Tensor::new(Shape::chw(0, 2, 2), vec![]).is_err());
    }

    #[test]
    fn slice_channels_keeps_order() {
        let t = Tensor::from_fn(Shape::chw(3, 2, 2), |_, c, y, x| (c * 4 + y * 2 + x) as f32).unwrap();
        let s = t.slice_channels(1, 3).unwrap();
        assert_eq!(s.shape(), Shape::chw(2, 2, 2));
        assert_eq!(s.data()[0], 4.0);
    }

    #[test]
    fn bn_rejects_negative_variance() {
        assert!(BnParams::new(vec![1.0], vec![0.0], vec![0.0], vec![-1.0], 1e-3).is_err());
        assert!(BnParams::new(vec![1.0], vec![0.0], vec![0.0], vec![1.0], 0.0).is_err());
    }

    #[test]
    fn shape_display() {
        assert_eq!(Shape::chw(15, 256, 512).to_string(), "15x256x512");
    }
}
