//! Network descriptions: typed layer lists, the variant builders and the
//! `.nspec` text format.

mod nspec;
mod variants;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

pub use nspec::{parse_netspec, serialize_netspec};
pub use variants::{build_variant, build_variant_for, Dataset, Variant};

use crate::blocks::{BlockKind, BlockSpec, Builder, Graph, Op, ResizeTarget, Src};
use crate::error::{Error, Result};
use crate::ops::ConvGeometry;

/// Stand-alone convolution layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub geom: ConvGeometry,
    pub bias: bool,
    pub batch_norm: bool,
    pub relu: bool,
}

/// Stand-alone transposed convolution layer with a square kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeconvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub k: usize,
    pub stride: usize,
    pub bias: bool,
    pub batch_norm: bool,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv(ConvLayer),
    Deconv(DeconvLayer),
    MaxPool { k: usize, stride: usize, pad: usize },
    AvgPool { k: usize, stride: usize },
    Block(BlockSpec),
    Bilinear { scale: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }

    pub fn block(name: impl Into<String>, spec: BlockSpec) -> Self {
        Self::new(name, LayerKind::Block(spec))
    }

    /// Keyword used for this layer in `.nspec` text.
    pub fn keyword(&self) -> &'static str {
        match &self.kind {
            LayerKind::Conv(_) => "conv",
            LayerKind::Deconv(_) => "deconv",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::Bilinear { .. } => "bilinear",
            LayerKind::Block(b) => match b.kind {
                BlockKind::Eda => "eda",
                BlockKind::EdaNonAsym => "eda_na",
                BlockKind::Erf => "erf",
                BlockKind::Downsample => "downsample",
                BlockKind::Aspp => "aspp",
                BlockKind::Projection => "projection",
            },
        }
    }

    /// Input channels the layer requires, if it constrains them.
    pub fn in_channels(&self) -> Option<usize> {
        match &self.kind {
            LayerKind::Conv(c) => Some(c.in_channels),
            LayerKind::Deconv(d) => Some(d.in_channels),
            LayerKind::Block(b) => Some(b.in_channels),
            _ => None,
        }
    }

    /// Output channels given `input` channels.
    pub fn out_channels(&self, input: usize) -> usize {
        match &self.kind {
            LayerKind::Conv(c) => c.out_channels,
            LayerKind::Deconv(d) => d.out_channels,
            LayerKind::Block(b) => b.out_channels,
            _ => input,
        }
    }

    pub fn has_batch_norm(&self) -> bool {
        match &self.kind {
            LayerKind::Conv(c) => c.batch_norm,
            LayerKind::Deconv(d) => d.batch_norm,
            LayerKind::Block(b) => b.batch_norm && b.kind != BlockKind::Projection,
            _ => false,
        }
    }

    /// Largest dilation used inside the layer (1 when undilated).
    pub fn dilation(&self) -> usize {
        match &self.kind {
            LayerKind::Conv(c) => c.geom.dilation,
            LayerKind::Block(b) if b.kind == BlockKind::Aspp => *crate::blocks::ASPP_RATES.last().unwrap(),
            LayerKind::Block(b) => b.dilation,
            _ => 1,
        }
    }

    /// Same layer with batch normalization folded away.
    pub fn without_batch_norm(&self) -> LayerSpec {
        let kind = match &self.kind {
            LayerKind::Conv(c) if c.batch_norm => LayerKind::Conv(ConvLayer {
                bias: true,
                batch_norm: false,
                ..c.clone()
            }),
            LayerKind::Deconv(d) if d.batch_norm => LayerKind::Deconv(DeconvLayer {
                bias: true,
                batch_norm: false,
                ..d.clone()
            }),
            LayerKind::Block(b) => LayerKind::Block(BlockSpec {
                batch_norm: false,
                ..b.clone()
            }),
            other => other.clone(),
        };
        LayerSpec::new(self.name.clone(), kind)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(Error::invalid(format!("layer `{}`: {what} must be at least 1", self.name)))
            } else {
                Ok(())
            }
        };
        match &self.kind {
            LayerKind::Conv(c) => {
                positive("in", c.in_channels)?;
                positive("out", c.out_channels)?;
                positive("kh", c.kh)?;
                positive("kw", c.kw)?;
                positive("stride", c.geom.stride)?;
                positive("dilation", c.geom.dilation)
            }
            LayerKind::Deconv(d) => {
                positive("in", d.in_channels)?;
                positive("out", d.out_channels)?;
                positive("k", d.k)?;
                positive("stride", d.stride)
            }
            LayerKind::MaxPool { k, stride, pad } => {
                positive("k", *k)?;
                positive("stride", *stride)?;
                if pad >= k {
                    return Err(Error::invalid(format!("layer `{}`: pool padding must be below k", self.name)));
                }
                Ok(())
            }
            LayerKind::AvgPool { k, stride } => {
                positive("k", *k)?;
                positive("stride", *stride)
            }
            LayerKind::Bilinear { scale } => positive("scale", *scale),
            LayerKind::Block(b) => b
                .validate()
                .map_err(|e| Error::invalid(format!("layer `{}`: {e}", self.name))),
        }
    }

    /// Primitive steps of this layer; tensor names are prefixed with the layer name.
    pub fn expand(&self) -> Result<Graph> {
        self.validate()?;
        let name = &self.name;
        let mut b = Builder::default();
        match &self.kind {
            LayerKind::Block(spec) => return spec.expand(name),
            LayerKind::Conv(c) => {
                let x = b.unary(
                    Op::Conv {
                        param: name.clone(),
                        in_channels: c.in_channels,
                        out_channels: c.out_channels,
                        kh: c.kh,
                        kw: c.kw,
                        geom: c.geom,
                        bias: c.bias,
                    },
                    Src::Input,
                );
                post_ops(&mut b, x, name, c.out_channels, c.batch_norm, c.relu);
            }
            LayerKind::Deconv(d) => {
                let x = b.unary(
                    Op::Deconv {
                        param: name.clone(),
                        in_channels: d.in_channels,
                        out_channels: d.out_channels,
                        k: d.k,
                        stride: d.stride,
                        bias: d.bias,
                    },
                    Src::Input,
                );
                post_ops(&mut b, x, name, d.out_channels, d.batch_norm, d.relu);
            }
            LayerKind::MaxPool { k, stride, pad } => {
                b.unary(
                    Op::MaxPool {
                        k: *k,
                        stride: *stride,
                        pad: *pad,
                    },
                    Src::Input,
                );
            }
            LayerKind::AvgPool { k, stride } => {
                b.unary(Op::AvgPool { k: *k, stride: *stride }, Src::Input);
            }
            LayerKind::Bilinear { scale } => {
                b.unary(Op::Resize(ResizeTarget::Scale(*scale)), Src::Input);
            }
        }
        Ok(b.finish())
    }
}

fn post_ops(b: &mut Builder, x: Src, name: &str, channels: usize, bn: bool, relu: bool) {
    let x = if bn {
        b.unary(
            Op::BatchNorm {
                param: format!("{name}.bn"),
                channels,
            },
            x,
        )
    } else {
        x
    };
    if relu {
        b.unary(Op::Relu, x);
    }
}

/// An ordered network description.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    /// `(h, w)` resolution the network is trained and analyzed at.
    pub train_size: (usize, usize),
    /// Extra bilinear upscale applied to logits at inference time only.
    pub inference_upscale: usize,
}

/// Product of all stride-2 stages; input dims must be divisible by it.
pub const TOTAL_STRIDE: usize = 8;

impl NetworkSpec {
    /// Channels of the network input (RGB unless the first layer says otherwise).
    pub fn input_channels(&self) -> usize {
        self.layers.iter().find_map(|l| l.in_channels()).unwrap_or(3)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn batch_norm_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.has_batch_norm()).count()
    }

    /// Structural checks: unique names, valid layers, chained channel counts
    /// and projection placement.
    pub fn validate(&self) -> Result<()> {
        check_identifier(&self.name)?;
        if self.classes == 0 {
            return Err(Error::invalid("classes must be at least 1"));
        }
        if self.inference_upscale == 0 {
            return Err(Error::invalid("inference upscale must be at least 1"));
        }
        let mut seen = HashSet::new();
        for l in &self.layers {
            check_identifier(&l.name)?;
            if !seen.insert(l.name.as_str()) {
                return Err(Error::invalid(format!("duplicate layer name `{}`", l.name)));
            }
            l.validate()?;
        }
        self.check_channels()?;
        let projections: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(&l.kind, LayerKind::Block(b) if b.kind == BlockKind::Projection))
            .map(|(i, _)| i)
            .collect();
        if projections.len() > 1 {
            return Err(Error::invalid("more than one projection layer"));
        }
        if let Some(&p) = projections.first() {
            if let Some(l) = self.layers[p + 1..]
                .iter()
                .find(|l| !matches!(l.kind, LayerKind::Bilinear { .. }))
            {
                return Err(Error::invalid(format!(
                    "layer `{}` follows the projection; only upsampling may",
                    l.name
                )));
            }
        }
        Ok(())
    }

    /// Every layer's input channels match its predecessor's output and the
    /// network ends in `classes` channels.
    pub fn check_channels(&self) -> Result<()> {
        let mut c = self.input_channels();
        for l in &self.layers {
            if let Some(need) = l.in_channels() {
                if need != c {
                    return Err(Error::ChannelMismatch {
                        context: format!("layer `{}`", l.name),
                        expected: need,
                        found: c,
                    });
                }
            }
            c = l.out_channels(c);
        }
        if !self.layers.is_empty() && c != self.classes {
            return Err(Error::ChannelMismatch {
                context: "network output".into(),
                expected: self.classes,
                found: c,
            });
        }
        Ok(())
    }

    /// Copy with every batch normalization folded away.
    pub fn without_batch_norm(&self) -> NetworkSpec {
        NetworkSpec {
            layers: self.layers.iter().map(LayerSpec::without_batch_norm).collect(),
            ..self.clone()
        }
    }
}

fn check_identifier(s: &str) -> Result<()> {
    let ok = !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("`{s}` is not a valid identifier")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}
