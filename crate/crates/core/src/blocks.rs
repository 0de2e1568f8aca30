//! Composite blocks (dense asymmetric module and its variants, downsampling,
//! ASPP, projection) expanded into small graphs of primitive steps.
//!
//! A [`Graph`] is a straight-line list of [`Step`]s. Each step reads the block
//! input or earlier steps, and the last step is the block output. The same
//! graph drives execution, parameter/MAC counting and receptive-field tracing.

use crate::error::{Error, Result};
use crate::ops::ConvGeometry;

/// Dropout rate carried by dense and residual modules (identity at inference).
pub const DEFAULT_DROPOUT: f32 = 0.02;

/// Dilation rates of the three atrous ASPP branches.
pub const ASPP_RATES: [usize; 3] = [6, 12, 18];

/// Where a step reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Src {
    Input,
    Step(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeTarget {
    /// Multiply both spatial dims.
    Scale(usize),
    /// Back to the spatial size of the block input.
    BlockInput,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Weights `{param}.w` shaped `(out, in, kh, kw)`, bias `{param}.b`.
    Conv {
        param: String,
        in_channels: usize,
        out_channels: usize,
        kh: usize,
        kw: usize,
        geom: ConvGeometry,
        bias: bool,
    },
    /// Transposed convolution, same tensor naming as `Conv`.
    Deconv {
        param: String,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        bias: bool,
    },
    /// `{param}.gamma`, `.beta`, `.mean`, `.var`.
    BatchNorm { param: String, channels: usize },
    /// `{param}.scale`, `.shift`; what remains of a normalization that has no
    /// convolution to fold into.
    Affine { param: String, channels: usize },
    Relu,
    Dropout { rate: f32 },
    MaxPool { k: usize, stride: usize, pad: usize },
    AvgPool { k: usize, stride: usize },
    GlobalAvgPool,
    Resize(ResizeTarget),
    Concat,
    Add,
}

impl Op {
    /// Named tensors this op reads, with their dimensions.
    pub fn parameters(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            Op::Conv {
                param,
                in_channels,
                out_channels,
                kh,
                kw,
                bias,
                ..
            } => conv_params(param, *out_channels, *in_channels, *kh, *kw, *bias),
            Op::Deconv {
                param,
                in_channels,
                out_channels,
                k,
                bias,
                ..
            } => conv_params(param, *out_channels, *in_channels, *k, *k, *bias),
            Op::BatchNorm { param, channels } => ["gamma", "beta", "mean", "var"]
                .iter()
                .map(|s| (format!("{param}.{s}"), vec![*channels]))
                .collect(),
            Op::Affine { param, channels } => ["scale", "shift"]
                .iter()
                .map(|s| (format!("{param}.{s}"), vec![*channels]))
                .collect(),
            _ => Vec::new(),
        }
    }
}

fn conv_params(param: &str, out: usize, inp: usize, kh: usize, kw: usize, bias: bool) -> Vec<(String, Vec<usize>)> {
    let mut v = vec![(format!("{param}.w"), vec![out, inp, kh, kw])];
    if bias {
        v.push((format!("{param}.b"), vec![out]));
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub op: Op,
    pub inputs: Vec<Src>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    pub steps: Vec<Step>,
}

impl Graph {
    pub fn parameters(&self) -> Vec<(String, Vec<usize>)> {
        self.steps.iter().flat_map(|s| s.op.parameters()).collect()
    }

    /// Convolution and deconvolution weights only (no bias, no normalization).
    pub fn conv_weight_count(&self) -> usize {
        self.steps
            .iter()
            .map(|s| match &s.op {
                Op::Conv {
                    in_channels,
                    out_channels,
                    kh,
                    kw,
                    ..
                } => in_channels * out_channels * kh * kw,
                Op::Deconv {
                    in_channels,
                    out_channels,
                    k,
                    ..
                } => in_channels * out_channels * k * k,
                _ => 0,
            })
            .sum()
    }

    pub fn count_ops(&self, pred: impl Fn(&Op) -> bool) -> usize {
        self.steps.iter().filter(|s| pred(&s.op)).count()
    }
}

/// Incremental graph construction.
#[derive(Debug, Default)]
pub(crate) struct Builder {
    steps: Vec<Step>,
}

impl Builder {
    pub(crate) fn push(&mut self, op: Op, inputs: Vec<Src>) -> Src {
        self.steps.push(Step { op, inputs });
        Src::Step(self.steps.len() - 1)
    }

    pub(crate) fn unary(&mut self, op: Op, from: Src) -> Src {
        self.push(op, vec![from])
    }

    /// Convolution, then batch norm and ReLU. When `norm` is false the
    /// normalization has been folded into the convolution, which then carries
    /// a bias.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn conv_unit(
        &mut self,
        from: Src,
        conv: &str,
        bn: &str,
        in_channels: usize,
        out_channels: usize,
        (kh, kw): (usize, usize),
        geom: ConvGeometry,
        norm: bool,
    ) -> Src {
        let x = self.unary(
            Op::Conv {
                param: conv.to_string(),
                in_channels,
                out_channels,
                kh,
                kw,
                geom,
                bias: !norm,
            },
            from,
        );
        let x = if norm {
            self.unary(
                Op::BatchNorm {
                    param: bn.to_string(),
                    channels: out_channels,
                },
                x,
            )
        } else {
            x
        };
        self.unary(Op::Relu, x)
    }

    pub(crate) fn finish(self) -> Graph {
        Graph { steps: self.steps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    /// Dense module: point-wise reduction, two asymmetric pairs, concat.
    Eda,
    /// Dense module with two full 3×3 convolutions instead of asymmetric pairs.
    EdaNonAsym,
    /// Residual module of two asymmetric pairs at constant width.
    Erf,
    /// Stride-2 block, two-branch when widening, single conv when narrowing.
    Downsample,
    /// Five-branch atrous spatial pyramid pooling.
    Aspp,
    /// Bare 1×1 convolution to class logits.
    Projection,
}

/// Hyperparameters of one composite block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// New channels per dense module; for other kinds, the internal width.
    pub growth: usize,
    pub dilation: usize,
    /// Training-only; never applied here.
    pub dropout_rate: f32,
    /// False once batch normalization has been folded into the convolutions.
    pub batch_norm: bool,
}

impl BlockSpec {
    pub fn eda(in_channels: usize, growth: usize, dilation: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Eda,
            in_channels,
            out_channels: in_channels + growth,
            growth,
            dilation,
            dropout_rate: DEFAULT_DROPOUT,
            batch_norm: true,
        }
    }

    pub fn eda_non_asym(in_channels: usize, growth: usize, dilation: usize) -> Self {
        BlockSpec {
            kind: BlockKind::EdaNonAsym,
            ..Self::eda(in_channels, growth, dilation)
        }
    }

    pub fn erf(width: usize, dilation: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Erf,
            in_channels: width,
            out_channels: width,
            growth: width,
            dilation,
            dropout_rate: DEFAULT_DROPOUT,
            batch_norm: true,
        }
    }

    pub fn downsample(in_channels: usize, out_channels: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Downsample,
            in_channels,
            out_channels,
            growth: 0,
            dilation: 1,
            dropout_rate: 0.0,
            batch_norm: true,
        }
    }

    pub fn aspp(in_channels: usize, branch_channels: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Aspp,
            in_channels,
            out_channels: branch_channels,
            growth: branch_channels,
            dilation: 1,
            dropout_rate: 0.0,
            batch_norm: true,
        }
    }

    pub fn projection(in_channels: usize, classes: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Projection,
            in_channels,
            out_channels: classes,
            growth: 0,
            dilation: 1,
            dropout_rate: 0.0,
            batch_norm: false,
        }
    }

    pub fn with_dropout(mut self, rate: f32) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid(format!("{:?} block needs non-zero channels", self.kind)));
        }
        if self.dilation == 0 {
            return Err(Error::invalid("dilation must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        match self.kind {
            BlockKind::Eda | BlockKind::EdaNonAsym => {
                if self.growth == 0 || self.out_channels != self.in_channels + self.growth {
                    return Err(Error::invalid(format!(
                        "dense module {} + growth {} != {} output channels",
                        self.in_channels, self.growth, self.out_channels
                    )));
                }
            }
            BlockKind::Erf => {
                if self.out_channels != self.in_channels {
                    return Err(Error::invalid("residual module must keep its width"));
                }
            }
            BlockKind::Downsample => {
                if self.in_channels == self.out_channels {
                    return Err(Error::invalid(format!(
                        "downsampling block {} -> {} has no defined mode",
                        self.in_channels, self.out_channels
                    )));
                }
            }
            BlockKind::Aspp | BlockKind::Projection => {}
        }
        Ok(())
    }

    /// Expand into primitive steps; tensor names are prefixed with `name`.
    pub fn expand(&self, name: &str) -> Result<Graph> {
        self.validate()?;
        let graph = match self.kind {
            BlockKind::Eda => eda_graph(name, self, true),
            BlockKind::EdaNonAsym => eda_graph(name, self, false),
            BlockKind::Erf => erf_graph(name, self),
            BlockKind::Downsample => downsample_graph(name, self),
            BlockKind::Aspp => aspp_graph(name, self),
            BlockKind::Projection => projection_graph(name, self),
        };
        Ok(graph)
    }
}

const VERTICAL: (usize, usize) = (3, 1);
const HORIZONTAL: (usize, usize) = (1, 3);

fn vertical(d: usize) -> ConvGeometry {
    ConvGeometry::new(1, d, d, 0)
}

fn horizontal(d: usize) -> ConvGeometry {
    ConvGeometry::new(1, d, 0, d)
}

fn square(d: usize) -> ConvGeometry {
    ConvGeometry::new(1, d, d, d)
}

fn eda_graph(name: &str, spec: &BlockSpec, asymmetric: bool) -> Graph {
    let (k, d, norm) = (spec.growth, spec.dilation, spec.batch_norm);
    let mut b = Builder::default();
    let mut x = b.conv_unit(
        Src::Input,
        &format!("{name}.conv1x1"),
        &format!("{name}.bn1"),
        spec.in_channels,
        k,
        (1, 1),
        ConvGeometry::unit(),
        norm,
    );
    if asymmetric {
        // Vertical before horizontal; only the second pair is dilated.
        for (pair, dil) in [(1, 1), (2, d)] {
            let bn = 2 * pair;
            x = b.conv_unit(
                x,
                &format!("{name}.conv3x1_{pair}"),
                &format!("{name}.bn{bn}"),
                k,
                k,
                VERTICAL,
                vertical(dil),
                norm,
            );
            x = b.conv_unit(
                x,
                &format!("{name}.conv1x3_{pair}"),
                &format!("{name}.bn{}", bn + 1),
                k,
                k,
                HORIZONTAL,
                horizontal(dil),
                norm,
            );
        }
    } else {
        for (i, dil) in [(1, 1), (2, d)] {
            x = b.conv_unit(
                x,
                &format!("{name}.conv3x3_{i}"),
                &format!("{name}.bn{}", i + 1),
                k,
                k,
                (3, 3),
                square(dil),
                norm,
            );
        }
    }
    let x = b.unary(
        Op::Dropout {
            rate: spec.dropout_rate,
        },
        x,
    );
    b.push(Op::Concat, vec![Src::Input, x]);
    b.finish()
}

fn erf_graph(name: &str, spec: &BlockSpec) -> Graph {
    let (w, d, norm) = (spec.in_channels, spec.dilation, spec.batch_norm);
    let mut b = Builder::default();
    let mut x = Src::Input;
    for (pair, dil) in [(1, 1), (2, d)] {
        let bn = 2 * pair - 1;
        x = b.conv_unit(
            x,
            &format!("{name}.conv3x1_{pair}"),
            &format!("{name}.bn{bn}"),
            w,
            w,
            VERTICAL,
            vertical(dil),
            norm,
        );
        x = b.conv_unit(
            x,
            &format!("{name}.conv1x3_{pair}"),
            &format!("{name}.bn{}", bn + 1),
            w,
            w,
            HORIZONTAL,
            horizontal(dil),
            norm,
        );
    }
    let x = b.unary(
        Op::Dropout {
            rate: spec.dropout_rate,
        },
        x,
    );
    let sum = b.push(Op::Add, vec![Src::Input, x]);
    b.unary(Op::Relu, sum);
    b.finish()
}

fn downsample_graph(name: &str, spec: &BlockSpec) -> Graph {
    let (cin, cout, norm) = (spec.in_channels, spec.out_channels, spec.batch_norm);
    let geom = ConvGeometry::new(2, 1, 1, 1);
    let mut b = Builder::default();
    if cout < cin {
        b.conv_unit(
            Src::Input,
            &format!("{name}.conv"),
            &format!("{name}.bn"),
            cin,
            cout,
            (3, 3),
            geom,
            norm,
        );
        return b.finish();
    }
    let conv = b.unary(
        Op::Conv {
            param: format!("{name}.conv"),
            in_channels: cin,
            out_channels: cout - cin,
            kh: 3,
            kw: 3,
            geom,
            bias: !norm,
        },
        Src::Input,
    );
    let pool = b.unary(
        Op::MaxPool {
            k: 2,
            stride: 2,
            pad: 0,
        },
        Src::Input,
    );
    let out = if norm {
        let cat = b.push(Op::Concat, vec![conv, pool]);
        b.unary(
            Op::BatchNorm {
                param: format!("{name}.bn"),
                channels: cout,
            },
            cat,
        )
    } else {
        let pool = b.unary(
            Op::Affine {
                param: format!("{name}.pool_affine"),
                channels: cin,
            },
            pool,
        );
        b.push(Op::Concat, vec![conv, pool])
    };
    b.unary(Op::Relu, out);
    b.finish()
}

fn aspp_graph(name: &str, spec: &BlockSpec) -> Graph {
    let (cin, c, norm) = (spec.in_channels, spec.out_channels, spec.batch_norm);
    let mut b = Builder::default();
    let mut branches = vec![b.conv_unit(
        Src::Input,
        &format!("{name}.b1"),
        &format!("{name}.b1_bn"),
        cin,
        c,
        (1, 1),
        ConvGeometry::unit(),
        norm,
    )];
    for (i, rate) in ASPP_RATES.iter().enumerate() {
        branches.push(b.conv_unit(
            Src::Input,
            &format!("{name}.b{}", i + 2),
            &format!("{name}.b{}_bn", i + 2),
            cin,
            c,
            (3, 3),
            square(*rate),
            norm,
        ));
    }
    let pooled = b.unary(Op::GlobalAvgPool, Src::Input);
    let pooled = b.conv_unit(
        pooled,
        &format!("{name}.pool_conv"),
        &format!("{name}.pool_bn"),
        cin,
        c,
        (1, 1),
        ConvGeometry::unit(),
        norm,
    );
    branches.push(b.unary(Op::Resize(ResizeTarget::BlockInput), pooled));
    let cat = b.push(Op::Concat, branches);
    b.conv_unit(
        cat,
        &format!("{name}.fuse"),
        &format!("{name}.fuse_bn"),
        5 * c,
        c,
        (1, 1),
        ConvGeometry::unit(),
        norm,
    );
    b.finish()
}

fn projection_graph(name: &str, spec: &BlockSpec) -> Graph {
    let mut b = Builder::default();
    b.unary(
        Op::Conv {
            param: name.to_string(),
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kh: 1,
            kw: 1,
            geom: ConvGeometry::unit(),
            bias: true,
        },
        Src::Input,
    );
    b.finish()
}

fn check_counts(pairs: &[(&str, usize)]) -> Result<()> {
    for (what, v) in pairs {
        if *v == 0 {
            return Err(Error::invalid(format!("{what} must be at least 1")));
        }
    }
    Ok(())
}

/// Dense module with point-wise reduction and two asymmetric pairs.
pub fn make_eda_module(name: &str, in_channels: usize, growth: usize, dilation: usize) -> Result<Graph> {
    check_counts(&[("in_channels", in_channels), ("growth", growth), ("dilation", dilation)])?;
    BlockSpec::eda(in_channels, growth, dilation).expand(name)
}

pub fn make_non_asym_module(name: &str, in_channels: usize, growth: usize, dilation: usize) -> Result<Graph> {
    check_counts(&[("in_channels", in_channels), ("growth", growth), ("dilation", dilation)])?;
    BlockSpec::eda_non_asym(in_channels, growth, dilation).expand(name)
}

pub fn make_erf_module(name: &str, width: usize, dilation: usize) -> Result<Graph> {
    check_counts(&[("width", width), ("dilation", dilation)])?;
    BlockSpec::erf(width, dilation).expand(name)
}

pub fn make_downsampling_block(name: &str, in_channels: usize, out_channels: usize) -> Result<Graph> {
    BlockSpec::downsample(in_channels, out_channels).expand(name)
}

pub fn make_aspp(name: &str, in_channels: usize, branch_channels: usize) -> Result<Graph> {
    check_counts(&[("in_channels", in_channels), ("branch_channels", branch_channels)])?;
    BlockSpec::aspp(in_channels, branch_channels).expand(name)
}

pub fn make_projection(name: &str, in_channels: usize, classes: usize) -> Result<Graph> {
    check_counts(&[("in_channels", in_channels), ("classes", classes)])?;
    BlockSpec::projection(in_channels, classes).expand(name)
}
