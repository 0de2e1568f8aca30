//! Static passes over a [`NetworkSpec`]: output shapes, parameter counts,
//! multiply-add counts and receptive fields.
//!
//! Counting conventions: a convolution costs `kh·kw·in·out` parameters (plus
//! `out` for a bias) and `kh·kw·in·out·out_h·out_w` multiply-adds; a
//! transposed convolution is charged per input position instead. Batch norm
//! contributes `2·channels` parameters (running statistics are buffers) and
//! `channels·h·w` multiply-adds. Pools, resizes, ReLU, concat and add are free.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::blocks::{Graph, Op, ResizeTarget, Src};
use crate::error::{Error, Result};
use crate::netdef::{NetworkSpec, TOTAL_STRIDE};
use crate::ops::{conv_output_len, effective_extent, pooled_len};
use crate::tensor::Shape;

/// Effective extent of an `n`-tap kernel with dilation `r`: `r·(n−1)+1`.
pub fn effective_kernel(n: usize, r: usize) -> usize {
    effective_extent(n, r)
}

/// Receptive field in input pixels, and the input-pixel distance between
/// adjacent positions of the current feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveField {
    pub h: u64,
    pub w: u64,
    pub jump_h: u64,
    pub jump_w: u64,
}

impl ReceptiveField {
    pub const PIXEL: ReceptiveField = ReceptiveField {
        h: 1,
        w: 1,
        jump_h: 1,
        jump_w: 1,
    };

    fn widen(self, taps_h: usize, taps_w: usize, stride: usize) -> Self {
        ReceptiveField {
            h: self.h + (taps_h as u64 - 1) * self.jump_h,
            w: self.w + (taps_w as u64 - 1) * self.jump_w,
            jump_h: self.jump_h * stride as u64,
            jump_w: self.jump_w * stride as u64,
        }
    }

    fn max(self, other: Self) -> Self {
        ReceptiveField {
            h: self.h.max(other.h),
            w: self.w.max(other.w),
            jump_h: self.jump_h.max(other.jump_h),
            jump_w: self.jump_w.max(other.jump_w),
        }
    }
}

fn resize_axis(rf: u64, jump: u64, from: usize, to: usize) -> (u64, u64) {
    // Each output blends two neighbouring inputs unless the source is a single pixel.
    let rf = if from > 1 { rf + jump } else { rf };
    (rf, (jump * from as u64 / to as u64).max(1))
}

/// Per-step results of walking one layer graph.
#[derive(Debug, Clone)]
struct StepTrace {
    shape: Shape,
    params: u64,
    macs: u64,
    rf: ReceptiveField,
}

fn op_params(op: &Op) -> u64 {
    match op {
        Op::Conv {
            in_channels,
            out_channels,
            kh,
            kw,
            bias,
            ..
        } => (kh * kw * in_channels * out_channels + if *bias { *out_channels } else { 0 }) as u64,
        Op::Deconv {
            in_channels,
            out_channels,
            k,
            bias,
            ..
        } => (k * k * in_channels * out_channels + if *bias { *out_channels } else { 0 }) as u64,
        Op::BatchNorm { channels, .. } | Op::Affine { channels, .. } => 2 * *channels as u64,
        _ => 0,
    }
}

fn expect_channels(op: &str, expected: usize, s: Shape) -> Result<()> {
    if s.c != expected {
        return Err(Error::ChannelMismatch {
            context: op.into(),
            expected,
            found: s.c,
        });
    }
    Ok(())
}

fn trace_graph(graph: &Graph, input: Shape, rf_in: ReceptiveField) -> Result<Vec<StepTrace>> {
    let mut trace: Vec<StepTrace> = Vec::with_capacity(graph.steps.len());
    for step in &graph.steps {
        let srcs: Vec<(Shape, ReceptiveField)> = step
            .inputs
            .iter()
            .map(|s| match s {
                Src::Input => (input, rf_in),
                Src::Step(i) => (trace[*i].shape, trace[*i].rf),
            })
            .collect();
        let (s, rf) = srcs[0];
        let (shape, rf, macs) = match &step.op {
            Op::Conv {
                in_channels,
                out_channels,
                kh,
                kw,
                geom,
                ..
            } => {
                expect_channels("conv", *in_channels, s)?;
                let eh = effective_extent(*kh, geom.dilation);
                let ew = effective_extent(*kw, geom.dilation);
                let oh = conv_output_len(s.h, eh, geom.stride, geom.pad_h)?;
                let ow = conv_output_len(s.w, ew, geom.stride, geom.pad_w)?;
                let macs = (kh * kw * in_channels * out_channels) as u64 * (oh * ow) as u64;
                (Shape::chw(*out_channels, oh, ow), rf.widen(eh, ew, geom.stride), macs)
            }
            Op::Deconv {
                in_channels,
                out_channels,
                k,
                stride,
                ..
            } => {
                expect_channels("deconv", *in_channels, s)?;
                let oh = (s.h - 1) * stride + k;
                let ow = (s.w - 1) * stride + k;
                let macs = (k * k * in_channels * out_channels) as u64 * s.plane() as u64;
                let taps = k.div_ceil(*stride);
                let widened = rf.widen(taps, taps, 1);
                let rf = ReceptiveField {
                    jump_h: (rf.jump_h / *stride as u64).max(1),
                    jump_w: (rf.jump_w / *stride as u64).max(1),
                    ..widened
                };
                (Shape::chw(*out_channels, oh, ow), rf, macs)
            }
            Op::BatchNorm { channels, .. } | Op::Affine { channels, .. } => {
                expect_channels("batch_norm", *channels, s)?;
                (s, rf, s.numel() as u64)
            }
            Op::Relu | Op::Dropout { .. } => (s, rf, 0),
            Op::MaxPool { k, stride, pad } => {
                let oh = pooled_len(s.h, *k, *stride, *pad)?;
                let ow = pooled_len(s.w, *k, *stride, *pad)?;
                (Shape::chw(s.c, oh, ow), rf.widen(*k, *k, *stride), 0)
            }
            Op::AvgPool { k, stride } => {
                let oh = pooled_len(s.h, *k, *stride, 0)?;
                let ow = pooled_len(s.w, *k, *stride, 0)?;
                (Shape::chw(s.c, oh, ow), rf.widen(*k, *k, *stride), 0)
            }
            Op::GlobalAvgPool => {
                let widened = rf.widen(s.h, s.w, 1);
                let rf = ReceptiveField {
                    jump_h: rf.jump_h * s.h as u64,
                    jump_w: rf.jump_w * s.w as u64,
                    ..widened
                };
                (Shape::chw(s.c, 1, 1), rf, 0)
            }
            Op::Resize(target) => {
                let (oh, ow) = match target {
                    ResizeTarget::Scale(f) => (s.h * f, s.w * f),
                    ResizeTarget::BlockInput => (input.h, input.w),
                };
                let (h, jump_h) = resize_axis(rf.h, rf.jump_h, s.h, oh);
                let (w, jump_w) = resize_axis(rf.w, rf.jump_w, s.w, ow);
                (
                    Shape::chw(s.c, oh, ow),
                    ReceptiveField { h, w, jump_h, jump_w },
                    0,
                )
            }
            Op::Concat => {
                let mut c = 0;
                let mut rf = rf;
                for (t, r) in &srcs {
                    if (t.h, t.w) != (s.h, s.w) {
                        return Err(Error::shape(format!("cannot concat {s} with {t}")));
                    }
                    c += t.c;
                    rf = rf.max(*r);
                }
                (Shape::chw(c, s.h, s.w), rf, 0)
            }
            Op::Add => {
                let mut rf = rf;
                for (t, r) in &srcs {
                    if *t != s {
                        return Err(Error::shape(format!("cannot add {s} and {t}")));
                    }
                    rf = rf.max(*r);
                }
                (s, rf, 0)
            }
        };
        trace.push(StepTrace {
            shape,
            params: op_params(&step.op),
            macs,
            rf,
        });
    }
    Ok(trace)
}

/// Static figures for one layer of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerReport {
    pub name: String,
    pub kind: &'static str,
    pub out_shape: Shape,
    pub params: u64,
    pub multiply_adds: u64,
    pub receptive_field: (u64, u64),
    /// Effective kernel extent of the layer's dilated convolutions, if any.
    pub effective_kernel: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalysisReport {
    pub input: Shape,
    pub layers: Vec<LayerReport>,
    pub total_params: u64,
    pub total_multiply_adds: u64,
}

impl AnalysisReport {
    pub fn output_shape(&self) -> Shape {
        self.layers.last().map_or(self.input, |l| l.out_shape)
    }
}

fn check_input(net: &NetworkSpec, input: Shape) -> Result<()> {
    if input.n != 1 {
        return Err(Error::shape(format!("analysis expects a single image, got batch {}", input.n)));
    }
    if input.h == 0 || input.w == 0 || !input.h.is_multiple_of(TOTAL_STRIDE) || !input.w.is_multiple_of(TOTAL_STRIDE) {
        return Err(Error::shape(format!(
            "input {}x{} is not divisible by {TOTAL_STRIDE}",
            input.h, input.w
        )));
    }
    if !net.layers.is_empty() && input.c != net.input_channels() {
        return Err(Error::ChannelMismatch {
            context: "network input".into(),
            expected: net.input_channels(),
            found: input.c,
        });
    }
    Ok(())
}

/// Full static analysis at the given input shape.
pub fn analyze(net: &NetworkSpec, input: Shape) -> Result<AnalysisReport> {
    check_input(net, input)?;
    let mut shape = input;
    let mut rf = ReceptiveField::PIXEL;
    let mut layers = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        let graph = layer.expand()?;
        let trace = trace_graph(&graph, shape, rf).map_err(|e| match e {
            Error::ChannelMismatch { expected, found, .. } => Error::ChannelMismatch {
                context: format!("layer `{}`", layer.name),
                expected,
                found,
            },
            Error::Shape(msg) => Error::Shape(format!("layer `{}`: {msg}", layer.name)),
            other => other,
        })?;
        if let Some(last) = trace.last() {
            shape = last.shape;
            rf = last.rf;
        }
        let dilation = layer.dilation();
        layers.push(LayerReport {
            name: layer.name.clone(),
            kind: layer.keyword(),
            out_shape: shape,
            params: trace.iter().map(|t| t.params).sum(),
            multiply_adds: trace.iter().map(|t| t.macs).sum(),
            receptive_field: (rf.h, rf.w),
            effective_kernel: (dilation > 1).then(|| effective_kernel(3, dilation)),
        });
    }
    Ok(AnalysisReport {
        input,
        total_params: layers.iter().map(|l| l.params).sum(),
        total_multiply_adds: layers.iter().map(|l| l.multiply_adds).sum(),
        layers,
    })
}

/// Output shape of every layer.
pub fn trace_shapes(net: &NetworkSpec, input: Shape) -> Result<Vec<Shape>> {
    Ok(analyze(net, input)?.layers.iter().map(|l| l.out_shape).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Count {
    pub per_layer: Vec<u64>,
    pub total: u64,
}

/// Trainable parameters per layer; independent of input size.
pub fn count_params(net: &NetworkSpec) -> Result<Count> {
    let per_layer = net
        .layers
        .iter()
        .map(|l| Ok(l.expand()?.steps.iter().map(|s| op_params(&s.op)).sum()))
        .collect::<Result<Vec<u64>>>()?;
    Ok(Count {
        total: per_layer.iter().sum(),
        per_layer,
    })
}

pub fn count_multiply_adds(net: &NetworkSpec, input: Shape) -> Result<Count> {
    let report = analyze(net, input)?;
    Ok(Count {
        per_layer: report.layers.iter().map(|l| l.multiply_adds).collect(),
        total: report.total_multiply_adds,
    })
}

/// Receptive field after layer `upto` (inclusive), at the network's training size.
pub fn receptive_field(net: &NetworkSpec, upto: usize) -> Result<ReceptiveField> {
    let (h, w) = net.train_size;
    receptive_field_at(net, Shape::chw(net.input_channels(), h, w), upto)
}

pub fn receptive_field_at(net: &NetworkSpec, input: Shape, upto: usize) -> Result<ReceptiveField> {
    if upto >= net.layers.len() {
        return Err(Error::invalid(format!(
            "layer index {upto} out of range for {} layers",
            net.layers.len()
        )));
    }
    let mut shape = input;
    let mut rf = ReceptiveField::PIXEL;
    for layer in &net.layers[..=upto] {
        let trace = trace_graph(&layer.expand()?, shape, rf)?;
        if let Some(last) = trace.last() {
            shape = last.shape;
            rf = last.rf;
        }
    }
    Ok(rf)
}

/// Output shape of every primitive step inside one layer.
pub fn step_shapes(layer: &crate::netdef::LayerSpec, input: Shape) -> Result<Vec<Shape>> {
    let trace = trace_graph(&layer.expand()?, input, ReceptiveField::PIXEL)?;
    Ok(trace.iter().map(|t| t.shape).collect())
}

/// Per-conv-step `(params without bias, multiply-adds, out_h·out_w)` for a
/// layer at the given input; used to cross-check the counters.
pub fn conv_step_costs(layer: &crate::netdef::LayerSpec, input: Shape) -> Result<Vec<(u64, u64, u64)>> {
    let graph = layer.expand()?;
    let trace = trace_graph(&graph, input, ReceptiveField::PIXEL)?;
    Ok(graph
        .steps
        .iter()
        .zip(&trace)
        .filter_map(|(step, t)| match &step.op {
            Op::Conv {
                in_channels,
                out_channels,
                kh,
                kw,
                ..
            } => Some((
                (kh * kw * in_channels * out_channels) as u64,
                t.macs,
                t.shape.plane() as u64,
            )),
            _ => None,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::invalid(format!("unknown report format `{other}`"))),
        }
    }
}

pub const CSV_HEADER: &str = "layer,out_shape,params,macs,rf_h,rf_w";

/// `688778` → `0.69M`.
pub fn format_millions(n: u64) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

/// `8883765248` → `8.88B`.
pub fn format_billions(n: u64) -> String {
    format!("{:.2}B", n as f64 / 1e9)
}

pub fn render_report(report: &AnalysisReport, format: ReportFormat) -> String {
    let final_rf = report.layers.last().map_or((0, 0), |l| l.receptive_field);
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for l in &report.layers {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    l.name, l.out_shape, l.params, l.multiply_adds, l.receptive_field.0, l.receptive_field.1
                );
            }
            let _ = writeln!(
                out,
                "total,-,{},{},{},{}",
                report.total_params, report.total_multiply_adds, final_rf.0, final_rf.1
            );
        }
        ReportFormat::Table => {
            let rows: Vec<[String; 7]> = report
                .layers
                .iter()
                .map(|l| {
                    [
                        l.name.clone(),
                        l.kind.to_string(),
                        l.out_shape.to_string(),
                        l.params.to_string(),
                        l.multiply_adds.to_string(),
                        format!("{}x{}", l.receptive_field.0, l.receptive_field.1),
                        l.effective_kernel.map_or_else(|| "-".into(), |k| k.to_string()),
                    ]
                })
                .collect();
            let header = ["layer", "kind", "output", "params", "mult-adds", "rf", "eff.k"];
            let mut widths = header.map(str::len);
            for r in &rows {
                for (w, cell) in widths.iter_mut().zip(r) {
                    *w = (*w).max(cell.len());
                }
            }
            let line = |cells: &[&str]| {
                let mut s = String::new();
                for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
                    if i > 0 {
                        s.push_str("  ");
                    }
                    // Names and kinds left-aligned, figures right-aligned.
                    if i < 2 {
                        let _ = write!(s, "{cell:<w$}");
                    } else {
                        let _ = write!(s, "{cell:>w$}");
                    }
                }
                s.trim_end().to_string()
            };
            let _ = writeln!(out, "{}", line(&header));
            let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            let _ = writeln!(out, "{}", "-".repeat(rule));
            for r in &rows {
                let cells: Vec<&str> = r.iter().map(String::as_str).collect();
                let _ = writeln!(out, "{}", line(&cells));
            }
            let _ = writeln!(out, "{}", "-".repeat(rule));
            let _ = writeln!(out, "input: {}", report.input);
            let _ = writeln!(
                out,
                "total params: {} ({})",
                report.total_params,
                format_millions(report.total_params)
            );
            let _ = writeln!(
                out,
                "total multiply-adds: {} ({})",
                report.total_multiply_adds,
                format_billions(report.total_multiply_adds)
            );
            let _ = writeln!(out, "receptive field: {}x{}", final_rf.0, final_rf.1);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdef::{build_variant, ConvLayer, LayerKind, LayerSpec, Variant};
    use crate::ops::ConvGeometry;

    fn conv_net(specs: &[(usize, usize, usize, usize)]) -> NetworkSpec {
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, &(k, stride, dilation, c))| {
                LayerSpec::new(
                    format!("c{i}"),
                    LayerKind::Conv(ConvLayer {
                        in_channels: c,
                        out_channels: c,
                        kh: k,
                        kw: k,
                        geom: ConvGeometry::new(stride, dilation, dilation * (k / 2), dilation * (k / 2)),
                        bias: false,
                        batch_norm: false,
                        relu: false,
                    }),
                )
            })
            .collect();
        NetworkSpec {
            name: "stack".into(),
            classes: specs[0].3,
            layers,
            train_size: (64, 64),
            inference_upscale: 1,
        }
    }

    #[test]
    fn effective_kernel_values() {
        assert_eq!(effective_kernel(3, 2), 5);
        assert_eq!(effective_kernel(3, 16), 33);
        assert_eq!(effective_kernel(7, 1), 7);
    }

    #[test]
    fn stacked_convs_receptive_field() {
        let two = conv_net(&[(3, 1, 1, 1), (3, 1, 1, 1)]);
        assert_eq!(receptive_field(&two, 1).unwrap().h, 5);
        let three = conv_net(&[(3, 1, 1, 1); 3]);
        let rf = receptive_field(&three, 2).unwrap();
        assert_eq!((rf.h, rf.w), (7, 7));
        let strided = conv_net(&[(3, 2, 1, 1)]);
        let rf = receptive_field(&strided, 0).unwrap();
        assert_eq!((rf.h, rf.jump_h), (3, 2));
        assert!(receptive_field(&strided, 1).is_err());
    }

    #[test]
    fn dilated_conv_matches_effective_kernel() {
        let net = conv_net(&[(3, 1, 4, 1)]);
        assert_eq!(receptive_field(&net, 0).unwrap().h, effective_kernel(3, 4) as u64);
    }

    #[test]
    fn pointwise_macs_formula() {
        let net = NetworkSpec {
            name: "pw".into(),
            classes: 7,
            layers: vec![LayerSpec::new(
                "c",
                LayerKind::Conv(ConvLayer {
                    in_channels: 5,
                    out_channels: 7,
                    kh: 1,
                    kw: 1,
                    geom: ConvGeometry::unit(),
                    bias: false,
                    batch_norm: false,
                    relu: false,
                }),
            )],
            train_size: (16, 24),
            inference_upscale: 1,
        };
        let m = count_multiply_adds(&net, Shape::chw(5, 16, 24)).unwrap();
        assert_eq!(m.total, 5 * 7 * 16 * 24);
    }

    #[test]
    fn biased_conv_params() {
        let net = NetworkSpec {
            name: "b".into(),
            classes: 12,
            layers: vec![LayerSpec::new(
                "c",
                LayerKind::Conv(ConvLayer {
                    in_channels: 3,
                    out_channels: 12,
                    kh: 3,
                    kw: 3,
                    geom: ConvGeometry::new(1, 1, 1, 1),
                    bias: true,
                    batch_norm: false,
                    relu: false,
                }),
            )],
            train_size: (8, 8),
            inference_upscale: 1,
        };
        assert_eq!(count_params(&net).unwrap().total, 336);
    }

    #[test]
    fn edanet_shapes() {
        let net = build_variant(Variant::Edanet, 19).unwrap();
        let shapes = trace_shapes(&net, Shape::chw(3, 512, 1024)).unwrap();
        let idx = net.layer_index("m2_8").unwrap();
        assert_eq!(shapes[idx], Shape::chw(450, 64, 128));
        assert_eq!(*shapes.last().unwrap(), Shape::chw(19, 512, 1024));
        let tiny = trace_shapes(&net, Shape::chw(3, 8, 8)).unwrap();
        assert_eq!(tiny[idx], Shape::chw(450, 1, 1));
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = build_variant(Variant::Edanet, 19).unwrap();
        assert!(trace_shapes(&net, Shape::chw(3, 100, 128)).is_err());
        assert!(matches!(
            trace_shapes(&net, Shape::chw(4, 64, 128)),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn receptive_field_monotone_for_all_variants() {
        for v in Variant::ALL {
            let net = build_variant(v, 19).unwrap();
            let r = analyze(&net, Shape::chw(3, 64, 128)).unwrap();
            for pair in r.layers.windows(2) {
                assert!(pair[1].receptive_field.0 >= pair[0].receptive_field.0, "{v}");
                assert!(pair[1].receptive_field.1 >= pair[0].receptive_field.1, "{v}");
            }
        }
    }

    #[test]
    fn params_do_not_depend_on_input() {
        let net = build_variant(Variant::Aspp, 19).unwrap();
        let a = analyze(&net, Shape::chw(3, 64, 128)).unwrap();
        assert_eq!(a.total_params, count_params(&net).unwrap().total);
    }

    #[test]
    fn empty_report() {
        let net = NetworkSpec {
            name: "empty".into(),
            classes: 3,
            layers: vec![],
            train_size: (8, 8),
            inference_upscale: 1,
        };
        let r = analyze(&net, Shape::chw(3, 8, 8)).unwrap();
        assert_eq!(render_report(&r, ReportFormat::Csv), format!("{CSV_HEADER}\ntotal,-,0,0,0,0\n"));
    }

    #[test]
    fn csv_shape_and_determinism() {
        let net = build_variant(Variant::Edanet, 19).unwrap();
        let r = analyze(&net, Shape::chw(3, 512, 1024)).unwrap();
        let csv = render_report(&r, ReportFormat::Csv);
        assert_eq!(csv.lines().count(), net.layers.len() + 2);
        assert!(csv.starts_with("layer,out_shape,params,macs,rf_h,rf_w\nds1,15x256x512,"));
        assert!(csv.lines().last().unwrap().starts_with("total,-,"));
        assert_eq!(csv, render_report(&r.clone(), ReportFormat::Csv));
        let table = render_report(&r, ReportFormat::Table);
        assert!(table.contains("total params:"));
        assert!("yaml".parse::<ReportFormat>().is_err());
    }

    #[test]
    fn number_formatting() {
        assert_eq!(format_millions(688_778), "0.69M");
        assert_eq!(format_billions(8_883_765_248), "8.88B");
    }
}
