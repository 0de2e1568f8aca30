//! Line-oriented network description text.
//!
//! ```text
//! # comment
//! net name=edanet classes=19 upscale=2 train=512x1024
//! downsample name=ds1 in=3 out=15 bn=1
//! eda name=m1_1 in=60 growth=40 dilation=1 dropout=0.02 bn=1
//! ```
//!
//! Serialization is canonical: one layer per line, keys in a fixed order,
//! single spaces, every key written.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use crate::blocks::{BlockKind, BlockSpec, DEFAULT_DROPOUT};
use crate::error::{Error, Result};
use crate::ops::ConvGeometry;

use super::{ConvLayer, DeconvLayer, LayerKind, LayerSpec, NetworkSpec};

pub fn serialize_netspec(net: &NetworkSpec) -> String {
    let mut out = String::new();
    let (h, w) = net.train_size;
    let _ = writeln!(
        out,
        "net name={} classes={} upscale={} train={h}x{w}",
        net.name, net.classes, net.inference_upscale
    );
    for layer in &net.layers {
        let _ = writeln!(out, "{}", layer_line(layer));
    }
    out
}

fn flag(b: bool) -> u8 {
    b as u8
}

fn layer_line(l: &LayerSpec) -> String {
    let kw = l.keyword();
    let name = &l.name;
    match &l.kind {
        LayerKind::Conv(c) => format!(
            "{kw} name={name} in={} out={} kh={} kw={} stride={} dilation={} pad_h={} pad_w={} bias={} bn={} relu={}",
            c.in_channels,
            c.out_channels,
            c.kh,
            c.kw,
            c.geom.stride,
            c.geom.dilation,
            c.geom.pad_h,
            c.geom.pad_w,
            flag(c.bias),
            flag(c.batch_norm),
            flag(c.relu)
        ),
        LayerKind::Deconv(d) => format!(
            "{kw} name={name} in={} out={} k={} stride={} bias={} bn={} relu={}",
            d.in_channels,
            d.out_channels,
            d.k,
            d.stride,
            flag(d.bias),
            flag(d.batch_norm),
            flag(d.relu)
        ),
        LayerKind::MaxPool { k, stride, pad } => format!("{kw} name={name} k={k} stride={stride} pad={pad}"),
        LayerKind::AvgPool { k, stride } => format!("{kw} name={name} k={k} stride={stride}"),
        LayerKind::Bilinear { scale } => format!("{kw} name={name} scale={scale}"),
        LayerKind::Block(b) => match b.kind {
            BlockKind::Eda | BlockKind::EdaNonAsym => format!(
                "{kw} name={name} in={} growth={} dilation={} dropout={} bn={}",
                b.in_channels,
                b.growth,
                b.dilation,
                b.dropout_rate,
                flag(b.batch_norm)
            ),
            BlockKind::Erf => format!(
                "{kw} name={name} width={} dilation={} dropout={} bn={}",
                b.in_channels,
                b.dilation,
                b.dropout_rate,
                flag(b.batch_norm)
            ),
            BlockKind::Downsample => format!(
                "{kw} name={name} in={} out={} bn={}",
                b.in_channels,
                b.out_channels,
                flag(b.batch_norm)
            ),
            BlockKind::Aspp => format!(
                "{kw} name={name} in={} branch={} bn={}",
                b.in_channels,
                b.out_channels,
                flag(b.batch_norm)
            ),
            BlockKind::Projection => format!("{kw} name={name} in={} classes={}", b.in_channels, b.out_channels),
        },
    }
}

struct Token<'a> {
    text: &'a str,
    column: usize,
}

fn tokenize(line: &str) -> Vec<Token<'_>> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                tokens.push(Token {
                    text: &line[s..i],
                    column: line[..s].chars().count() + 1,
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        tokens.push(Token {
            text: &line[s..],
            column: line[..s].chars().count() + 1,
        });
    }
    tokens
}

/// `key=value` pairs of one line, consumed by the layer constructors.
struct Fields<'a> {
    line: usize,
    keyword_column: usize,
    values: HashMap<&'a str, (&'a str, usize)>,
}

impl<'a> Fields<'a> {
    fn parse(line: usize, keyword_column: usize, tokens: &[Token<'a>]) -> Result<Self> {
        let mut values = HashMap::new();
        for t in tokens {
            let (key, value) = t.text.split_once('=').ok_or_else(|| Error::Parse {
                line,
                column: t.column,
                message: format!("expected key=value, found `{}`", t.text),
            })?;
            if key.is_empty() || value.is_empty() {
                return Err(Error::Parse {
                    line,
                    column: t.column,
                    message: format!("malformed field `{}`", t.text),
                });
            }
            let value_col = t.column + key.chars().count() + 1;
            if values.insert(key, (value, value_col)).is_some() {
                return Err(Error::Parse {
                    line,
                    column: t.column,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Fields {
            line,
            keyword_column,
            values,
        })
    }

    fn err(&self, column: usize, message: String) -> Error {
        Error::Parse {
            line: self.line,
            column,
            message,
        }
    }

    fn raw(&mut self, key: &str) -> Result<(&'a str, usize)> {
        self.values
            .remove(key)
            .ok_or_else(|| self.err(self.keyword_column, format!("missing key `{key}`")))
    }

    fn string(&mut self, key: &str) -> Result<String> {
        Ok(self.raw(key)?.0.to_string())
    }

    fn number(&mut self, key: &str) -> Result<usize> {
        let (v, col) = self.raw(key)?;
        v.parse()
            .map_err(|_| self.err(col, format!("`{key}` expects a non-negative integer, found `{v}`")))
    }

    fn number_or(&mut self, key: &str, default: usize) -> Result<usize> {
        if self.values.contains_key(key) {
            self.number(key)
        } else {
            Ok(default)
        }
    }

    fn flag_or(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.values.remove(key) {
            None => Ok(default),
            Some(("0", _)) => Ok(false),
            Some(("1", _)) => Ok(true),
            Some((v, col)) => Err(self.err(col, format!("`{key}` expects 0 or 1, found `{v}`"))),
        }
    }

    fn rate_or(&mut self, key: &str, default: f32) -> Result<f32> {
        match self.values.remove(key) {
            None => Ok(default),
            Some((v, col)) => v
                .parse::<f32>()
                .ok()
                .filter(|r| (0.0..1.0).contains(r))
                .ok_or_else(|| self.err(col, format!("`{key}` expects a rate in [0, 1), found `{v}`"))),
        }
    }

    fn size(&mut self, key: &str) -> Result<(usize, usize)> {
        let (v, col) = self.raw(key)?;
        v.split_once('x')
            .and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)))
            .ok_or_else(|| self.err(col, format!("`{key}` expects HxW, found `{v}`")))
    }

    fn finish(self) -> Result<()> {
        let mut leftover: Vec<_> = self.values.iter().collect();
        leftover.sort_by_key(|(_, (_, col))| *col);
        match leftover.first() {
            Some((key, (_, col))) => Err(self.err(*col - key.chars().count() - 1, format!("unknown key `{key}`"))),
            None => Ok(()),
        }
    }
}

fn parse_layer(keyword: &Token<'_>, f: &mut Fields<'_>) -> Result<LayerSpec> {
    let name = f.string("name")?;
    let kind = match keyword.text {
        "conv" => {
            let in_channels = f.number("in")?;
            let out_channels = f.number("out")?;
            let kh = f.number("kh")?;
            let kw = f.number("kw")?;
            let stride = f.number_or("stride", 1)?;
            let dilation = f.number_or("dilation", 1)?;
            let pad_h = f.number_or("pad_h", 0)?;
            let pad_w = f.number_or("pad_w", 0)?;
            LayerKind::Conv(ConvLayer {
                in_channels,
                out_channels,
                kh,
                kw,
                geom: ConvGeometry::new(stride, dilation, pad_h, pad_w),
                bias: f.flag_or("bias", false)?,
                batch_norm: f.flag_or("bn", true)?,
                relu: f.flag_or("relu", true)?,
            })
        }
        "deconv" => LayerKind::Deconv(DeconvLayer {
            in_channels: f.number("in")?,
            out_channels: f.number("out")?,
            k: f.number("k")?,
            stride: f.number("stride")?,
            bias: f.flag_or("bias", false)?,
            batch_norm: f.flag_or("bn", true)?,
            relu: f.flag_or("relu", true)?,
        }),
        "maxpool" => LayerKind::MaxPool {
            k: f.number("k")?,
            stride: f.number("stride")?,
            pad: f.number_or("pad", 0)?,
        },
        "avgpool" => LayerKind::AvgPool {
            k: f.number("k")?,
            stride: f.number("stride")?,
        },
        "bilinear" => LayerKind::Bilinear {
            scale: f.number("scale")?,
        },
        "eda" | "eda_na" => {
            let in_channels = f.number("in")?;
            let growth = f.number("growth")?;
            let dilation = f.number_or("dilation", 1)?;
            let spec = if keyword.text == "eda" {
                BlockSpec::eda(in_channels, growth, dilation)
            } else {
                BlockSpec::eda_non_asym(in_channels, growth, dilation)
            };
            LayerKind::Block(BlockSpec {
                dropout_rate: f.rate_or("dropout", DEFAULT_DROPOUT)?,
                batch_norm: f.flag_or("bn", true)?,
                ..spec
            })
        }
        "erf" => {
            let width = f.number("width")?;
            let dilation = f.number_or("dilation", 1)?;
            LayerKind::Block(BlockSpec {
                dropout_rate: f.rate_or("dropout", DEFAULT_DROPOUT)?,
                batch_norm: f.flag_or("bn", true)?,
                ..BlockSpec::erf(width, dilation)
            })
        }
        "downsample" => {
            let spec = BlockSpec::downsample(f.number("in")?, f.number("out")?);
            LayerKind::Block(BlockSpec {
                batch_norm: f.flag_or("bn", true)?,
                ..spec
            })
        }
        "aspp" => {
            let spec = BlockSpec::aspp(f.number("in")?, f.number("branch")?);
            LayerKind::Block(BlockSpec {
                batch_norm: f.flag_or("bn", true)?,
                ..spec
            })
        }
        "projection" => LayerKind::Block(BlockSpec::projection(f.number("in")?, f.number("classes")?)),
        other => {
            return Err(Error::Parse {
                line: f.line,
                column: keyword.column,
                message: format!("unknown layer kind `{other}`"),
            })
        }
    };
    Ok(LayerSpec::new(name, kind))
}

/// Parse `.nspec` text. Errors carry the 1-based line and column.
pub fn parse_netspec(text: &str) -> Result<NetworkSpec> {
    let mut header: Option<NetworkSpec> = None;
    let mut names = HashSet::new();
    let mut lines_of_layers = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        let tokens = tokenize(content);
        let Some((keyword, rest)) = tokens.split_first() else {
            continue;
        };
        let mut fields = Fields::parse(line_no, keyword.column, rest)?;
        let at = |message: String| Error::Parse {
            line: line_no,
            column: keyword.column,
            message,
        };
        if keyword.text == "net" {
            if header.is_some() {
                return Err(at("duplicate `net` header".into()));
            }
            let name = fields.string("name")?;
            let classes = fields.number("classes")?;
            let upscale = fields.number_or("upscale", 1)?;
            let train_size = if fields.values.contains_key("train") {
                fields.size("train")?
            } else {
                (512, 1024)
            };
            fields.finish()?;
            header = Some(NetworkSpec {
                name,
                classes,
                layers: Vec::new(),
                train_size,
                inference_upscale: upscale,
            });
            continue;
        }
        let net = header
            .as_mut()
            .ok_or_else(|| at("expected `net` header before the first layer".into()))?;
        let layer = parse_layer(keyword, &mut fields)?;
        fields.finish()?;
        layer.validate().map_err(|e| at(e.to_string()))?;
        if !names.insert(layer.name.clone()) {
            return Err(at(format!("duplicate layer name `{}`", layer.name)));
        }
        net.layers.push(layer);
        lines_of_layers.push((line_no, keyword.column));
    }

    let net = header.ok_or_else(|| Error::Parse {
        line: text.lines().count().max(1),
        column: 1,
        message: "missing `net` header".into(),
    })?;

    // Channel arithmetic, reported at the first offending line.
    let mut c = net.input_channels();
    for (layer, (line, column)) in net.layers.iter().zip(&lines_of_layers) {
        if let Some(need) = layer.in_channels() {
            if need != c {
                return Err(Error::Parse {
                    line: *line,
                    column: *column,
                    message: format!(
                        "layer `{}` expects {need} input channels but receives {c}",
                        layer.name
                    ),
                });
            }
        }
        c = layer.out_channels(c);
    }
    net.validate().map_err(|e| Error::Parse {
        line: 1,
        column: 1,
        message: e.to_string(),
    })?;
    Ok(net)
}
