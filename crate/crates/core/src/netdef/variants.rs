use crate::blocks::BlockSpec;
use crate::error::{Error, Result};
use crate::ops::ConvGeometry;

use super::{ConvLayer, DeconvLayer, LayerKind, LayerSpec, NetworkSpec};

/// The reference network and its ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Edanet,
    NonAsym,
    NonDense,
    Shallow,
    Aspp,
    Erfdec,
    Densedown,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Edanet,
        Variant::NonAsym,
        Variant::NonDense,
        Variant::Shallow,
        Variant::Aspp,
        Variant::Erfdec,
        Variant::Densedown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Edanet => "edanet",
            Variant::NonAsym => "non_asym",
            Variant::NonDense => "non_dense",
            Variant::Shallow => "shallow",
            Variant::Aspp => "aspp",
            Variant::Erfdec => "erfdec",
            Variant::Densedown => "densedown",
        }
    }
}

/// Dataset geometry a network is configured for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    /// 19 classes, trained at 512×1024, logits upscaled ×2 at inference.
    Cityscapes,
    /// 11 classes at native 360×480.
    CamVid,
}

impl Dataset {
    pub fn classes(self) -> usize {
        match self {
            Dataset::Cityscapes => 19,
            Dataset::CamVid => 11,
        }
    }

    pub fn train_size(self) -> (usize, usize) {
        match self {
            Dataset::Cityscapes => (512, 1024),
            Dataset::CamVid => (360, 480),
        }
    }

    pub fn inference_upscale(self) -> usize {
        match self {
            Dataset::Cityscapes => 2,
            Dataset::CamVid => 1,
        }
    }
}

impl std::str::FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cityscapes" => Ok(Dataset::Cityscapes),
            "camvid" => Ok(Dataset::CamVid),
            other => Err(Error::invalid(format!("unknown dataset `{other}`"))),
        }
    }
}

const GROWTH: usize = 40;
const BLOCK1_DILATIONS: [usize; 5] = [1, 1, 1, 2, 2];
const BLOCK2_DILATIONS: [usize; 8] = [2, 2, 4, 4, 8, 8, 16, 16];
const RESIDUAL_BLOCK2_DILATIONS: [usize; 8] = [2, 4, 8, 16, 2, 4, 8, 16];

/// Build a variant with Cityscapes geometry and `classes` outputs.
pub fn build_variant(variant: Variant, classes: usize) -> Result<NetworkSpec> {
    build_variant_for(variant, Dataset::Cityscapes, classes)
}

pub fn build_variant_for(variant: Variant, dataset: Dataset, classes: usize) -> Result<NetworkSpec> {
    if classes == 0 {
        return Err(Error::invalid("classes must be at least 1"));
    }
    let mut layers = Vec::new();
    match variant {
        Variant::Edanet => {
            let c = dense_encoder(&mut layers, BlockSpec::eda, 8);
            head(&mut layers, c, classes);
        }
        Variant::NonAsym => {
            let c = dense_encoder(&mut layers, BlockSpec::eda_non_asym, 8);
            head(&mut layers, c, classes);
        }
        Variant::NonDense => {
            layers.push(LayerSpec::block("ds1", BlockSpec::downsample(3, 15)));
            layers.push(LayerSpec::block("ds2", BlockSpec::downsample(15, 40)));
            // Block 1 of the residual variant is undilated.
            for i in 1..=5 {
                layers.push(LayerSpec::block(format!("m1_{i}"), BlockSpec::erf(40, 1)));
            }
            layers.push(LayerSpec::block("ds3", BlockSpec::downsample(40, 80)));
            for (i, d) in RESIDUAL_BLOCK2_DILATIONS.iter().enumerate() {
                layers.push(LayerSpec::block(format!("m2_{}", i + 1), BlockSpec::erf(80, *d)));
            }
            head(&mut layers, 80, classes);
        }
        Variant::Shallow => {
            let c = dense_encoder(&mut layers, BlockSpec::eda, 4);
            head(&mut layers, c, classes);
        }
        Variant::Aspp => {
            let c = dense_encoder(&mut layers, BlockSpec::eda, 4);
            layers.push(LayerSpec::block("aspp", BlockSpec::aspp(c, c)));
            head(&mut layers, c, classes);
        }
        Variant::Erfdec => {
            let c = dense_encoder(&mut layers, BlockSpec::eda, 8);
            decoder(&mut layers, c, classes);
        }
        Variant::Densedown => {
            layers.push(LayerSpec::new(
                "conv0",
                LayerKind::Conv(ConvLayer {
                    in_channels: 3,
                    out_channels: 60,
                    kh: 7,
                    kw: 7,
                    geom: ConvGeometry::new(2, 1, 3, 3),
                    bias: false,
                    batch_norm: true,
                    relu: true,
                }),
            ));
            layers.push(LayerSpec::new(
                "pool0",
                LayerKind::MaxPool {
                    k: 3,
                    stride: 2,
                    pad: 1,
                },
            ));
            let mut c = 60;
            c = dense_stage(&mut layers, BlockSpec::eda, 1, c, &BLOCK1_DILATIONS);
            layers.push(LayerSpec::new(
                "trans",
                LayerKind::Conv(ConvLayer {
                    in_channels: c,
                    out_channels: 130,
                    kh: 1,
                    kw: 1,
                    geom: ConvGeometry::unit(),
                    bias: false,
                    batch_norm: true,
                    relu: true,
                }),
            ));
            layers.push(LayerSpec::new("tpool", LayerKind::AvgPool { k: 2, stride: 2 }));
            c = dense_stage(&mut layers, BlockSpec::eda, 2, 130, &BLOCK2_DILATIONS);
            head(&mut layers, c, classes);
        }
    }
    let net = NetworkSpec {
        name: variant.as_str().to_string(),
        classes,
        layers,
        train_size: dataset.train_size(),
        inference_upscale: dataset.inference_upscale(),
    };
    net.validate()?;
    Ok(net)
}

type DenseCtor = fn(usize, usize, usize) -> BlockSpec;

fn dense_stage(layers: &mut Vec<LayerSpec>, ctor: DenseCtor, stage: usize, mut c: usize, dilations: &[usize]) -> usize {
    for (i, d) in dilations.iter().enumerate() {
        layers.push(LayerSpec::block(format!("m{stage}_{}", i + 1), ctor(c, GROWTH, *d)));
        c += GROWTH;
    }
    c
}

/// Three downsampling blocks around two dense stages; returns final channels.
fn dense_encoder(layers: &mut Vec<LayerSpec>, ctor: DenseCtor, block2_modules: usize) -> usize {
    layers.push(LayerSpec::block("ds1", BlockSpec::downsample(3, 15)));
    layers.push(LayerSpec::block("ds2", BlockSpec::downsample(15, 60)));
    let c = dense_stage(layers, ctor, 1, 60, &BLOCK1_DILATIONS);
    layers.push(LayerSpec::block("ds3", BlockSpec::downsample(c, 130)));
    dense_stage(layers, ctor, 2, 130, &BLOCK2_DILATIONS[..block2_modules])
}

fn head(layers: &mut Vec<LayerSpec>, c: usize, classes: usize) {
    layers.push(LayerSpec::block("proj", BlockSpec::projection(c, classes)));
    layers.push(LayerSpec::new("up8", LayerKind::Bilinear { scale: 8 }));
}

fn deconv(name: &str, in_channels: usize, out_channels: usize, last: bool) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Deconv(DeconvLayer {
            in_channels,
            out_channels,
            k: 2,
            stride: 2,
            bias: last,
            batch_norm: !last,
            relu: !last,
        }),
    )
}

/// Two stages of stride-2 deconvolution plus two residual modules, then a
/// final deconvolution straight to class logits.
fn decoder(layers: &mut Vec<LayerSpec>, c: usize, classes: usize) {
    layers.push(deconv("deconv1", c, 64, false));
    for i in 1..=2 {
        layers.push(LayerSpec::block(format!("d1_{i}"), BlockSpec::erf(64, 1).with_dropout(0.0)));
    }
    layers.push(deconv("deconv2", 64, 16, false));
    for i in 1..=2 {
        layers.push(LayerSpec::block(format!("d2_{i}"), BlockSpec::erf(16, 1).with_dropout(0.0)));
    }
    layers.push(deconv("deconv3", 16, classes, true));
}
