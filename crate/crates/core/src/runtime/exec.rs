use crate::blocks::{Graph, Op, ResizeTarget, Src};
use crate::error::{Error, Result};
use crate::netdef::{NetworkSpec, TOTAL_STRIDE};
use crate::ops;
use crate::tensor::{BnParams, Kernel, LabelMap, Tensor, BN_EPS};

use super::fold::fold_batch_norm;
use super::weights::WeightStore;

fn kernel(
    weights: &WeightStore,
    param: &str,
    (out, inp, kh, kw): (usize, usize, usize, usize),
    bias: bool,
) -> Result<Kernel> {
    let w = weights.require(&format!("{param}.w"), &[out, inp, kh, kw])?;
    let b = if bias {
        Some(weights.require(&format!("{param}.b"), &[out])?.data.clone())
    } else {
        None
    };
    Kernel::new(out, inp, kh, kw, w.data.clone(), b)
}

fn vector<'a>(weights: &'a WeightStore, param: &str, part: &str, c: usize) -> Result<&'a [f32]> {
    Ok(&weights.require(&format!("{param}.{part}"), &[c])?.data)
}

fn apply(op: &Op, args: &[&Tensor], block_input: &Tensor, weights: &WeightStore) -> Result<Tensor> {
    let x = args[0];
    match op {
        Op::Conv {
            param,
            in_channels,
            out_channels,
            kh,
            kw,
            geom,
            bias,
        } => {
            let k = kernel(weights, param, (*out_channels, *in_channels, *kh, *kw), *bias)?;
            ops::conv2d(x, &k, *geom)
        }
        Op::Deconv {
            param,
            in_channels,
            out_channels,
            k,
            stride,
            bias,
        } => {
            let kern = kernel(weights, param, (*out_channels, *in_channels, *k, *k), *bias)?;
            ops::transposed_conv2d(x, &kern, *stride)
        }
        Op::BatchNorm { param, channels } => {
            let p = BnParams::new(
                vector(weights, param, "gamma", *channels)?.to_vec(),
                vector(weights, param, "beta", *channels)?.to_vec(),
                vector(weights, param, "mean", *channels)?.to_vec(),
                vector(weights, param, "var", *channels)?.to_vec(),
                BN_EPS,
            )?;
            ops::batch_norm(x, &p)
        }
        Op::Affine { param, channels } => ops::channel_affine(
            x,
            vector(weights, param, "scale", *channels)?,
            vector(weights, param, "shift", *channels)?,
        ),
        Op::Relu => Ok(ops::relu(x)),
        Op::Dropout { .. } => Ok(x.clone()),
        Op::MaxPool { k, stride, pad } => ops::max_pool2d(x, *k, *stride, *pad),
        Op::AvgPool { k, stride } => ops::avg_pool2d(x, *k, *stride),
        Op::GlobalAvgPool => Ok(ops::global_avg_pool(x)),
        Op::Resize(target) => {
            let s = x.shape();
            let (h, w) = match target {
                ResizeTarget::Scale(f) => (s.h * f, s.w * f),
                ResizeTarget::BlockInput => (block_input.shape().h, block_input.shape().w),
            };
            ops::bilinear_resize(x, h, w)
        }
        Op::Concat => ops::concat_all(args),
        Op::Add => args[1..].iter().try_fold(x.clone(), |acc, t| ops::add(&acc, t)),
    }
}

fn run_graph(graph: &Graph, input: &Tensor, weights: &WeightStore) -> Result<Tensor> {
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.steps.len());
    for step in &graph.steps {
        let args: Vec<&Tensor> = step
            .inputs
            .iter()
            .map(|s| match s {
                Src::Input => input,
                Src::Step(i) => &values[*i],
            })
            .collect();
        let out = apply(&step.op, &args, input, weights)?;
        values.push(out);
    }
    Ok(values.pop().unwrap_or_else(|| input.clone()))
}

/// Run a single layer of `net`.
pub fn run_layer(net: &NetworkSpec, index: usize, weights: &WeightStore, input: &Tensor) -> Result<Tensor> {
    let layer = net
        .layers
        .get(index)
        .ok_or_else(|| Error::invalid(format!("no layer at index {index}")))?;
    run_graph(&layer.expand()?, input, weights).map_err(|e| match e {
        Error::Shape(msg) => Error::Shape(format!("layer `{}`: {msg}", layer.name)),
        Error::ChannelMismatch { expected, found, .. } => Error::ChannelMismatch {
            context: format!("layer `{}`", layer.name),
            expected,
            found,
        },
        other => other,
    })
}

/// Execute every layer in order and return the final tensor.
pub fn forward(net: &NetworkSpec, weights: &WeightStore, input: &Tensor) -> Result<Tensor> {
    let mut x = input.clone();
    for i in 0..net.layers.len() {
        x = run_layer(net, i, weights, &x)?;
    }
    Ok(x)
}

/// Segment one RGB image: forward (optionally folded), the network's
/// inference-time upscale, then per-pixel argmax.
pub fn infer_image(net: &NetworkSpec, weights: &WeightStore, image: &Tensor, fold: bool) -> Result<LabelMap> {
    let s = image.shape();
    if s.n != 1 || s.c != net.input_channels() {
        return Err(Error::shape(format!(
            "expected a single {}-channel image, got {s}",
            net.input_channels()
        )));
    }
    if !s.h.is_multiple_of(TOTAL_STRIDE) || !s.w.is_multiple_of(TOTAL_STRIDE) {
        return Err(Error::shape(format!(
            "image {}x{} is not divisible by {TOTAL_STRIDE}",
            s.h, s.w
        )));
    }
    let logits = if fold {
        let folded = fold_batch_norm(net, weights)?;
        forward(&folded.net, &folded.weights, image)?
    } else {
        forward(net, weights, image)?
    };
    let logits = if net.inference_upscale > 1 {
        let l = logits.shape();
        ops::bilinear_resize(&logits, l.h * net.inference_upscale, l.w * net.inference_upscale)?
    } else {
        logits
    };
    ops::argmax_channels(&logits)
}
