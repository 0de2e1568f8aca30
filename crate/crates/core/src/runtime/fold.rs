use std::collections::HashMap;

use crate::blocks::{Graph, Op, Src};
use crate::error::{Error, Result};
use crate::netdef::NetworkSpec;
use crate::tensor::BN_EPS;

use super::weights::{Param, WeightStore};

/// A network with every batch normalization merged into the preceding
/// convolution, and the rewritten weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedNetwork {
    pub net: NetworkSpec,
    pub weights: WeightStore,
}

/// Per-channel `bn(x) = scale·(x − mean) + beta`.
#[derive(Debug, Clone)]
struct Norm {
    scale: Vec<f32>,
    mean: Vec<f32>,
    beta: Vec<f32>,
}

impl Norm {
    fn load(weights: &WeightStore, param: &str, c: usize) -> Result<Self> {
        let get = |part: &str| -> Result<&[f32]> { Ok(&weights.require(&format!("{param}.{part}"), &[c])?.data) };
        let (gamma, var) = (get("gamma")?, get("var")?);
        Ok(Norm {
            scale: gamma.iter().zip(var).map(|(g, v)| g / (v + BN_EPS).sqrt()).collect(),
            mean: get("mean")?.to_vec(),
            beta: get("beta")?.to_vec(),
        })
    }

    fn slice(&self, start: usize, len: usize) -> Norm {
        let r = start..start + len;
        Norm {
            scale: self.scale[r.clone()].to_vec(),
            mean: self.mean[r.clone()].to_vec(),
            beta: self.beta[r].to_vec(),
        }
    }

    fn shift(&self) -> Vec<f32> {
        self.scale
            .iter()
            .zip(self.mean.iter().zip(&self.beta))
            .map(|(s, (m, b))| b - s * m)
            .collect()
    }
}

fn is_conv(op: &Op) -> bool {
    matches!(op, Op::Conv { .. } | Op::Deconv { .. })
}

fn param_name(op: &Op) -> Option<&str> {
    match op {
        Op::Conv { param, .. } | Op::Deconv { param, .. } | Op::Affine { param, .. } => Some(param),
        _ => None,
    }
}

/// Channel count of every step, given the block input's.
fn step_channels(graph: &Graph, input: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(graph.steps.len());
    for step in &graph.steps {
        let of = |s: &Src| match s {
            Src::Input => input,
            Src::Step(i) => out[*i],
        };
        let c = match &step.op {
            Op::Conv { out_channels, .. } | Op::Deconv { out_channels, .. } => *out_channels,
            Op::Concat => step.inputs.iter().map(of).sum(),
            _ => of(&step.inputs[0]),
        };
        out.push(c);
    }
    out
}

/// Normalizations to merge into convolutions (keyed by tensor prefix), and
/// the ones left over for convolution-free concat branches, in order.
fn plan(graph: &Graph, layer: &str, input: usize, weights: &WeightStore) -> Result<(HashMap<String, Norm>, Vec<Norm>)> {
    let channels = step_channels(graph, input);
    let readers = |k: usize| {
        graph
            .steps
            .iter()
            .flat_map(|s| &s.inputs)
            .filter(|s| **s == Src::Step(k))
            .count()
    };
    let orphan = || Error::invalid(format!("layer `{layer}`: batch norm is not preceded by a convolution"));
    let mut convs = HashMap::new();
    let mut leftovers = Vec::new();
    for step in &graph.steps {
        let Op::BatchNorm { param, channels: c } = &step.op else {
            continue;
        };
        let norm = Norm::load(weights, param, *c)?;
        let Some(&Src::Step(j)) = step.inputs.first() else {
            return Err(orphan());
        };
        let mut merge = |k: usize, norm: Norm| -> Result<()> {
            if readers(k) != 1 {
                return Err(Error::invalid(format!(
                    "layer `{layer}`: convolution feeding a batch norm has other readers"
                )));
            }
            let name = param_name(&graph.steps[k].op).expect("convolution step");
            convs.insert(name.to_string(), norm);
            Ok(())
        };
        let prev = &graph.steps[j];
        if is_conv(&prev.op) {
            merge(j, norm)?;
        } else if prev.op == Op::Concat && prev.inputs.iter().any(|s| matches!(s, Src::Step(k) if is_conv(&graph.steps[*k].op))) {
            let mut offset = 0;
            for src in &prev.inputs {
                let c = match src {
                    Src::Input => input,
                    Src::Step(k) => channels[*k],
                };
                match src {
                    Src::Step(k) if is_conv(&graph.steps[*k].op) => merge(*k, norm.slice(offset, c))?,
                    _ => leftovers.push(norm.slice(offset, c)),
                }
                offset += c;
            }
        } else {
            return Err(orphan());
        }
    }
    Ok((convs, leftovers))
}

/// Merge every batch normalization into its preceding convolution:
/// `w' = s·w`, `b' = s·(b − mean) + beta` with `s = gamma / sqrt(var + eps)`.
///
/// A normalization over a concat splits by channel range; ranges coming from
/// a branch without a convolution become a per-channel affine.
pub fn fold_batch_norm(net: &NetworkSpec, weights: &WeightStore) -> Result<FoldedNetwork> {
    weights.validate(net)?;
    let folded_net = net.without_batch_norm();
    let mut out = WeightStore::new();
    let mut c = net.input_channels();
    for (layer, folded_layer) in net.layers.iter().zip(&folded_net.layers) {
        let graph = layer.expand()?;
        let (convs, leftovers) = plan(&graph, &layer.name, c, weights)?;
        let mut leftovers = leftovers.into_iter();
        let originals: HashMap<&str, &Op> = graph
            .steps
            .iter()
            .filter_map(|s| param_name(&s.op).map(|n| (n, &s.op)))
            .collect();
        for step in &folded_layer.expand()?.steps {
            match &step.op {
                op @ (Op::Conv { param, .. } | Op::Deconv { param, .. }) => {
                    let original = originals.get(param.as_str()).ok_or_else(|| {
                        Error::invalid(format!("layer `{}`: no convolution `{param}` to fold", layer.name))
                    })?;
                    fold_conv(original, op, convs.get(param), weights, &mut out)?;
                }
                Op::Affine { param, channels } if originals.contains_key(param.as_str()) => {
                    for part in ["scale", "shift"] {
                        let name = format!("{param}.{part}");
                        out.insert(name.clone(), weights.require(&name, &[*channels])?.clone());
                    }
                }
                Op::Affine { param, channels } => {
                    let norm = leftovers.next().filter(|n| n.scale.len() == *channels).ok_or_else(|| {
                        Error::invalid(format!("layer `{}`: no normalization for `{param}`", layer.name))
                    })?;
                    out.insert(format!("{param}.shift"), Param::new(vec![*channels], norm.shift())?);
                    out.insert(format!("{param}.scale"), Param::new(vec![*channels], norm.scale)?);
                }
                _ => {}
            }
        }
        c = layer.out_channels(c);
    }
    out.validate(&folded_net)?;
    Ok(FoldedNetwork {
        net: folded_net,
        weights: out,
    })
}

fn fold_conv(original: &Op, folded: &Op, norm: Option<&Norm>, weights: &WeightStore, out: &mut WeightStore) -> Result<()> {
    let params = original.parameters();
    let (w_name, w_dims) = &params[0];
    let w = weights.require(w_name, w_dims)?;
    let oc = w_dims[0];
    let old_bias = match params.get(1) {
        Some((name, dims)) => weights.require(name, dims)?.data.clone(),
        None => vec![0.0; oc],
    };
    let (data, bias) = match norm {
        Some(n) => {
            let per = w.data.len() / oc;
            let data = w
                .data
                .chunks(per)
                .zip(&n.scale)
                .flat_map(|(f, s)| f.iter().map(move |v| s * v))
                .collect();
            let bias = (0..oc).map(|c| n.scale[c] * (old_bias[c] - n.mean[c]) + n.beta[c]).collect();
            (data, bias)
        }
        None => (w.data.clone(), old_bias),
    };
    out.insert(w_name.clone(), Param::new(w_dims.clone(), data)?);
    if let Some((name, dims)) = folded.parameters().get(1) {
        out.insert(name.clone(), Param::new(dims.clone(), bias)?);
    }
    Ok(())
}
