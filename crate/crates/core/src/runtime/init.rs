use crate::blocks::Op;
use crate::error::{Error, Result};
use crate::netdef::NetworkSpec;

use super::rng::{tensor_seed, SplitMix64};
use super::weights::{Param, WeightStore};

/// `sqrt(6 / fan_in)`.
pub fn uniform_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn uniform(seed: u64, name: &str, n: usize, bound: f64) -> Vec<f32> {
    let mut rng = SplitMix64::new(tensor_seed(seed, name));
    (0..n).map(|_| rng.next_symmetric(bound)).collect()
}

/// Deterministic weights for every tensor the network reads.
///
/// Convolution weights and biases are uniform in `±sqrt(6/fan_in)`, each
/// tensor drawing from its own splitmix64 stream. Normalizations start as
/// the identity.
pub fn init_weights(net: &NetworkSpec, seed: u64) -> Result<WeightStore> {
    let mut store = WeightStore::new();
    for layer in &net.layers {
        for step in layer.expand()?.steps {
            match &step.op {
                Op::Conv {
                    in_channels,
                    kh,
                    kw,
                    ..
                } => conv_tensors(&mut store, &step.op, seed, in_channels * kh * kw),
                Op::Deconv { in_channels, k, .. } => conv_tensors(&mut store, &step.op, seed, in_channels * k * k),
                Op::BatchNorm { .. } | Op::Affine { .. } => {
                    for (name, dims) in step.op.parameters() {
                        let fill = if name.ends_with(".gamma") || name.ends_with(".var") || name.ends_with(".scale") {
                            1.0
                        } else {
                            0.0
                        };
                        store.insert(name, Param::new(dims.clone(), vec![fill; dims[0]])?);
                    }
                }
                _ => {}
            }
        }
    }
    Ok(store)
}

fn conv_tensors(store: &mut WeightStore, op: &Op, seed: u64, fan_in: usize) {
    let bound = uniform_bound(fan_in);
    for (name, dims) in op.parameters() {
        let n = dims.iter().product();
        let data = uniform(seed, &name, n, bound);
        store.insert(name, Param { dims, data });
    }
}

/// Replace every batch-norm tensor with seeded non-trivial statistics:
/// gamma in [0.5, 1.5), beta and mean in [-0.25, 0.25), var in [0.5, 1.5).
pub fn perturb_batch_norm(net: &NetworkSpec, store: &mut WeightStore, seed: u64) -> Result<()> {
    for layer in &net.layers {
        for step in layer.expand()?.steps {
            if !matches!(step.op, Op::BatchNorm { .. } | Op::Affine { .. }) {
                continue;
            }
            for (name, _) in step.op.parameters() {
                let centre = if name.ends_with(".gamma") || name.ends_with(".var") || name.ends_with(".scale") {
                    1.0
                } else {
                    0.0
                };
                let spread = if centre == 1.0 { 0.5 } else { 0.25 };
                let p = store
                    .get_mut(&name)
                    .ok_or_else(|| Error::MissingWeight(name.clone()))?;
                let n = p.data.len();
                p.data = uniform(seed, &name, n, spread)
                    .into_iter()
                    .map(|v| v + centre)
                    .collect();
            }
        }
    }
    Ok(())
}
