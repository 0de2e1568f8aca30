//! Built-in consistency checks: factorized convolution, dilation, batch-norm
//! folding and the analyzer's reference totals.

use crate::analyzer::{count_multiply_adds, count_params, effective_kernel};
use crate::error::Result;
use crate::netdef::{build_variant, Variant};
use crate::ops::{argmax_channels, conv2d, ConvGeometry};
use crate::runtime::{fold_batch_norm, forward, init_weights, perturb_batch_norm, SplitMix64};
use crate::tensor::{Kernel, Shape, Tensor};

/// Published parameter totals in millions, with relative tolerance.
pub const REFERENCE_PARAMS: [(Variant, f64, f64); 6] = [
    (Variant::Edanet, 0.68, 0.02),
    (Variant::NonAsym, 0.81, 0.02),
    (Variant::NonDense, 0.73, 0.02),
    (Variant::Shallow, 0.55, 0.02),
    (Variant::Aspp, 3.41, 0.02),
    (Variant::Densedown, 0.42, 0.03),
];

/// Published multiply-add totals at 512×1024 in billions, with relative tolerance.
pub const REFERENCE_MACS: [(Variant, f64, f64); 5] = [
    (Variant::Edanet, 8.97, 0.05),
    (Variant::NonAsym, 11.41, 0.05),
    (Variant::NonDense, 8.87, 0.05),
    (Variant::Shallow, 7.77, 0.05),
    (Variant::Densedown, 8.51, 0.05),
];

pub const FOLD_TOLERANCE: f32 = 1e-4;
pub const SEPARABILITY_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

pub fn random_tensor(rng: &mut SplitMix64, shape: Shape) -> Tensor {
    let data = (0..shape.numel()).map(|_| rng.next_symmetric(1.0)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

fn random_vec(rng: &mut SplitMix64, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.next_symmetric(1.0)).collect()
}

/// `max|a − b| / max|a|`.
pub fn relative_error(reference: &Tensor, other: &Tensor) -> f32 {
    let scale = reference.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let diff = reference.max_abs_diff(other).unwrap_or(f32::INFINITY);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// One random rank-1 `n×n` kernel on a random multi-channel input: relative
/// error between the 2-D convolution and the vertical-then-horizontal pair.
pub fn separability_trial(rng: &mut SplitMix64, n: usize) -> Result<f32> {
    let channels = 1 + (rng.next_u64() % 4) as usize;
    let h = n + (rng.next_u64() % 12) as usize;
    let w = n + (rng.next_u64() % 12) as usize;
    let pad = n / 2;
    let input = random_tensor(rng, Shape::chw(channels, h, w));
    let col = random_vec(rng, channels * n);
    let row = random_vec(rng, n);
    let full: Vec<f32> = (0..channels * n)
        .flat_map(|iy| row.iter().map(move |wx| (iy, *wx)))
        .map(|(iy, wx)| col[iy] * wx)
        .collect();
    let full = Kernel::new(1, channels, n, n, full, None)?;
    let vertical = Kernel::new(1, channels, n, 1, col, None)?;
    let horizontal = Kernel::new(1, 1, 1, n, row, None)?;
    let direct = conv2d(&input, &full, ConvGeometry::new(1, 1, pad, pad))?;
    let mid = conv2d(&input, &vertical, ConvGeometry::new(1, 1, pad, 0))?;
    let composed = conv2d(&mid, &horizontal, ConvGeometry::new(1, 1, 0, pad))?;
    Ok(relative_error(&direct, &composed))
}

/// The undilated kernel with `r − 1` zeros between taps.
pub fn zero_insert(k: &Kernel, r: usize) -> Kernel {
    let (eh, ew) = (effective_kernel(k.kh, r), effective_kernel(k.kw, r));
    let mut weights = vec![0.0; k.out_channels * k.in_channels * eh * ew];
    for o in 0..k.out_channels {
        for i in 0..k.in_channels {
            for y in 0..k.kh {
                for x in 0..k.kw {
                    weights[((o * k.in_channels + i) * eh + y * r) * ew + x * r] = k.weight(o, i, y, x);
                }
            }
        }
    }
    Kernel::new(k.out_channels, k.in_channels, eh, ew, weights, k.bias.clone()).expect("dims are consistent")
}

/// Whether a dilated convolution and its zero-inserted equivalent agree bit
/// for bit on a random input.
pub fn dilation_trial(rng: &mut SplitMix64, n: usize, r: usize) -> Result<bool> {
    let extent = effective_kernel(n, r);
    let input = random_tensor(rng, Shape::chw(3, extent + 5, extent + 9));
    let k = Kernel::new(2, 3, n, n, random_vec(rng, 2 * 3 * n * n), None)?;
    let pad = r * (n / 2);
    let dilated = conv2d(&input, &k, ConvGeometry::new(1, r, pad, pad))?;
    let inserted = conv2d(&input, &zero_insert(&k, r), ConvGeometry::new(1, 1, pad, pad))?;
    let same = dilated.shape() == inserted.shape()
        && dilated
            .data()
            .iter()
            .zip(inserted.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    Ok(same)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub max_abs_diff: f32,
    pub max_abs_logit: f32,
    pub labels_equal: bool,
}

/// Seeded weights with perturbed normalizations; compares folded and
/// unfolded logits on a seeded input.
pub fn fold_trial(variant: Variant, seed: u64, input: Shape) -> Result<FoldOutcome> {
    let net = build_variant(variant, 19)?;
    let mut weights = init_weights(&net, seed)?;
    perturb_batch_norm(&net, &mut weights, seed.wrapping_add(1))?;
    let folded = fold_batch_norm(&net, &weights)?;
    let mut rng = SplitMix64::new(seed.wrapping_add(2));
    let data = (0..input.numel()).map(|_| rng.next_unit() as f32).collect();
    let x = Tensor::new(input, data)?;
    let a = forward(&net, &weights, &x)?;
    let b = forward(&folded.net, &folded.weights, &x)?;
    Ok(FoldOutcome {
        max_abs_diff: a.max_abs_diff(&b)?,
        max_abs_logit: a.data().iter().fold(0.0, |m, v| m.max(v.abs())),
        labels_equal: argmax_channels(&a)? == argmax_channels(&b)?,
    })
}

fn within(value: f64, reference: f64, tol: f64) -> bool {
    (value - reference).abs() <= tol * reference
}

/// Every check with its outcome, in a fixed order.
pub fn run_selftest(seed: u64) -> Vec<CheckResult> {
    let mut results = Vec::new();
    let mut rng = SplitMix64::new(seed);

    let mut worst = 0.0f32;
    let mut failure = None;
    for t in 0..100 {
        match separability_trial(&mut rng, if t % 2 == 0 { 3 } else { 5 }) {
            Ok(e) => worst = worst.max(e),
            Err(e) => failure = Some(e.to_string()),
        }
    }
    results.push(match failure {
        Some(e) => CheckResult::new("separability", false, e),
        None => CheckResult::new(
            "separability",
            worst <= SEPARABILITY_TOLERANCE,
            format!("worst relative error {worst:.2e} over 100 rank-1 kernels"),
        ),
    });

    for r in [2, 4, 8, 16] {
        let outcome = dilation_trial(&mut rng, 3, r);
        results.push(CheckResult::new(
            format!("dilation r={r}"),
            matches!(outcome, Ok(true)),
            match outcome {
                Ok(true) => format!("bit-identical to a {0}x{0} zero-inserted kernel", effective_kernel(3, r)),
                Ok(false) => "outputs differ".to_string(),
                Err(e) => e.to_string(),
            },
        ));
    }

    for v in Variant::ALL {
        let name = format!("fold {v}");
        results.push(match fold_trial(v, seed, Shape::chw(3, 64, 128)) {
            Ok(o) => CheckResult::new(
                name,
                o.max_abs_diff <= FOLD_TOLERANCE && o.labels_equal,
                format!(
                    "max |folded - unfolded| = {:.2e} (relative {:.1e}), labels {}",
                    o.max_abs_diff,
                    o.max_abs_diff / o.max_abs_logit.max(f32::MIN_POSITIVE),
                    if o.labels_equal { "identical" } else { "differ" }
                ),
            ),
            Err(e) => CheckResult::new(name, false, e.to_string()),
        });
    }

    for (v, millions, tol) in REFERENCE_PARAMS {
        let name = format!("params {v}");
        results.push(match build_variant(v, 19).and_then(|n| count_params(&n)) {
            Ok(c) => {
                let m = c.total as f64 / 1e6;
                CheckResult::new(
                    name,
                    within(m, millions, tol),
                    format!("{m:.3}M vs {millions}M ±{}%", tol * 100.0),
                )
            }
            Err(e) => CheckResult::new(name, false, e.to_string()),
        });
    }
    for (v, billions, tol) in REFERENCE_MACS {
        let name = format!("mult-adds {v}");
        let counted = build_variant(v, 19).and_then(|n| count_multiply_adds(&n, Shape::chw(3, 512, 1024)));
        results.push(match counted {
            Ok(c) => {
                let b = c.total as f64 / 1e9;
                CheckResult::new(
                    name,
                    within(b, billions, tol),
                    format!("{b:.3}B vs {billions}B ±{}%", tol * 100.0),
                )
            }
            Err(e) => CheckResult::new(name, false, e.to_string()),
        });
    }
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_insert_layout() {
        let k = Kernel::new(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0], None).unwrap();
        let z = zero_insert(&k, 3);
        assert_eq!((z.kh, z.kw), (4, 4));
        assert_eq!(z.weight(0, 0, 0, 3), 2.0);
        assert_eq!(z.weight(0, 0, 3, 0), 3.0);
        assert_eq!(z.weights.iter().filter(|&&w| w != 0.0).count(), 4);
    }

    #[test]
    fn trials_pass_on_a_few_seeds() {
        let mut rng = SplitMix64::new(5);
        for n in [3, 5] {
            assert!(separability_trial(&mut rng, n).unwrap() <= SEPARABILITY_TOLERANCE);
        }
        assert!(dilation_trial(&mut rng, 3, 2).unwrap());
    }
}
