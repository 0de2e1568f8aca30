//! Class weighting, the polynomial learning-rate schedule and mean IoU.

use crate::error::{Error, Result};
use crate::tensor::LabelMap;

/// Smoothing constant for class weighting.
pub const CLASS_WEIGHT_K: f64 = 1.12;
pub const BASE_LEARNING_RATE: f64 = 5e-4;
pub const POLY_POWER: f64 = 0.9;

/// `1 / ln(p + k)` per class.
pub fn class_weights(freqs: &[f64], k: f64) -> Result<Vec<f64>> {
    freqs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Domain(format!("class {i}: frequency {p} is outside [0, 1]")));
            }
            if !(p + k > 1.0) {
                return Err(Error::Domain(format!("class {i}: p + k = {} must exceed 1", p + k)));
            }
            Ok(1.0 / (p + k).ln())
        })
        .collect()
}

/// `base · (1 − iter/max_iter)^power`.
pub fn poly_lr(base: f64, iter: u64, max_iter: u64, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::Domain("max_iter must be positive".into()));
    }
    if iter > max_iter {
        return Err(Error::Domain(format!("iteration {iter} exceeds max_iter {max_iter}")));
    }
    Ok(base * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both maps.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the defined classes; `None` when no class is defined.
    pub mean: Option<f64>,
}

/// Intersection over union per class and its mean. Pixels whose ground
/// truth equals `ignore_label` are skipped.
pub fn mean_iou(pred: &LabelMap, gt: &LabelMap, classes: usize, ignore_label: Option<u32>) -> Result<IouReport> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(format!(
            "prediction {}x{} differs from ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let in_range = |l: u32| (l as usize) < classes || Some(l) == ignore_label;
    let mut tp = vec![0u64; classes];
    let mut fp = vec![0u64; classes];
    let mut fn_ = vec![0u64; classes];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if !in_range(p) || !in_range(g) {
            return Err(Error::Domain(format!("label {} is out of range for {classes} classes", p.max(g))));
        }
        if Some(g) == ignore_label {
            continue;
        }
        if p == g {
            tp[g as usize] += 1;
        } else {
            fn_[g as usize] += 1;
            if Some(p) != ignore_label {
                fp[p as usize] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let union = tp[c] + fp[c] + fn_[c];
            (union > 0).then(|| tp[c] as f64 / union as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(IouReport { per_class, mean })
}
