//! Segmentation metrics from a confusion matrix, and pseudo-label quality.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::filter::FeatureLabelPair;
use crate::numerics::{argmax, PROB_EPS};

/// `counts[t][p]` = points of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
    pub total: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![vec![0; classes]; classes],
            total: 0,
        }
    }

    /// Adds one scene's predictions. Truth entries of `-1` are skipped.
    pub fn accumulate(&mut self, preds: &[usize], truth: &[i32]) -> Result<()> {
        if preds.len() != truth.len() {
            return Err(Error::arg(format!("{} predictions for {} labels", preds.len(), truth.len())));
        }
        for (&p, &t) in preds.iter().zip(truth) {
            if t < 0 {
                continue;
            }
            let t = t as usize;
            if t >= self.classes || p >= self.classes {
                return Err(Error::arg(format!("class pair ({t}, {p}) outside {} classes", self.classes)));
            }
            self.counts[t][p] += 1;
            self.total += 1;
        }
        Ok(())
    }
}

pub fn confusion(preds: &[usize], truth: &[i32], classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(preds, truth)?;
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentationMetrics {
    /// `None` for classes absent from both truth and predictions.
    pub iou: Vec<Option<f64>>,
    pub acc: Vec<Option<f64>>,
    pub miou: f64,
    pub macc: f64,
}

pub fn iou_acc(cm: &ConfusionMatrix) -> Result<SegmentationMetrics> {
    let c = cm.classes;
    let mut iou = vec![None; c];
    let mut acc = vec![None; c];
    let mut iou_frac = Vec::new();
    let mut acc_frac = Vec::new();
    for k in 0..c {
        let tp = cm.counts[k][k];
        let row = cm.counts[k].iter().sum::<u64>();
        let col = (0..c).map(|t| cm.counts[t][k]).sum::<u64>();
        let union = row + col - tp;
        if union == 0 {
            continue;
        }
        iou[k] = Some(tp as f64 / union as f64);
        iou_frac.push((tp, union));
        // A class that is only ever predicted has no recall to report.
        if row > 0 {
            acc[k] = Some(tp as f64 / row as f64);
            acc_frac.push((tp, row));
        }
    }
    let miou = mean_of_ratios(&iou_frac).ok_or_else(|| Error::Metric("no class is defined in the confusion matrix".into()))?;
    Ok(SegmentationMetrics {
        macc: mean_of_ratios(&acc_frac).unwrap_or(0.0),
        iou,
        acc,
        miou,
    })
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of `num/den` ratios, summed exactly as a fraction when it fits in 128 bits
/// so that the result is the correctly rounded value.
fn mean_of_ratios(r: &[(u64, u64)]) -> Option<f64> {
    if r.is_empty() {
        return None;
    }
    let exact = r.iter().try_fold((0u128, 1u128), |(n, d), &(a, b)| {
        let (a, b) = (a as u128, b as u128);
        let g = gcd(d, b);
        let den = (d / g).checked_mul(b)?;
        let num = n.checked_mul(b / g)?.checked_add(a.checked_mul(d / g)?)?;
        let h = gcd(num, den).max(1);
        Some((num / h, den / h))
    });
    Some(match exact.and_then(|(n, d)| Some((n, d.checked_mul(r.len() as u128)?))) {
        Some((n, d)) if n < (1 << 53) && d < (1 << 53) => n as f64 / d as f64,
        _ => r.iter().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / r.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LabelQuality {
    /// Mean `-ln max(y_true, eps)`.
    pub li: f64,
    /// Percent of pairs whose argmax equals the true class.
    pub la: f64,
}

pub fn label_quality<'a>(pairs: impl IntoIterator<Item = &'a FeatureLabelPair>, classes: usize) -> Result<LabelQuality> {
    let (mut li, mut hits, mut n) = (0.0, 0usize, 0usize);
    for p in pairs {
        let t = p
            .true_class
            .ok_or_else(|| Error::Metric(format!("pair for point {} has no true class", p.point_index)))?;
        if t >= classes || p.pseudo_label.len() != classes {
            return Err(Error::Metric(format!("true class {t} or label width {} outside {classes} classes", p.pseudo_label.len())));
        }
        li -= p.pseudo_label[t].max(PROB_EPS).ln();
        hits += usize::from(argmax(&p.pseudo_label) == t);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Metric("label quality of an empty set".into()));
    }
    Ok(LabelQuality {
        li: li / n as f64,
        la: 100.0 * hits as f64 / n as f64,
    })
}
