//! Dice loss and mask-overlap metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict_mask, MapUNetR};
use crate::preprocess::{Mask, Sample};
use crate::scalar::Scalar;
use crate::tensor::{no_grad, Mode, Tensor};

pub const DEFAULT_SMOOTH: f64 = 1.0;

/// Classes scored as foreground: channel 1 for binary problems, every
/// non-background channel otherwise.
fn foreground(k: usize) -> std::ops::Range<usize> {
    1..k.max(2)
}

/// Soft dice loss of `[K, H, W]` or `[B, K, H, W]` probabilities against one
/// mask per sample:
/// `1 − (2·Σ p·g + s) / (Σ p + Σ g + s)` per foreground channel, averaged over
/// channels and samples.
pub fn dice_loss<T: Scalar>(
    probs: &Tensor<T>,
    targets: &[&Mask],
    smooth: f64,
) -> Result<Tensor<T>> {
    if !(smooth > 0.0) {
        return Err(Error::Config(format!(
            "dice smooth must be > 0, got {smooth}"
        )));
    }
    let shape = probs.shape();
    let (b, k, h, w) = match *shape {
        [k, h, w] => (1, k, h, w),
        [b, k, h, w] => (b, k, h, w),
        _ => {
            return Err(Error::Shape(format!(
                "dice_loss expects [K,H,W] or [B,K,H,W], got {shape:?}"
            )))
        }
    };
    if k < 2 {
        return Err(Error::Shape(format!(
            "dice_loss needs at least 2 classes, got {k}"
        )));
    }
    if targets.len() != b {
        return Err(Error::dim("dice_loss", &[b], &[targets.len()]));
    }
    for m in targets {
        if (m.height, m.width) != (h, w) {
            return Err(Error::dim("dice_loss", &[h, w], &[m.height, m.width]));
        }
    }

    let hw = h * w;
    let classes = foreground(k);
    let terms = (b * classes.len()) as f64;
    let s = T::lit(smooth);
    let p = probs.data();
    // (Σp, Σg, Σp·g) per (sample, class)
    let mut sums = Vec::with_capacity(b * classes.len());
    let mut loss = T::zero();
    for (bi, m) in targets.iter().enumerate() {
        for c in classes.clone() {
            let ch = &p[(bi * k + c) * hw..(bi * k + c + 1) * hw];
            let (mut sp, mut sg, mut inter) = (T::zero(), T::zero(), T::zero());
            for (&pv, &label) in ch.iter().zip(&m.data) {
                sp += pv;
                if label as usize == c {
                    sg += T::one();
                    inter += pv;
                }
            }
            loss += T::one() - (inter + inter + s) / (sp + sg + s);
            sums.push((sp + sg, inter));
        }
    }
    drop(p);
    let loss = loss / T::lit(terms);
    let labels: Vec<Vec<u8>> = targets.iter().map(|m| m.data.clone()).collect();

    Ok(Tensor::from_op(
        "dice_loss",
        vec![1],
        vec![loss],
        vec![probs.clone()],
        Box::new(move |_, _, g| {
            let scale = g[0] / T::lit(terms);
            let mut gx = vec![T::zero(); b * k * hw];
            let mut t = 0;
            for (bi, lab) in labels.iter().enumerate() {
                for c in classes.clone() {
                    let (total, inter) = sums[t];
                    t += 1;
                    let den = total + s;
                    let num = inter + inter + s;
                    let den2 = den * den;
                    let base = (bi * k + c) * hw;
                    for (i, &l) in lab.iter().enumerate() {
                        let gi = if l as usize == c { T::one() } else { T::zero() };
                        gx[base + i] = -scale * ((gi + gi) * den - num) / den2;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Pixel counts of a binary comparison for one positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    /// `2·tp / (tp + fp + fn)`, the overlap-over-union form. Equals `2·IoU`
    /// and can exceed 1; kept for comparison with [`MetricsReport::dsc`].
    pub fn dsc_union_denominator(&self) -> f64 {
        ratio(
            2 * self.true_pos,
            self.true_pos + self.false_pos + self.false_neg,
        )
    }
}

/// `num / den`, with an empty denominator meaning perfect agreement.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion(pred: &Mask, target: &Mask, positive: u8) -> Result<ConfusionCounts> {
    if (pred.height, pred.width) != (target.height, target.width) {
        return Err(Error::dim(
            "confusion",
            &[pred.height, pred.width],
            &[target.height, target.width],
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        match (p == positive, t == positive) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dsc: f64,
    pub iou: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

impl MetricsReport {
    pub fn ones() -> Self {
        MetricsReport {
            dsc: 1.0,
            iou: 1.0,
            accuracy: 1.0,
            precision: 1.0,
            recall: 1.0,
        }
    }

    /// Field-wise arithmetic mean, accumulated in slice order.
    pub fn mean(reports: &[MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::Contract("mean of zero metric reports".into()));
        }
        let mut acc = MetricsReport::default();
        for r in reports {
            acc.dsc += r.dsc;
            acc.iou += r.iou;
            acc.accuracy += r.accuracy;
            acc.precision += r.precision;
            acc.recall += r.recall;
        }
        let n = reports.len() as f64;
        Ok(MetricsReport {
            dsc: acc.dsc / n,
            iou: acc.iou / n,
            accuracy: acc.accuracy / n,
            precision: acc.precision / n,
            recall: acc.recall / n,
        })
    }
}

pub fn metrics_from_confusion(c: &ConfusionCounts) -> MetricsReport {
    let (tp, fp, tn, fneg) = (c.true_pos, c.false_pos, c.true_neg, c.false_neg);
    MetricsReport {
        dsc: ratio(2 * tp, 2 * tp + fp + fneg),
        iou: ratio(tp, tp + fp + fneg),
        accuracy: ratio(tp + tn, c.total()),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
    }
}

/// Metrics of one predicted mask, averaged over the foreground classes.
pub fn mask_metrics(pred: &Mask, target: &Mask, num_classes: usize) -> Result<MetricsReport> {
    let per_class = foreground(num_classes)
        .map(|c| Ok(metrics_from_confusion(&confusion(pred, target, c as u8)?)))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::mean(&per_class)
}

/// Per-sample metrics of the model's hard predictions, in sample order.
pub fn evaluate_per_sample<T: Scalar>(
    model: &MapUNetR<T>,
    samples: &[Sample<T>],
) -> Result<Vec<MetricsReport>> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluate on an empty dataset".into()));
    }
    let k = model.config.num_classes;
    samples
        .par_iter()
        .map(|s| {
            no_grad(|| {
                let (probs, _) = model.forward(&s.image, Mode::Infer)?;
                mask_metrics(&predict_mask(&probs)?, &s.mask, k)
            })
        })
        .collect()
}

/// Macro average of [`evaluate_per_sample`].
pub fn evaluate<T: Scalar>(model: &MapUNetR<T>, samples: &[Sample<T>]) -> Result<MetricsReport> {
    MetricsReport::mean(&evaluate_per_sample(model, samples)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::one_hot;

    fn mask(h: usize, w: usize, d: &[u8]) -> Mask {
        Mask::new(h, w, d.to_vec()).unwrap()
    }

    #[test]
    fn four_pixel_counts() {
        let c = confusion(&mask(2, 2, &[1, 1, 0, 0]), &mask(2, 2, &[1, 0, 1, 0]), 1).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                true_pos: 1,
                false_pos: 1,
                true_neg: 1,
                false_neg: 1
            }
        );
    }

    #[test]
    fn worked_report() {
        let c = ConfusionCounts {
            true_pos: 3,
            false_pos: 1,
            true_neg: 4,
            false_neg: 2,
        };
        let r = metrics_from_confusion(&c);
        assert_eq!(r.accuracy, 0.7);
        assert_eq!(r.precision, 0.75);
        assert_eq!(r.recall, 0.6);
        assert_eq!(r.dsc, 6.0 / 9.0);
        assert_eq!(r.iou, 0.5);
        assert_eq!(c.dsc_union_denominator(), 1.0);
    }

    #[test]
    fn empty_masks_score_one() {
        let m = mask(2, 2, &[0; 4]);
        let c = confusion(&m, &m, 1).unwrap();
        assert_eq!(metrics_from_confusion(&c), MetricsReport::ones());
    }

    #[test]
    fn confusion_shape_mismatch() {
        assert!(confusion(&mask(1, 2, &[0, 0]), &mask(2, 1, &[0, 0]), 1).is_err());
    }

    #[test]
    fn perfect_probs_give_zero_loss() {
        let m = mask(2, 3, &[0, 1, 1, 0, 1, 0]);
        let p = one_hot::<f64>(&m, 2).unwrap();
        assert_eq!(dice_loss(&p, &[&m], 1.0).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn complement_loss_approaches_one() {
        let m = mask(2, 2, &[0, 1, 1, 0]);
        let inv = mask(2, 2, &[1, 0, 0, 1]);
        let p = one_hot::<f64>(&inv, 2).unwrap();
        let l = dice_loss(&p, &[&m], 1e-9).unwrap().item().unwrap();
        assert!((l - 1.0).abs() < 1e-8, "{l}");
    }

    #[test]
    fn rejects_bad_smooth() {
        let m = mask(1, 1, &[0]);
        let p = one_hot::<f64>(&m, 2).unwrap();
        assert!(matches!(dice_loss(&p, &[&m], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn mean_of_reports() {
        let half = MetricsReport {
            dsc: 0.5,
            ..MetricsReport::ones()
        };
        assert_eq!(
            MetricsReport::mean(&[MetricsReport::ones(), half])
                .unwrap()
                .dsc,
            0.75
        );
        assert!(MetricsReport::mean(&[]).is_err());
    }
}
