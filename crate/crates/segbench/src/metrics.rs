//! Segmentation and attack-quality metrics: confusion matrix, IoU/mIoU,
//! ASR, PSNR and PosiRatio.
//!
//! mIoU is reported in percent; per-class IoU values are fractions in [0,1].
//! Dataset-level mIoU accumulates one global confusion matrix over all
//! images (not a per-image average).

use crate::core::{ImageTensor, LabelMap};
use crate::error::{Error, Result};
use crate::Real;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// C×C count matrix: entry `(i, j)` counts pixels with ground truth `i`
/// predicted as `j`. Matrices for disjoint image sets merge by addition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
    num_classes: usize,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: Array2::zeros((num_classes, num_classes)),
            num_classes,
        }
    }

    /// Tallies one prediction/ground-truth pair; `ignore_index` pixels of the
    /// ground truth are excluded.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::ShapeMismatch(format!(
                "pred {}x{} vs gt {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        for (&p, &g) in pred.data().iter().zip(gt.data().iter()) {
            if g == gt.ignore_index() || p == pred.ignore_index() {
                continue;
            }
            self.counts[[g as usize, p as usize]] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// Builds the confusion matrix of one pair.
pub fn confusion_matrix(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

/// Mean IoU in percent plus per-class IoU fractions.
///
/// `IoU_c = cm[c,c] / (row_c + col_c − cm[c,c])`; classes with zero union
/// are excluded from the mean and reported as `None`.
pub fn miou(cm: &ConfusionMatrix) -> Result<(f64, Vec<Option<f64>>)> {
    let c = cm.num_classes();
    let counts = cm.counts();
    let mut per_class = Vec::with_capacity(c);
    let mut sum = 0.0;
    let mut n = 0usize;
    for k in 0..c {
        let row: u64 = (0..c).map(|j| counts[[k, j]]).sum();
        let col: u64 = (0..c).map(|i| counts[[i, k]]).sum();
        let inter = counts[[k, k]];
        let union = row + col - inter;
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = inter as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::AllClassesEmpty(
            "no class has a nonzero union".into(),
        ));
    }
    Ok((100.0 * sum / n as f64, per_class))
}

/// Attack success rate: benign mIoU minus adversarial mIoU, both in percent.
/// May be negative when the attack helps the model.
pub fn asr(benign_miou: f64, adversarial_miou: f64) -> f64 {
    benign_miou - adversarial_miou
}

/// Peak signal-to-noise ratio in dB; identical images yield `+∞`.
pub fn psnr<F: Real>(x: &ImageTensor<F>, x_adv: &ImageTensor<F>, max_val: f64) -> Result<f64> {
    if x.data().shape() != x_adv.data().shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            x.data().shape(),
            x_adv.data().shape()
        )));
    }
    let n = x.data().len() as f64;
    let mse: f64 = x
        .data()
        .iter()
        .zip(x_adv.data().iter())
        .map(|(&a, &b)| {
            let d = a.to_f64() - b.to_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (max_val / mse.sqrt()).log10())
}

/// Fraction of non-ignored pixels where prediction equals ground truth
/// (`PosiRatio = 1 − MisRatio`). Returns 1.0 when every pixel is ignored.
pub fn posi_ratio(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::ShapeMismatch(format!(
            "pred {}x{} vs gt {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut correct = 0u64;
    let mut total = 0u64;
    for (&p, &g) in pred.data().iter().zip(gt.data().iter()) {
        if g == gt.ignore_index() {
            continue;
        }
        total += 1;
        if p == g {
            correct += 1;
        }
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(correct as f64 / total as f64)
}

/// Argmax over the class axis with ties broken toward the lowest class index.
pub fn predict_labels<F: Real>(logits: &Array3<F>, num_classes: usize) -> LabelMap {
    let (c, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    debug_assert_eq!(c, num_classes);
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = logits[[0, y, x]];
            for k in 1..c {
                let v = logits[[k, y, x]];
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            out[[y, x]] = best as u8;
        }
    }
    LabelMap::new(out, num_classes).expect("argmax labels are always in range")
}

/// Metrics for one model/dataset/attack combination.
///
/// `psnr_db` is `None` when the adversarial set equals the benign set
/// exactly (infinite PSNR).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub benign_miou: f64,
    pub adversarial_miou: f64,
    pub asr: f64,
    pub psnr_db: Option<f64>,
    pub posi_ratio: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

impl MetricReport {
    /// Computes `asr` from the two mIoU values so the identity
    /// `asr = benign − adversarial` holds exactly.
    pub fn new(
        benign_miou: f64,
        adversarial_miou: f64,
        psnr_db: Option<f64>,
        posi_ratio: f64,
        per_class_iou: Vec<Option<f64>>,
    ) -> Self {
        Self {
            benign_miou,
            adversarial_miou,
            asr: asr(benign_miou, adversarial_miou),
            psnr_db,
            posi_ratio,
            per_class_iou,
        }
    }
}
