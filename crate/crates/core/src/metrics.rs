//! Classification and segmentation metrics.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Counts indexed `[label][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both predictions and labels.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with nonzero union; `None` when no pixel is valid.
    pub miou: Option<f64>,
    pub no_valid_pixels: bool,
}

impl IouReport {
    /// mIoU with the degenerate case reported as 0.
    pub fn miou_or_zero(&self) -> f64 {
        self.miou.unwrap_or(0.0)
    }
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: alloc::vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, label: usize, pred: usize) -> u64 {
        self.counts[label * self.classes + pred]
    }

    pub fn add(&mut self, label: usize, pred: usize) -> Result<()> {
        if label >= self.classes || pred >= self.classes {
            return Err(Error::Label(format!("pair ({label}, {pred}) outside [0, {})", self.classes)));
        }
        self.counts[label * self.classes + pred] += 1;
        Ok(())
    }

    /// Accumulate paired maps, skipping positions whose label is `ignore`.
    pub fn add_maps(&mut self, preds: &[usize], labels: &[usize], ignore: Option<usize>) -> Result<()> {
        if preds.len() != labels.len() {
            return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
        }
        for (&p, &l) in preds.iter().zip(labels) {
            if Some(l) == ignore {
                continue;
            }
            self.add(l, p)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape("confusion matrices differ in class count".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn diag(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    fn row(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    fn col(&self, c: usize) -> u64 {
        (0..self.classes).map(|l| self.get(l, c)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            return 0.0;
        }
        (0..self.classes).map(|c| self.diag(c)).sum::<u64>() as f64 / t as f64
    }

    pub fn iou(&self) -> IouReport {
        let per_class: Vec<Option<f64>> = (0..self.classes)
            .map(|c| {
                let tp = self.diag(c);
                let union = self.row(c) + self.col(c) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        IouReport { per_class, miou, no_valid_pixels: self.total() == 0 }
    }

    /// Per-class F1; classes with no support and no predictions are skipped
    /// in the macro mean.
    pub fn macro_f1(&self) -> f64 {
        let scores: Vec<f64> = (0..self.classes)
            .filter_map(|c| {
                let tp = self.diag(c) as f64;
                let denom = (self.row(c) + self.col(c)) as f64;
                (denom > 0.0).then(|| 2.0 * tp / denom)
            })
            .collect();
        if scores.is_empty() {
            0.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        }
    }
}

/// Per-class IoU and mIoU of paired class maps.
pub fn compute_miou(preds: &[usize], labels: &[usize], classes: usize, ignore: Option<usize>) -> Result<IouReport> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add_maps(preds, labels, ignore)?;
    Ok(cm.iou())
}

/// Fraction of equal entries.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    Ok(preds.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Scores {
    pub micro: f64,
    pub macro_: f64,
}

/// Multi-label F1 from sigmoid probabilities `(n, labels)` row-major,
/// thresholded at `threshold`.
pub fn multilabel_f1(probs: &[f64], targets: &[u8], labels: usize, threshold: f64) -> Result<F1Scores> {
    if probs.len() != targets.len() || labels == 0 || probs.len() % labels != 0 {
        return Err(Error::Shape(format!("{} scores, {} targets over {labels} labels", probs.len(), targets.len())));
    }
    let mut tp = alloc::vec![0u64; labels];
    let mut fp = alloc::vec![0u64; labels];
    let mut fneg = alloc::vec![0u64; labels];
    for (i, (&p, &t)) in probs.iter().zip(targets).enumerate() {
        let j = i % labels;
        match (p >= threshold, t != 0) {
            (true, true) => tp[j] += 1,
            (true, false) => fp[j] += 1,
            (false, true) => fneg[j] += 1,
            (false, false) => {}
        }
    }
    let f1 = |tp: u64, fp: u64, fneg: u64| {
        let d = 2 * tp + fp + fneg;
        (d > 0).then(|| 2.0 * tp as f64 / d as f64)
    };
    let (st, sf, sn) = (tp.iter().sum(), fp.iter().sum(), fneg.iter().sum());
    let micro = f1(st, sf, sn).unwrap_or(0.0);
    let per: Vec<f64> = (0..labels).filter_map(|j| f1(tp[j], fp[j], fneg[j])).collect();
    let macro_ = if per.is_empty() { 0.0 } else { per.iter().sum::<f64>() / per.len() as f64 };
    Ok(F1Scores { micro, macro_ })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let l = [0, 1, 2, 1, 0];
        let r = compute_miou(&l, &l, 3, None).unwrap();
        assert_eq!(r.miou, Some(1.0));
        assert_eq!(accuracy(&l, &l).unwrap(), 1.0);
        let single = compute_miou(&[0, 0, 0], &[0, 0, 0], 1, None).unwrap();
        assert_eq!(single.per_class, [Some(1.0)]);
    }

    #[test]
    fn confusion_arithmetic() {
        // For class 1: TP 2, FP 1, FN 1, TN 4.
        let labels = [1, 1, 1, 0, 0, 0, 0, 0];
        let preds = [1, 1, 0, 1, 0, 0, 0, 0];
        let r = compute_miou(&preds, &labels, 2, None).unwrap();
        assert_eq!(r.per_class[1], Some(0.5));
    }

    #[test]
    fn four_pixel_example() {
        // Pixel 3 is labelled 2 but predicted 0.
        let r = compute_miou(&[0, 1, 2, 0], &[0, 1, 2, 2], 3, None).unwrap();
        assert_eq!(r.per_class, [Some(0.5), Some(1.0), Some(0.5)]);
        assert_eq!(r.miou, Some(2.0 / 3.0));
    }

    #[test]
    fn degenerate_cases() {
        let r = compute_miou(&[1, 0], &[9, 9], 2, Some(9)).unwrap();
        assert!(r.no_valid_pixels);
        assert_eq!(r.miou, None);
        let r = compute_miou(&[1, 1], &[0, 0], 3, None).unwrap();
        assert_eq!(r.per_class, [Some(0.0), Some(0.0), None]);
        assert!(compute_miou(&[3], &[0], 3, None).is_err());
    }

    #[test]
    fn multilabel_scores() {
        let probs = [0.9, 0.2, 0.7, 0.6];
        let targets = [1, 0, 0, 1];
        let f = multilabel_f1(&probs, &targets, 2, 0.5).unwrap();
        // tp: label0 1, label1 1; fp: label0 1.
        assert!((f.micro - 0.8).abs() < 1e-12);
        assert!((f.macro_ - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
    }
}
