use std::ops::AddAssign;

use crate::error::{Error, Result};

/// Per-class pixel confusion counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub tn: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
            tn: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    /// Pixels counted so far; identical for every class.
    pub fn total(&self) -> u64 {
        self.tp
            .first()
            .map_or(0, |_| self.tp[0] + self.fp[0] + self.fn_[0] + self.tn[0])
    }

    /// Adds one prediction/truth pair of equal extents.
    pub fn update(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape("update_confusion", &[pred.len()], &[truth.len()]));
        }
        let k = self.classes();
        if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c >= k) {
            return Err(Error::invalid(
                "update_confusion",
                format!("class {bad} out of range for {k} classes"),
            ));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if p == t {
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[t] += 1;
            }
            for c in (0..k).filter(|&c| c != p && c != t) {
                self.tn[c] += 1;
            }
        }
        Ok(())
    }
}

impl AddAssign<&ConfusionCounts> for ConfusionCounts {
    fn add_assign(&mut self, rhs: &ConfusionCounts) {
        for (a, b) in [
            (&mut self.tp, &rhs.tp),
            (&mut self.fp, &rhs.fp),
            (&mut self.fn_, &rhs.fn_),
            (&mut self.tn, &rhs.tn),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Functional form of [`ConfusionCounts::update`].
pub fn update_confusion(pred: &[usize], truth: &[usize], mut acc: ConfusionCounts) -> Result<ConfusionCounts> {
    acc.update(pred, truth)?;
    Ok(acc)
}

/// IoU, F-score and per-class recall. `None` marks an undefined ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub iou: Option<f64>,
    pub fsc: Option<f64>,
    pub acc: Option<f64>,
}

pub fn metrics(counts: &ConfusionCounts, class: usize) -> Result<ClassMetrics> {
    if class >= counts.classes() {
        return Err(Error::invalid(
            "metrics",
            format!("class {class} out of range for {} classes", counts.classes()),
        ));
    }
    let (tp, fp, fn_) = (
        counts.tp[class] as f64,
        counts.fp[class] as f64,
        counts.fn_[class] as f64,
    );
    let ratio = |num: f64, den: f64| (den > 0.0).then(|| num / den);
    Ok(ClassMetrics {
        iou: ratio(tp, tp + fp + fn_),
        fsc: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
        acc: ratio(tp, tp + fn_),
    })
}

/// F-score implied by an IoU value.
pub fn fsc_from_iou(iou: f64) -> f64 {
    2.0 * iou / (1.0 + iou)
}
