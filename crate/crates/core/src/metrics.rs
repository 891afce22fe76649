//! Evaluation: per-class pseudo-label accuracy and mean IoU.
//!
//! Both accumulate raw counts so several frames can be pooled before the
//! ratios are taken.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class accuracy of pseudo-labels. `None` marks a class absent from ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClasswiseReport {
    pub per_class: Vec<Option<f64>>,
    /// Mean over present classes; NaN when no class is present.
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClasswiseCounts {
    correct: Vec<u64>,
    total: Vec<u64>,
}

impl ClasswiseCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            correct: vec![0; num_classes],
            total: vec![0; num_classes],
        }
    }

    /// Adds one frame. Ground-truth values outside the class range are skipped.
    pub fn add(&mut self, pseudo: &[u32], gt: &[u32]) -> Result<()> {
        if pseudo.len() != gt.len() {
            return Err(Error::LengthMismatch {
                what: "pseudo-labels vs ground truth",
                expected: gt.len(),
                found: pseudo.len(),
            });
        }
        let n = self.total.len();
        for (&p, &g) in pseudo.iter().zip(gt) {
            let g = g as usize;
            if g < n {
                self.total[g] += 1;
                if p as usize == g {
                    self.correct[g] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn report(&self) -> ClasswiseReport {
        let per_class: Vec<Option<f64>> = self
            .correct
            .iter()
            .zip(&self.total)
            .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let average = if present.is_empty() {
            f64::NAN
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        ClasswiseReport { per_class, average }
    }
}

pub fn classwise_accuracy(pseudo: &[u32], gt: &[u32], num_classes: usize) -> Result<ClasswiseReport> {
    let mut counts = ClasswiseCounts::new(num_classes);
    counts.add(pseudo, gt)?;
    Ok(counts.report())
}

/// Class confusion counts. Rows are ground truth, columns predictions; a
/// prediction outside the class range only counts as a miss for its row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    missed: Vec<u64>,
    ignore: Vec<bool>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, ignore: &[u32]) -> Self {
        let mut mask = vec![false; num_classes];
        for &c in ignore {
            if let Some(m) = mask.get_mut(c as usize) {
                *m = true;
            }
        }
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            missed: vec![0; num_classes],
            ignore: mask,
        }
    }

    /// Adds predictions; points whose ground truth is ignored or out of range are skipped.
    pub fn add(&mut self, pred: &[u32], gt: &[u32]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::LengthMismatch {
                what: "predictions vs ground truth",
                expected: gt.len(),
                found: pred.len(),
            });
        }
        let n = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if g >= n || self.ignore[g] {
                continue;
            }
            if p < n {
                self.counts[g * n + p] += 1;
            } else {
                self.missed[g] += 1;
            }
        }
        Ok(())
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// IoU per class; `None` for ignored classes and classes with an empty union.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let n = self.num_classes;
        (0..n)
            .map(|c| {
                if self.ignore[c] {
                    return None;
                }
                let tp = self.get(c, c);
                let fn_: u64 = (0..n).filter(|&p| p != c).map(|p| self.get(c, p)).sum::<u64>()
                    + self.missed[c];
                let fp: u64 = (0..n).filter(|&g| g != c).map(|g| self.get(g, c)).sum();
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over scored classes; NaN when none has a nonempty union.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if ious.is_empty() {
            f64::NAN
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }
}

pub fn miou(pred: &[u32], gt: &[u32], num_classes: usize, ignore: &[u32]) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(num_classes, ignore);
    cm.add(pred, gt)?;
    Ok(cm.miou())
}

/// Clicked points over total points for a pool of frames.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickTally {
    pub clicks: u64,
    pub points: u64,
}

impl ClickTally {
    pub fn add(&mut self, clicks: usize, points: usize) {
        self.clicks += clicks as u64;
        self.points += points as u64;
    }

    pub fn ratio(&self) -> f64 {
        self.clicks as f64 / self.points as f64
    }

    /// Percentage of labeled points.
    pub fn percent(&self) -> f64 {
        100.0 * self.ratio()
    }
}
