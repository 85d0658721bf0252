//! Intersection-over-union scoring of label maps.

use crate::error::{CrfError, Result};

/// Pixel counts `counts[gt][pred]` over non-ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_labels: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_labels: usize) -> Self {
        Self {
            n_labels,
            counts: vec![0; n_labels * n_labels],
        }
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n_labels + pred]
    }

    /// Adds one prediction/ground-truth pair. Ground-truth pixels equal to
    /// `ignore_label` are skipped.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8], ignore_label: u8) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(CrfError::shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let l = self.n_labels;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore_label {
                continue;
            }
            let (p, g) = (usize::from(p), usize::from(g));
            if p >= l || g >= l {
                return Err(CrfError::invalid(format!(
                    "label {} out of range for {l} labels",
                    p.max(g)
                )));
            }
            self.counts[g * l + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_labels != self.n_labels {
            return Err(CrfError::shape("confusion matrices differ in label count"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IU, `None` for classes absent from both prediction and
    /// ground truth.
    pub fn class_iu(&self) -> Vec<Option<f64>> {
        let l = self.n_labels;
        (0..l)
            .map(|c| {
                let tp = self.count(c, c);
                let fn_: u64 = (0..l).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
                let fp: u64 = (0..l).filter(|&g| g != c).map(|g| self.count(g, c)).sum();
                let union = tp + fn_ + fp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean of [`ConfusionMatrix::class_iu`] over the classes that occur;
    /// 0 when no pixel was counted.
    pub fn mean_iu(&self) -> f64 {
        let present: Vec<f64> = self.class_iu().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        let correct: u64 = (0..self.n_labels).map(|c| self.count(c, c)).sum();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }
}

/// Per-class IU and their mean for a single prediction.
pub fn mean_iu(
    pred: &[u8],
    gt: &[u8],
    n_labels: usize,
    ignore_label: u8,
) -> Result<(Vec<Option<f64>>, f64)> {
    let mut cm = ConfusionMatrix::new(n_labels);
    cm.accumulate(pred, gt, ignore_label)?;
    Ok((cm.class_iu(), cm.mean_iu()))
}
