use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::segnet::IGNORE_INDEX;

/// Pixel confusion matrix (rows are ground truth) and the scores derived
/// from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Vec<Vec<u64>>,
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_acc: f64,
}

impl EvalReport {
    pub fn new(classes: usize) -> Self {
        Self {
            confusion: vec![vec![0; classes]; classes],
            per_class_iou: vec![None; classes],
            miou: 0.0,
            pixel_acc: 0.0,
        }
    }

    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let mut r = Self::new(confusion.len());
        r.confusion = confusion;
        r.refresh();
        r
    }

    pub fn classes(&self) -> usize {
        self.confusion.len()
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    /// Adds one pixel per `(pred, label)` pair. Pixels labelled with the
    /// ignore index are skipped.
    pub fn accumulate(&mut self, pred: &[u8], label: &[u8]) -> Result<()> {
        if pred.len() != label.len() {
            return Err(shape_err(format!(
                "{} predictions for {} labels",
                pred.len(),
                label.len()
            )));
        }
        let k = self.classes();
        let out_of_range = |v: u8| Error::LabelOutOfRange {
            label: v as i64,
            classes: k,
        };
        for (&p, &l) in pred.iter().zip(label) {
            if l == IGNORE_INDEX {
                continue;
            }
            if l as usize >= k {
                return Err(out_of_range(l));
            }
            if p as usize >= k {
                return Err(out_of_range(p));
            }
        }
        for (&p, &l) in pred.iter().zip(label) {
            if l != IGNORE_INDEX {
                self.confusion[l as usize][p as usize] += 1;
            }
        }
        self.refresh();
        Ok(())
    }

    pub fn merge(&mut self, other: &EvalReport) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(shape_err("merging reports with different class counts"));
        }
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.refresh();
        Ok(())
    }

    fn refresh(&mut self) {
        let k = self.classes();
        let m = &self.confusion;
        self.per_class_iou = (0..k)
            .map(|c| {
                let tp = m[c][c];
                let fn_ = m[c].iter().sum::<u64>() - tp;
                let fp = (0..k).map(|r| m[r][c]).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = self.per_class_iou.iter().flatten().copied().collect();
        self.miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let total = self.total();
        let correct: u64 = (0..k).map(|c| m[c][c]).sum();
        self.pixel_acc = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_two_class() {
        let r = EvalReport::from_confusion(vec![vec![3, 1], vec![2, 2]]);
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(0.4)]);
        assert!((r.miou - 0.45).abs() < 1e-15);
        assert_eq!(r.pixel_acc, 5.0 / 8.0);
    }

    #[test]
    fn perfect_prediction() {
        let mut r = EvalReport::new(3);
        let l = [0, 1, 2, 2, 1];
        r.accumulate(&l, &l).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.total(), 5);
    }

    #[test]
    fn absent_class_excluded() {
        let mut r = EvalReport::new(3);
        r.accumulate(&[0, 1, 1], &[0, 1, 0]).unwrap();
        assert_eq!(r.per_class_iou[2], None);
        assert!((r.miou - (0.5 + 0.5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_rejected() {
        let mut r = EvalReport::new(2);
        assert!(matches!(
            r.accumulate(&[0], &[2]),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
        assert_eq!(r.total(), 0);
    }
}
