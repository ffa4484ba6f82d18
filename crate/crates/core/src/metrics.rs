//! Pixel confusion matrix and the segmentation scores derived from it.
//!
//! Classes that never occur in the ground truth are left out of the mean accuracy (their
//! recall is undefined). Classes absent from both the ground truth and the predictions are left
//! out of the mean IoU; a class that is predicted but absent from the ground truth scores IoU 0.
//! On sparse toy data this changes the means noticeably compared with dividing by `p_c`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LabelMap;

/// `counts[i * p_c + j]` = pixels with ground truth `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub macc: f64,
    pub miou: f64,
    /// `None` for classes excluded from the mean.
    pub per_class_iou: Vec<Option<f64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image; pixels whose ground truth is `ignore_label` are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, ignore_label: u8) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Data(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let n = self.classes;
        // Validate first so a bad image leaves the matrix untouched.
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g != ignore_label && (g as usize >= n || p as usize >= n) {
                return Err(Error::Data(format!(
                    "class id out of range for {n} classes (gt {g}, pred {p})"
                )));
            }
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g != ignore_label {
                self.counts[g as usize * n + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Element-wise sum; exact and order-independent.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Metric(format!(
                "cannot merge {} and {} class matrices",
                self.classes, other.classes
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Acc, mAcc, mIoU and per-class IoU; classes are averaged in ascending id order.
    pub fn compute(&self) -> Result<Metrics> {
        let n = self.classes;
        let total = self.total();
        if total == 0 {
            return Err(Error::Metric("confusion matrix is empty".into()));
        }
        let diag: Vec<u64> = (0..n).map(|i| self.get(i, i)).collect();
        let gt: Vec<u64> = (0..n).map(|i| (0..n).map(|j| self.get(i, j)).sum()).collect();
        let pred: Vec<u64> = (0..n).map(|j| (0..n).map(|i| self.get(i, j)).sum()).collect();
        let acc = diag.iter().sum::<u64>() as f64 / total as f64;
        let (mut acc_sum, mut acc_n) = (0.0, 0usize);
        let (mut iou_sum, mut iou_n) = (0.0, 0usize);
        let mut per_class_iou = Vec::with_capacity(n);
        for i in 0..n {
            if gt[i] > 0 {
                acc_sum += diag[i] as f64 / gt[i] as f64;
                acc_n += 1;
            }
            if gt[i] == 0 && pred[i] == 0 {
                per_class_iou.push(None);
                continue;
            }
            let iou = diag[i] as f64 / (gt[i] + pred[i] - diag[i]) as f64;
            iou_sum += iou;
            iou_n += 1;
            per_class_iou.push(Some(iou));
        }
        Ok(Metrics {
            acc,
            macc: acc_sum / acc_n as f64,
            miou: iou_sum / iou_n as f64,
            per_class_iou,
        })
    }
}

impl Metrics {
    /// `{"acc": .., "macc": .., "miou": .., "per_class": [..]}` with six decimals; excluded
    /// classes are `null`.
    pub fn to_json(&self) -> String {
        let mut s = format!(
            "{{\"acc\": {:.6}, \"macc\": {:.6}, \"miou\": {:.6}, \"per_class\": [",
            self.acc, self.macc, self.miou
        );
        for (i, v) in self.per_class_iou.iter().enumerate() {
            if i > 0 {
                s.push_str(", ");
            }
            match v {
                Some(v) => write!(s, "{v:.6}").unwrap(),
                None => s.push_str("null"),
            }
        }
        s.push_str("]}");
        s
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}
