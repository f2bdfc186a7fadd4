//! Segmentation metrics.
//!
//! Classes absent from both prediction and ground truth get no IOU and do
//! not enter the mean. Pixel accuracy counts background pixels too.

use serde::{Deserialize, Serialize};

use crate::proposal::LabelMap;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `None` for classes that appear in neither map.
    pub per_class: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
    /// `confusion[pred][gt]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
}

pub fn iou(pred: &LabelMap, gt: &LabelMap, num_labels: usize) -> Result<EvalResult> {
    if !pred.same_size(gt) {
        return Err(Error::ShapeMismatch(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    pred.check_range(num_labels)?;
    gt.check_range(num_labels)?;
    let mut confusion = vec![vec![0u64; num_labels]; num_labels];
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        confusion[p as usize][g as usize] += 1;
    }
    Ok(from_confusion(confusion))
}

/// Metrics from an accumulated `confusion[pred][gt]` matrix, e.g. summed
/// over a whole image set.
pub fn from_confusion(confusion: Vec<Vec<u64>>) -> EvalResult {
    let n = confusion.len();
    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..n).map(|k| confusion[k][k]).sum();
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|k| {
            let pred: u64 = confusion[k].iter().sum();
            let gt: u64 = confusion.iter().map(|row| row[k]).sum();
            let union = pred + gt - confusion[k][k];
            (union > 0).then(|| confusion[k][k] as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean_iou = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    EvalResult {
        per_class,
        mean_iou,
        pixel_accuracy: if total == 0 {
            1.0
        } else {
            trace as f64 / total as f64
        },
        confusion,
    }
}

/// Adds `other` into `acc`; both must have the same size.
pub fn accumulate(acc: &mut [Vec<u64>], other: &[Vec<u64>]) -> Result<()> {
    if acc.len() != other.len() {
        return Err(Error::ShapeMismatch(format!(
            "confusion matrices of {} and {} labels",
            acc.len(),
            other.len()
        )));
    }
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
    Ok(())
}

/// Binary IOU of non-background against background labels.
pub fn foreground_iou(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    if !pred.same_size(gt) {
        return Err(Error::ShapeMismatch(
            "prediction and ground truth differ in size".into(),
        ));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        inter += u64::from(p != 0 && g != 0);
        union += u64::from(p != 0 || g != 0);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}
