//! Segmentation accuracy (mIoU) and temporal consistency (TC).

use crate::error::{shape_err, Error, Result};
use crate::flow::{warp_labels_flow, FlowField};
use crate::tensor::{LabelMap, Tensor, IGNORE_LABEL};

/// Class confusion counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    ignore_index: u8,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore_index: u8) -> Self {
        Self { classes, ignore_index, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one label-map pair. Pixels count only where `valid` (if given) is 1
    /// and the ground truth is not the ignore index.
    pub fn accumulate(&mut self, truth: &LabelMap, pred: &LabelMap, valid: Option<&Tensor<f32>>) -> Result<()> {
        if truth.dims() != pred.dims() {
            return shape_err(format!("truth {:?} vs prediction {:?}", truth.dims(), pred.dims()));
        }
        if let Some(v) = valid {
            if v.channels() != 1 || (v.height(), v.width()) != truth.dims() {
                return shape_err("validity mask does not match label maps");
            }
        }
        for (i, (&t, &p)) in truth.data().iter().zip(pred.data()).enumerate() {
            if t == self.ignore_index || valid.is_some_and(|v| v.data()[i] != 1.0) {
                continue;
            }
            if t as usize >= self.classes || p as usize >= self.classes {
                return Err(Error::InvalidArgument(format!("label pair ({}, {}) out of range for {} classes", t, p, self.classes)));
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Adds another matrix's counts.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return shape_err("confusion matrices of different class counts");
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both truth and prediction.
    pub fn ious(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.classes).map(|k| self.get(c, k)).sum();
                let col: u64 = (0..self.classes).map(|k| self.get(k, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

/// Mean IoU over classes present in the truth or the prediction.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    let ious: Vec<f64> = cm.ious().into_iter().flatten().collect();
    if ious.is_empty() {
        return Err(Error::InvalidArgument("confusion matrix is empty".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

fn class_count(maps: &[&LabelMap]) -> usize {
    maps.iter()
        .flat_map(|m| m.data().iter())
        .filter(|&&l| l != IGNORE_LABEL)
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(1)
}

/// TC of one frame pair: the previous prediction is warped onto the current
/// frame by nearest-neighbour flow sampling, pixels whose source leaves the
/// frame are dropped, and the mIoU against the current prediction is returned.
pub fn tc_pair(pred_prev: &LabelMap, pred_curr: &LabelMap, flow_prev_to_curr: &FlowField) -> Result<f64> {
    if pred_prev.dims() != pred_curr.dims() || pred_curr.dims() != (flow_prev_to_curr.height(), flow_prev_to_curr.width()) {
        return shape_err("TC inputs differ in size");
    }
    let warped = warp_labels_flow(pred_prev, flow_prev_to_curr, IGNORE_LABEL)?;
    let mut cm = ConfusionMatrix::new(class_count(&[pred_prev, pred_curr]), IGNORE_LABEL);
    cm.accumulate(&warped, pred_curr, None)?;
    miou(&cm)
}

/// Mean of [`tc_pair`] over consecutive frames.
pub fn tc_video(preds: &[LabelMap], flows: &[FlowField]) -> Result<f64> {
    if preds.len() < 2 {
        return Err(Error::InvalidArgument("TC needs at least two frames".into()));
    }
    if flows.len() != preds.len() - 1 {
        return shape_err(format!("{} frames need {} flows, got {}", preds.len(), preds.len() - 1, flows.len()));
    }
    let mut sum = 0.0;
    for (k, flow) in flows.iter().enumerate() {
        sum += tc_pair(&preds[k], &preds[k + 1], flow)?;
    }
    Ok(sum / flows.len() as f64)
}
