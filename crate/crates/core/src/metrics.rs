use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelGrid, VOID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_classes: usize,
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    /// `confusion[gt][pred]`; the extra last column counts void or out-of-range predictions.
    pub confusion: Vec<Vec<u64>>,
    pub pixels: u64,
}

impl EvalReport {
    pub fn empty(num_classes: usize) -> Self {
        Self {
            num_classes,
            per_class_iou: vec![None; num_classes],
            miou: 0.0,
            confusion: vec![vec![0; num_classes + 1]; num_classes],
            pixels: 0,
        }
    }

    /// Adds one prediction/ground-truth pair to the confusion matrix.
    pub fn accumulate(&mut self, pred: &LabelGrid, gt: &LabelGrid) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
        }
        let l = self.num_classes;
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            if g == VOID {
                continue;
            }
            let g = g as usize;
            if g >= l {
                return Err(Error::Eval(format!("ground truth class {g} outside {l} classes")));
            }
            let p = if (p as usize) < l { p as usize } else { l };
            self.confusion[g][p] += 1;
            self.pixels += 1;
        }
        Ok(())
    }

    /// Recomputes IoU values from the confusion matrix.
    pub fn finish(mut self) -> Result<Self> {
        if self.pixels == 0 {
            return Err(Error::Eval("ground truth is entirely void".into()));
        }
        let l = self.num_classes;
        let mut ious = Vec::with_capacity(l);
        for c in 0..l {
            let tp = self.confusion[c][c];
            let fn_ = self.confusion[c].iter().sum::<u64>() - tp;
            let fp = (0..l).filter(|&g| g != c).map(|g| self.confusion[g][c]).sum::<u64>();
            let denom = tp + fp + fn_;
            ious.push((denom > 0).then(|| tp as f64 / denom as f64));
        }
        let present: Vec<f64> = ious.iter().flatten().copied().collect();
        self.miou = present.iter().sum::<f64>() / present.len() as f64;
        self.per_class_iou = ious;
        Ok(self)
    }
}

/// Per-class IoU and their mean over non-void ground-truth pixels.
pub fn evaluate_miou(pred: &LabelGrid, gt: &LabelGrid, num_classes: usize) -> Result<EvalReport> {
    evaluate_many([(pred, gt)], num_classes)
}

/// Pools the confusion matrix over several tiles before computing IoU.
pub fn evaluate_many<'a>(
    pairs: impl IntoIterator<Item = (&'a LabelGrid, &'a LabelGrid)>,
    num_classes: usize,
) -> Result<EvalReport> {
    if !(1..=255).contains(&num_classes) {
        return Err(Error::Eval(format!("invalid class count {num_classes}")));
    }
    let mut report = EvalReport::empty(num_classes);
    for (p, g) in pairs {
        report.accumulate(p, g)?;
    }
    report.finish()
}
