//! Single-scale inference and mean intersection-over-union.

use std::fmt;

use crate::atm::{semantic_inference, upsample_logits};
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::model::{self, ModelConfig};
use crate::numerics::{Graph, ParamStore, Real, Tensor};

/// Pixel counts with ground truth on rows and prediction on columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
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

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count every pixel whose ground truth is not the ignore label.
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Dimension {
                op: "confusion_matrix",
                lhs: vec![pred.height, pred.width],
                rhs: vec![gt.height, gt.width],
            });
        }
        gt.check_classes(self.classes)?;
        if let Some(&l) = pred.labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(Error::Data(format!("predicted label {l} out of range for {} classes", self.classes)));
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g != IGNORE_LABEL {
                self.counts[g as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::config(format!(
                "cannot merge {}-class and {}-class confusion matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP/(TP+FP+FN)` per class, `None` for classes absent from both
    /// prediction and ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let gt: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
                let pred: u64 = (0..self.classes).map(|g| self.get(g, c)).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn report(&self) -> MiouReport {
        let per_class = self.iou();
        let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if valid.is_empty() {
            0.0
        } else {
            valid.iter().sum::<f64>() / valid.len() as f64
        };
        MiouReport { per_class, mean }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl fmt::Display for MiouReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>6}  {:>8}", "class", "iou")?;
        for (c, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => writeln!(f, "{c:>6}  {v:>8.4}")?,
                None => writeln!(f, "{c:>6}  {:>8}", "-")?,
            }
        }
        write!(f, "miou={:.6}", self.mean)
    }
}

/// Dataset-level mIoU over paired prediction and ground-truth maps.
pub fn miou(preds: &[LabelMap], gts: &[LabelMap], classes: usize) -> Result<MiouReport> {
    if preds.len() != gts.len() {
        return Err(Error::Data(format!("{} predictions for {} ground-truth maps", preds.len(), gts.len())));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (p, g) in preds.iter().zip(gts) {
        cm.add(p, g)?;
    }
    Ok(cm.report())
}

/// Final-stage class logits `[N, K+1]` and accumulated mask logits resized to
/// the image, `[N, H, W]`.
pub fn predict<F: Real>(params: &ParamStore<F>, cfg: &ModelConfig, image: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
    let graph = Graph::new();
    let p = params.bind(&graph);
    let stages = model::forward(&p, cfg, image)?;
    let last = stages.last().expect("at least one stage");
    let (h, w) = cfg.image_size();
    let masks = upsample_logits(&last.cumulative, (h, w))?.value().reshape(&[cfg.num_classes, h, w])?;
    Ok(((*last.logits.logits.value()).clone(), masks))
}

pub fn infer<F: Real>(params: &ParamStore<F>, cfg: &ModelConfig, image: &Tensor<F>) -> Result<LabelMap> {
    let (logits, mask_logits) = predict(params, cfg, image)?;
    semantic_inference(&logits, &mask_logits.sigmoid())
}
