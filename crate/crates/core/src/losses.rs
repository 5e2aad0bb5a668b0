//! Training objective: per stage, a class-token classification loss plus a
//! focal + dice loss on the accumulated mask logits, summed over stages.

use crate::atm::{upsample_logits, StageOutput};
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::numerics::{Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub focal: f64,
    pub dice: f64,
    /// Weight of classification terms whose target is "no object".
    pub no_object: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            focal: 20.0,
            dice: 1.0,
            no_object: 0.1,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.focal, self.dice, self.no_object, self.focal_gamma];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::config(format!("focal alpha {} outside [0, 1]", self.focal_alpha)));
        }
        Ok(())
    }
}

pub const DICE_EPS: f64 = 1.0;

/// Ground truth for one image: binary per-class masks plus a validity mask
/// that drops ignored pixels.
#[derive(Clone, Debug)]
pub struct SegTarget<F> {
    pub label_map: LabelMap,
    pub classes: usize,
    /// `[K, H·W]`, 1 where the pixel belongs to the class.
    pub masks: Tensor<F>,
    /// `[H·W]`, 0 on ignored pixels.
    pub valid: Tensor<F>,
    pub present: Vec<bool>,
}

impl<F: Real> SegTarget<F> {
    pub fn new(label_map: LabelMap, classes: usize) -> Result<Self> {
        label_map.check_classes(classes)?;
        let hw = label_map.len();
        let mut masks = Tensor::zeros(&[classes, hw]);
        let mut valid = Tensor::zeros(&[hw]);
        for (px, &l) in label_map.labels.iter().enumerate() {
            if l != IGNORE_LABEL {
                masks.data_mut()[l as usize * hw + px] = F::one();
                valid.data_mut()[px] = F::one();
            }
        }
        let present = label_map.present(classes);
        Ok(SegTarget {
            label_map,
            classes,
            masks,
            valid,
            present,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.label_map.height, self.label_map.width)
    }

    pub fn valid_pixels(&self) -> usize {
        self.label_map.labels.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }

    fn check_logits(&self, op: &'static str, x: &Var<'_, F>) -> Result<()> {
        let shape = x.shape();
        if shape != [self.classes, self.label_map.len()] {
            return Err(Error::Dimension {
                op,
                lhs: shape,
                rhs: vec![self.classes, self.label_map.len()],
            });
        }
        Ok(())
    }
}

/// Mean over classes and valid pixels of `-α_t (1-p_t)^γ ln p_t`, with `p_t`
/// the sigmoid probability of the correct binary label. `mask_logits` is
/// `[K, H·W]` at label resolution.
pub fn focal_loss<'g, F: Real>(
    mask_logits: Var<'g, F>,
    target: &SegTarget<F>,
    gamma: f64,
    alpha: f64,
) -> Result<Var<'g, F>> {
    target.check_logits("focal_loss", &mask_logits)?;
    let hw = target.label_map.len();
    let sign = target.masks.map(|t| if t > F::zero() { F::one() } else { -F::one() });
    let weight = Tensor::new(
        target.masks.shape(),
        target
            .masks
            .data()
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let a = if t > F::zero() { alpha } else { 1.0 - alpha };
                F::lit(a) * target.valid.data()[i % hw]
            })
            .collect(),
    )?;
    let count = (target.classes * target.valid_pixels()).max(1);
    // z = logit signed towards the true label, so p_t = σ(z)
    let z = mask_logits.mul_const(sign)?;
    let log_pt = z.log_sigmoid()?;
    let modulation = z.scale(-F::one())?.log_sigmoid()?.scale(F::lit(gamma))?.exp()?;
    modulation
        .mul(log_pt)?
        .mul_const(weight)?
        .sum()?
        .scale(F::lit(-1.0 / count as f64))
}

/// Mean over classes of `1 - (2Σpt + ε)/(Σp + Σt + ε)`, ignored pixels
/// dropped. `mask_probs` is `[K, H·W]`.
pub fn dice_loss<'g, F: Real>(mask_probs: Var<'g, F>, target: &SegTarget<F>, eps: f64) -> Result<Var<'g, F>> {
    target.check_logits("dice_loss", &mask_probs)?;
    let graph = mask_probs.graph();
    let p = mask_probs.mul(graph.constant(target.valid.clone()))?;
    let inter = p.mul_const(target.masks.clone())?.sum_axis(1)?;
    let t_sum = crate::numerics::tensor::sum_axis(&target.masks, 1)?.map(|v| v + F::lit(eps));
    let denom = p.sum_axis(1)?.add(graph.constant(t_sum))?;
    let ratio = inter.scale(F::lit(2.0))?.add_scalar(F::lit(eps))?.div(denom)?;
    ratio.scale(-F::one())?.add_scalar(F::one())?.mean()
}

/// Cross-entropy per class token: token `c` should predict class `c` if the
/// class occurs in the image, otherwise "no object" (weighted by
/// `no_object`). Averaged over tokens.
pub fn cls_loss<'g, F: Real>(logits: Var<'g, F>, target: &SegTarget<F>, no_object: f64) -> Result<Var<'g, F>> {
    let k = target.classes;
    let shape = logits.shape();
    if shape != [k, k + 1] {
        return Err(Error::Dimension {
            op: "cls_loss",
            lhs: shape,
            rhs: vec![k, k + 1],
        });
    }
    let mut picks = Tensor::zeros(&[k, k + 1]);
    for c in 0..k {
        let (slot, w) = if target.present[c] { (c, 1.0) } else { (k, no_object) };
        picks.data_mut()[c * (k + 1) + slot] = F::lit(w);
    }
    logits
        .log_softmax(1)?
        .mul_const(picks)?
        .sum()?
        .scale(F::lit(-1.0 / k as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageLoss {
    pub cls: f64,
    pub focal: f64,
    pub dice: f64,
}

pub struct LossBreakdown<'g, F: Real> {
    pub total: Var<'g, F>,
    pub stages: Vec<StageLoss>,
}

impl<F: Real> LossBreakdown<'_, F> {
    pub fn value(&self) -> f64 {
        self.total.value().item().to_f64().unwrap_or(f64::NAN)
    }
}

fn named<T>(r: Result<T>, term: &str) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { what } => Error::NonFinite {
            what: format!("{term} loss ({what})"),
        },
        other => other,
    })
}

fn finite<'g, F: Real>(v: Var<'g, F>, term: &str) -> Result<(Var<'g, F>, f64)> {
    let x = v.value().item().to_f64().unwrap_or(f64::NAN);
    if !x.is_finite() {
        return Err(Error::NonFinite {
            what: format!("{term} loss"),
        });
    }
    Ok((v, x))
}

/// Σ over stages of `cls + λ_focal·focal + λ_dice·dice`, where each stage's
/// mask terms use its accumulated mask logits resized to label resolution.
pub fn total_loss<'g, F: Real>(
    stages: &[StageOutput<'g, F>],
    target: &SegTarget<F>,
    w: &LossWeights,
) -> Result<LossBreakdown<'g, F>> {
    let first = stages
        .first()
        .ok_or_else(|| Error::config("total_loss needs at least one stage"))?;
    let graph = first.logits.logits.graph();
    let mut total = graph.constant(Tensor::scalar(F::zero()));
    let mut parts = Vec::with_capacity(stages.len());
    for (k, stage) in stages.iter().enumerate() {
        let tag = |t: &str| format!("stage {} {t}", k + 1);
        let (cls, cls_v) = finite(named(cls_loss(stage.logits.logits, target, w.no_object), &tag("cls"))?, &tag("cls"))?;
        let logits = upsample_logits(&stage.cumulative, target.size())?;
        let (focal, focal_v) = finite(
            named(focal_loss(logits, target, w.focal_gamma, w.focal_alpha), &tag("focal"))?,
            &tag("focal"),
        )?;
        let (dice, dice_v) = finite(named(dice_loss(logits.sigmoid()?, target, DICE_EPS), &tag("dice"))?, &tag("dice"))?;
        let stage_total = cls
            .add(focal.scale(F::lit(w.focal))?)?
            .add(dice.scale(F::lit(w.dice))?)?;
        total = total.add(stage_total)?;
        parts.push(StageLoss {
            cls: cls_v,
            focal: focal_v,
            dice: dice_v,
        });
    }
    Ok(LossBreakdown { total, stages: parts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Init};

    fn target(labels: &[u8], h: usize, w: usize, k: usize) -> SegTarget<f64> {
        SegTarget::new(LabelMap::new(h, w, labels.to_vec()).unwrap(), k).unwrap()
    }

    fn value(v: Var<'_, f64>) -> f64 {
        v.value().item()
    }

    #[test]
    fn target_masks_partition_valid_pixels() {
        let t = target(&[0, 1, 255, 2, 1, 0], 2, 3, 3);
        for px in 0..6 {
            let covered: f64 = (0..3).map(|c| t.masks.at(&[c, px])).sum();
            assert_eq!(covered, t.valid.at(&[px]));
        }
        assert_eq!(t.present, vec![true, true, true]);
        assert!(SegTarget::<f64>::new(LabelMap::new(1, 2, vec![0, 3]).unwrap(), 3).is_err());
    }

    #[test]
    fn focal_single_pixel_closed_form() {
        let t = target(&[0], 1, 1, 1);
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1]));
        let loss = value(focal_loss(x, &t, 2.0, 0.25).unwrap());
        let expect = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((loss - expect).abs() < 1e-9, "{loss}");
        assert!((loss - 0.043321).abs() < 1e-6);
    }

    #[test]
    fn focal_perfect_prediction_vanishes() {
        let t = target(&[0, 1, 1, 0], 2, 2, 2);
        let logits = t.masks.map(|m| if m > 0.0 { 60.0 } else { -60.0 });
        let g = Graph::new();
        assert!(value(focal_loss(g.constant(logits), &t, 2.0, 0.25).unwrap()) < 1e-40);
    }

    #[test]
    fn focal_without_focusing_is_weighted_bce() {
        let t = target(&[0, 1, 2, 1, 0, 2], 2, 3, 3);
        let logits: Tensor<f64> = Init::new(1).normal(&[3, 6], 2.0);
        let g = Graph::new();
        let loss = value(focal_loss(g.constant(logits.clone()), &t, 0.0, 0.5).unwrap());
        let mut bce = 0.0;
        for (x, y) in logits.data().iter().zip(t.masks.data()) {
            let p = 1.0 / (1.0 + (-x).exp());
            bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        assert!((loss - 0.5 * bce / 18.0).abs() < 1e-12);
    }

    #[test]
    fn focal_ignores_sentinel_pixels() {
        let logits: Tensor<f64> = Init::new(2).normal(&[2, 4], 1.0);
        let with_ignore = target(&[0, 1, 255, 255], 2, 2, 2);
        let subset = target(&[0, 1], 1, 2, 2);
        let sub_logits = Tensor::new(&[2, 2], vec![logits.at(&[0, 0]), logits.at(&[0, 1]), logits.at(&[1, 0]), logits.at(&[1, 1])]).unwrap();
        let g = Graph::new();
        let a = value(focal_loss(g.constant(logits), &with_ignore, 2.0, 0.25).unwrap());
        let b = value(focal_loss(g.constant(sub_logits), &subset, 2.0, 0.25).unwrap());
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let t = target(&[0, 0, 1, 1], 2, 2, 2);
        let g = Graph::new();
        assert!(value(dice_loss(g.constant(t.masks.clone()), &t, 1.0).unwrap()).abs() < 1e-15);

        let n = 400;
        let labels: Vec<u8> = (0..n).map(|i| (i >= n / 2) as u8).collect();
        let t = target(&labels, 20, 20, 2);
        let flipped = t.masks.map(|m| 1.0 - m);
        let loss = value(dice_loss(g.constant(flipped), &t, 1.0).unwrap());
        assert!(loss > 0.995 && loss < 1.0, "{loss}");
    }

    #[test]
    fn dice_half_probability_formula() {
        let labels = [0u8, 0, 0, 1, 1, 1];
        let t = target(&labels, 2, 3, 2);
        let g = Graph::new();
        let loss = value(dice_loss(g.constant(Tensor::full(&[2, 6], 0.5)), &t, 1.0).unwrap());
        // each class: Σpt = 1.5, Σp = 3, Σt = 3
        let per_class = 1.0 - (2.0 * 1.5 + 1.0) / (3.0 + 3.0 + 1.0);
        assert!((loss - per_class).abs() < 1e-15);
    }

    #[test]
    fn cls_confident_and_uniform() {
        let t = target(&[0, 0, 2, 2], 2, 2, 3);
        assert_eq!(t.present, vec![true, false, true]);
        let mut confident = Tensor::<f64>::full(&[3, 4], -40.0);
        confident.data_mut()[0] = 40.0;
        confident.data_mut()[4 + 3] = 40.0;
        confident.data_mut()[8 + 2] = 40.0;
        let g = Graph::new();
        assert!(value(cls_loss(g.constant(confident), &t, 0.1).unwrap()) < 1e-30);

        let uniform = value(cls_loss(g.constant(Tensor::zeros(&[3, 4])), &t, 0.1).unwrap());
        let expect = (2.0 + 0.1) * 4f64.ln() / 3.0;
        assert!((uniform - expect).abs() < 1e-15);
    }

    #[test]
    fn cls_with_every_class_present_has_no_empty_targets() {
        let t = target(&[0, 1, 2, 2], 2, 2, 3);
        assert!(t.present.iter().all(|&p| p));
        let g = Graph::new();
        // no-object weight is irrelevant when every class is present
        let a = value(cls_loss(g.constant(Tensor::zeros(&[3, 4])), &t, 0.1).unwrap());
        let b = value(cls_loss(g.constant(Tensor::zeros(&[3, 4])), &t, 7.0).unwrap());
        assert_eq!(a, b);
        assert!((a - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn pixel_permutation_invariance() {
        let labels = [0u8, 1, 2, 1, 0, 2, 255, 1];
        let t = target(&labels, 2, 4, 3);
        let logits: Tensor<f64> = Init::new(3).normal(&[3, 8], 1.5);
        let perm = [5usize, 2, 7, 0, 3, 6, 1, 4];
        let p_labels: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();
        let pt = target(&p_labels, 2, 4, 3);
        let p_logits = Tensor::new(
            &[3, 8],
            (0..3).flat_map(|c| perm.iter().map(move |&i| (c, i))).map(|(c, i)| logits.at(&[c, i])).collect(),
        )
        .unwrap();
        let g = Graph::new();
        let f0 = value(focal_loss(g.constant(logits.clone()), &t, 2.0, 0.25).unwrap());
        let f1 = value(focal_loss(g.constant(p_logits.clone()), &pt, 2.0, 0.25).unwrap());
        assert!((f0 - f1).abs() < 1e-14);
        let d0 = value(dice_loss(g.constant(logits.sigmoid()), &t, 1.0).unwrap());
        let d1 = value(dice_loss(g.constant(p_logits.sigmoid()), &pt, 1.0).unwrap());
        assert!((d0 - d1).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let t = target(&[0, 1], 1, 2, 2);
        let g = Graph::new();
        assert!(matches!(
            focal_loss(g.constant(Tensor::zeros(&[2, 3])), &t, 2.0, 0.25),
            Err(Error::Dimension { .. })
        ));
        assert!(cls_loss(g.constant(Tensor::zeros(&[2, 2])), &t, 0.1).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights { dice: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
