//! Composite training objective.
//!
//! Every supervised map gets the same stage loss, a weighted BCE plus a soft
//! Dice term. The total sums the final-map stage loss with the body and
//! boundary stage losses of each active FFS block.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelgen::{BinaryMask, LabelSet};
use crate::network::ForwardOutputs;

/// Logits are clamped to this magnitude before the BCE term.
pub const LOGIT_CLAMP: f64 = 50.0;
/// Floor on the magnitude of the literal weight denominator.
pub const LITERAL_GUARD: f64 = 1e-6;

/// How per-pixel BCE weights are derived from the target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BceWeighting {
    /// `w = 1 / ln(offset + p_c)` with `p_c` the pixel frequency of the
    /// pixel's class in the target.
    Guarded { offset: f64 },
    /// `w = 1 / ln(beta + g / sum(g))` as written, with the denominator's
    /// magnitude floored at [`LITERAL_GUARD`].
    Literal,
    Uniform,
}

impl Default for BceWeighting {
    fn default() -> Self {
        BceWeighting::Guarded { offset: 1.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Offset of the literal weight formula.
    pub beta: f64,
    pub weighting: BceWeighting,
    pub dice_smooth: f64,
    pub enable_body: bool,
    pub enable_bound: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 10.0,
            beta: 1.0,
            weighting: BceWeighting::default(),
            dice_smooth: 1.0,
            enable_body: true,
            enable_bound: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Parameter("lambda1 and lambda2 must be non-negative".into()));
        }
        if self.dice_smooth < 0.0 || !self.beta.is_finite() {
            return Err(Error::Parameter("dice_smooth must be >= 0 and beta finite".into()));
        }
        if let BceWeighting::Guarded { offset } = self.weighting {
            // ln(offset + p) must stay away from zero for p in [0, 1].
            if offset <= 1.0 || !offset.is_finite() {
                return Err(Error::Parameter(format!("guarded offset must exceed 1, got {offset}")));
            }
        }
        Ok(())
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    if a.rank() != 4 {
        return Err(Error::Shape(format!("expected (B, 1, H, W), got {:?}", a.dims())));
    }
    Ok(())
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

/// Soft Dice loss `1 - (2 sum(g p) + s) / (sum(g) + sum(p) + s)` per image,
/// averaged over the batch.
pub fn dice_loss(pred_prob: &Tensor, target: &Tensor, smooth: f64) -> Result<Tensor> {
    check_same_shape(pred_prob, target)?;
    let inter = (pred_prob * target)?.sum((1, 2, 3))?;
    let denom = (pred_prob.sum((1, 2, 3))? + target.sum((1, 2, 3))?)?;
    let ratio = ((inter * 2.0)? + smooth)?.div(&(denom + smooth)?)?;
    Ok(ratio.affine(-1.0, 1.0)?.mean_all()?)
}

/// Per-pixel weights for one batch of targets, same shape as `target`.
pub fn pixel_weights(target: &Tensor, weighting: BceWeighting, beta: f64) -> Result<Tensor> {
    let dims = target.dims().to_vec();
    if let BceWeighting::Uniform = weighting {
        return Ok(Tensor::ones(dims.as_slice(), target.dtype(), target.device())?);
    }
    let batch = dims[0];
    let g: Vec<f64> = target.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let per = g.len() / batch.max(1);
    let mut w = Vec::with_capacity(g.len());
    for img in g.chunks(per.max(1)) {
        let fg: f64 = img.iter().sum();
        match weighting {
            BceWeighting::Guarded { offset } => {
                let p_fg = fg / img.len() as f64;
                let w_fg = 1.0 / (offset + p_fg).ln();
                let w_bg = 1.0 / (offset + 1.0 - p_fg).ln();
                w.extend(img.iter().map(|&gi| if gi > 0.5 { w_fg } else { w_bg }));
            }
            BceWeighting::Literal => {
                w.extend(img.iter().map(|&gi| {
                    let ratio = if fg > 0.0 { gi / fg } else { 0.0 };
                    let d = (beta + ratio).ln();
                    let d = match d {
                        d if d.abs() >= LITERAL_GUARD => d,
                        d if d < 0.0 => -LITERAL_GUARD,
                        _ => LITERAL_GUARD,
                    };
                    1.0 / d
                }));
            }
            BceWeighting::Uniform => unreachable!(),
        }
    }
    Ok(Tensor::from_vec(w, dims.as_slice(), &Device::Cpu)?.to_dtype(target.dtype())?)
}

/// Mean over pixels (and batch) of `w * BCE(sigmoid(logits), target)`.
pub fn weighted_bce(logits: &Tensor, target: &Tensor, weighting: BceWeighting, beta: f64) -> Result<Tensor> {
    check_same_shape(logits, target)?;
    let x = logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)?;
    // max(x, 0) - x g + ln(1 + exp(-|x|))
    let softplus_neg = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per_pixel = ((x.relu()? - (&x * target)?)? + softplus_neg)?;
    let w = pixel_weights(target, weighting, beta)?;
    Ok((per_pixel * w)?.mean_all()?)
}

#[derive(Clone, Debug)]
pub struct StageLoss {
    pub total: Tensor,
    pub wbce: f64,
    pub dice: f64,
}

/// `lambda1 * wbce + lambda2 * dice` on one supervised map.
pub fn stage_loss(logits: &Tensor, target: &Tensor, weights: &LossWeights) -> Result<StageLoss> {
    let wbce = weighted_bce(logits, target, weights.weighting, weights.beta)?;
    let dice = dice_loss(&sigmoid(logits)?, target, weights.dice_smooth)?;
    let total = ((&wbce * weights.lambda1)? + (&dice * weights.lambda2)?)?;
    Ok(StageLoss {
        total,
        wbce: scalar(&wbce)?,
        dice: scalar(&dice)?,
    })
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

/// Batched supervision targets at full resolution, each (B, 1, H, W).
pub struct LabelBatch {
    pub final_mask: Tensor,
    pub body: Tensor,
    pub bound: Tensor,
}

fn masks_to_tensor(masks: &[&BinaryMask], dtype: DType) -> Result<Tensor> {
    let (h, w) = masks
        .first()
        .ok_or_else(|| Error::Parameter("empty label batch".into()))?
        .dims();
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.dims() != (h, w) {
            return Err(Error::Shape("label batch has mixed sizes".into()));
        }
        data.extend(m.to_f32());
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

impl LabelBatch {
    pub fn from_labels(labels: &[&LabelSet], dtype: DType) -> Result<Self> {
        Ok(Self {
            final_mask: masks_to_tensor(&labels.iter().map(|l| &l.final_mask).collect::<Vec<_>>(), dtype)?,
            body: masks_to_tensor(&labels.iter().map(|l| &l.body).collect::<Vec<_>>(), dtype)?,
            bound: masks_to_tensor(&labels.iter().map(|l| &l.bound).collect::<Vec<_>>(), dtype)?,
        })
    }
}

/// Nearest-neighbour resampling of a (B, C, H, W) tensor, `src = floor(dst * in / out)`.
pub fn resize_nearest(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = t.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let idx = |n_in: usize, n_out: usize| -> Result<Tensor> {
        let v: Vec<u32> = (0..n_out).map(|i| ((i * n_in / n_out).min(n_in - 1)) as u32).collect();
        Ok(Tensor::from_vec(v, n_out, t.device())?)
    };
    Ok(t.index_select(&idx(h, out_h)?, 2)?.index_select(&idx(w, out_w)?, 3)?)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossTerm {
    pub name: String,
    pub value: f64,
    pub wbce: f64,
    pub dice: f64,
}

pub struct LossBreakdown {
    pub total: Tensor,
    pub terms: Vec<LossTerm>,
}

impl LossBreakdown {
    pub fn total_value(&self) -> Result<f64> {
        scalar(&self.total)
    }
}

/// Final-map loss plus body/boundary losses of every FFS block, skipping
/// terms disabled in `weights`.
pub fn total_loss(outputs: &ForwardOutputs, labels: &LabelBatch, weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    let seg = stage_loss(&outputs.final_logits, &labels.final_mask, weights)?;
    let mut total = seg.total.clone();
    let mut terms = vec![LossTerm {
        name: "seg".into(),
        value: scalar(&seg.total)?,
        wbce: seg.wbce,
        dice: seg.dice,
    }];
    let aux = [
        (weights.enable_body, "body", &labels.body),
        (weights.enable_bound, "bound", &labels.bound),
    ];
    for sup in &outputs.supervision {
        for (enabled, kind, target) in aux {
            if !enabled {
                continue;
            }
            let logits = match kind {
                "body" => sup.body_logits.as_ref(),
                _ => sup.bound_logits.as_ref(),
            }
            .ok_or_else(|| {
                Error::Config(format!(
                    "{kind} loss enabled but FFS-{} has no {kind} supervision head",
                    sup.level
                ))
            })?;
            let (_, _, h, w) = logits.dims4()?;
            let target = resize_nearest(target, h, w)?;
            let s = stage_loss(logits, &target, weights)?;
            total = (total + &s.total)?;
            terms.push(LossTerm {
                name: format!("{kind}@{}", sup.level),
                value: scalar(&s.total)?,
                wbce: s.wbce,
                dice: s.dice,
            });
        }
    }
    Ok(LossBreakdown { total, terms })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(v, (1, 1, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn dice_hand_case_without_smoothing() {
        // target 4 px, pred 4 px, overlap 2 px
        let g = t(vec![1., 1., 1., 1., 0., 0., 0., 0.], 2, 4);
        let p = t(vec![0., 0., 1., 1., 1., 1., 0., 0.], 2, 4);
        assert_eq!(scalar(&dice_loss(&p, &g, 0.0).unwrap()).unwrap(), 0.5);
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let n = 32 * 32;
        let g = t((0..n).map(|i| (i % 3 == 0) as u8 as f64).collect(), 32, 32);
        assert!(scalar(&dice_loss(&g, &g, 1.0).unwrap()).unwrap() < 1e-3);
        let inv = g.affine(-1.0, 1.0).unwrap();
        assert!(scalar(&dice_loss(&inv, &g, 1.0).unwrap()).unwrap() > 0.998);
    }

    #[test]
    fn bce_saturated_and_uniform() {
        let g = t(vec![1., 0., 0., 1.], 2, 2);
        let logits = g.affine(40.0, -20.0).unwrap();
        let l = scalar(&weighted_bce(&logits, &g, BceWeighting::default(), 1.0).unwrap()).unwrap();
        assert!(l < 1e-6, "{l}");
        let zero = g.zeros_like().unwrap();
        let l = scalar(&weighted_bce(&zero, &g, BceWeighting::Uniform, 1.0).unwrap()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn guarded_weights_favour_rare_foreground() {
        let g = t((0..100).map(|i| (i < 10) as u8 as f64).collect(), 10, 10);
        let w: Vec<f64> = pixel_weights(&g, BceWeighting::default(), 1.0)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let (w_fg, w_bg) = (w[0], w[99]);
        assert!((w_fg - 1.0 / 1.12f64.ln()).abs() < 1e-12);
        assert!((w_bg - 1.0 / 1.92f64.ln()).abs() < 1e-12);
        assert!(w_fg > w_bg);
    }

    #[test]
    fn literal_weights_are_finite() {
        let g = t(vec![1., 0., 0., 0.], 2, 2);
        let w: Vec<f64> = pixel_weights(&g, BceWeighting::Literal, 1.0)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert!((w[0] - 1.0 / 2f64.ln()).abs() < 1e-12);
        assert_eq!(w[1], 1.0 / LITERAL_GUARD);
        assert!(w.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stage_loss_degenerate_weights() {
        let g = t(vec![1., 0., 1., 0., 0., 0., 1., 1., 0.], 3, 3);
        let logits = t(vec![0.3, -1.2, 2.0, 0.1, -0.4, 0.9, 1.5, -2.2, 0.0], 3, 3);
        let base = LossWeights::default();
        let only_dice = stage_loss(&logits, &g, &LossWeights { lambda1: 0.0, ..base.clone() }).unwrap();
        let d = scalar(&dice_loss(&sigmoid(&logits).unwrap(), &g, 1.0).unwrap()).unwrap();
        assert!((scalar(&only_dice.total).unwrap() - 10.0 * d).abs() < 1e-12);
        let zero = g.zeros_like().unwrap();
        let only_bce = stage_loss(
            &zero,
            &g,
            &LossWeights { lambda2: 0.0, weighting: BceWeighting::Uniform, ..base },
        )
        .unwrap();
        assert!((scalar(&only_bce.total).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = t(vec![0.; 4], 2, 2);
        let b = t(vec![0.; 6], 2, 3);
        assert!(matches!(dice_loss(&a, &b, 1.0), Err(Error::Shape(_))));
        assert!(matches!(weighted_bce(&a, &b, BceWeighting::Uniform, 1.0), Err(Error::Shape(_))));
    }
}
