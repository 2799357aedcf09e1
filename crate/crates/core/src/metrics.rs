//! Segmentation metrics: Dice similarity, Hausdorff distance and pooled-pixel
//! precision-recall / ROC curves.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelgen::{squared_edt, BinaryMask};

/// Probability threshold used to binarise predictions.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

/// Dice similarity coefficient in percent. Two empty masks score 100.
pub fn dsc(pred: &BinaryMask, target: &BinaryMask) -> Result<f64> {
    let inter = pred.intersection_count(target)?;
    let total = pred.count() + target.count();
    if total == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / total as f64)
}

/// Symmetric Hausdorff distance between the 4-connected boundaries of the
/// two masks. Distances are in pixels, or scaled by `spacing = (dy, dx)`.
/// Both empty gives 0; exactly one empty gives `f64::INFINITY`.
pub fn hausdorff(pred: &BinaryMask, target: &BinaryMask, spacing: Option<(f64, f64)>) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "mask dims differ: {:?} vs {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    match (pred.is_empty(), target.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(f64::INFINITY),
        _ => {}
    }
    let spacing = spacing.unwrap_or((1.0, 1.0));
    if !(spacing.0 > 0.0 && spacing.1 > 0.0) {
        return Err(Error::Parameter(format!("pixel spacing must be positive, got {spacing:?}")));
    }
    let bp = pred.boundary();
    let bt = target.boundary();
    Ok(directed(&bp, &bt, spacing).max(directed(&bt, &bp, spacing)))
}

/// max over `from` pixels of the distance to the nearest `to` pixel.
fn directed(from: &BinaryMask, to: &BinaryMask, spacing: (f64, f64)) -> f64 {
    // Pixels of `to` are the zero set of the transform.
    let sq = squared_edt(&to.inverted(), spacing);
    from.pixels()
        .iter()
        .zip(&sq)
        .filter(|(&p, _)| p != 0)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
        .sqrt()
}

/// Which thresholds the PR/ROC sweep visits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSweep {
    /// `n + 1` evenly spaced thresholds covering [0, 1].
    Uniform(usize),
    Explicit(Vec<f64>),
    /// Every distinct score value.
    Exact,
}

impl Default for ThresholdSweep {
    fn default() -> Self {
        ThresholdSweep::Uniform(200)
    }
}

/// One operating point of the sweep: a pixel is positive when `prob >= threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn fpr(&self) -> f64 {
        if self.fp + self.tn == 0 {
            0.0
        } else {
            self.fp as f64 / (self.fp + self.tn) as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    /// (recall, precision), recall non-decreasing.
    pub pr: Vec<(f64, f64)>,
    /// (fpr, tpr), both non-decreasing.
    pub roc: Vec<(f64, f64)>,
    pub map: f64,
    pub auc: f64,
    pub points: Vec<Confusion>,
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Pooled-pixel sweep over all images. `probs[i]` is row-major and must have
/// as many values as `targets[i]` has pixels.
pub fn pr_roc(probs: &[Vec<f64>], targets: &[BinaryMask], sweep: &ThresholdSweep) -> Result<Curves> {
    if probs.is_empty() || probs.len() != targets.len() {
        return Err(Error::Parameter(format!(
            "need matching non-empty lists, got {} probability maps and {} targets",
            probs.len(),
            targets.len()
        )));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (p, t) in probs.iter().zip(targets) {
        if p.len() != t.pixels().len() {
            return Err(Error::Shape(format!(
                "probability map has {} values, target has {}",
                p.len(),
                t.pixels().len()
            )));
        }
        for (&v, &g) in p.iter().zip(t.pixels()) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parameter(format!("probability {v} outside [0, 1]")));
            }
            if g != 0 {
                pos.push(v);
            } else {
                neg.push(v);
            }
        }
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);

    let mut thresholds: Vec<f64> = match sweep {
        ThresholdSweep::Uniform(n) => {
            let n = (*n).max(1);
            (0..=n).map(|i| i as f64 / n as f64).collect()
        }
        ThresholdSweep::Explicit(v) => v.clone(),
        ThresholdSweep::Exact => {
            let mut all: Vec<f64> = pos.iter().chain(&neg).copied().collect();
            all.sort_by(f64::total_cmp);
            all.dedup();
            all
        }
    };
    // Descending thresholds give non-decreasing recall and fpr.
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    let at_least = |sorted: &[f64], t: f64| (sorted.len() - sorted.partition_point(|&x| x < t)) as u64;
    let points: Vec<Confusion> = thresholds
        .iter()
        .map(|&t| {
            let tp = at_least(&pos, t);
            let fp = at_least(&neg, t);
            Confusion {
                threshold: t,
                tp,
                fp,
                tn: neg.len() as u64 - fp,
                fn_: pos.len() as u64 - tp,
            }
        })
        .collect();

    let mut roc = vec![(0.0, 0.0)];
    roc.extend(points.iter().map(|c| (c.fpr(), c.recall())));
    roc.push((1.0, 1.0));
    let mut pr = vec![(0.0, 1.0)];
    pr.extend(points.iter().map(|c| (c.recall(), c.precision())));

    Ok(Curves {
        map: trapezoid(&pr).clamp(0.0, 1.0),
        auc: trapezoid(&roc).clamp(0.0, 1.0),
        pr,
        roc,
        points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub dsc: f64,
    /// `None` when exactly one of prediction and target is empty.
    pub hd: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
    /// Values left out because they were undefined.
    pub excluded: usize,
}

impl Aggregate {
    pub fn from_values(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut kept = Vec::new();
        let mut excluded = 0;
        for v in values {
            match v {
                Some(x) if x.is_finite() => kept.push(x),
                _ => excluded += 1,
            }
        }
        if kept.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
                excluded,
            };
        }
        let n = kept.len() as f64;
        let mean = kept.iter().sum::<f64>() / n;
        let var = kept.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            count: kept.len(),
            excluded,
        }
    }
}

impl std::fmt::Display for Aggregate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub fold: Option<usize>,
    pub per_image: Vec<ImageMetrics>,
    pub dsc: Aggregate,
    pub hd: Aggregate,
    /// "px" or "mm".
    pub hd_units: String,
    pub pr_curve: Vec<(f64, f64)>,
    pub roc_curve: Vec<(f64, f64)>,
    pub map: f64,
    pub auc: f64,
}

/// Probability map of one image alongside its ground truth.
pub struct Prediction<'a> {
    pub id: &'a str,
    pub probs: Vec<f64>,
    pub target: &'a BinaryMask,
}

impl MetricsReport {
    pub fn from_predictions(
        dataset: &str,
        fold: Option<usize>,
        preds: &[Prediction<'_>],
        spacing: Option<(f64, f64)>,
        sweep: &ThresholdSweep,
    ) -> Result<Self> {
        let mut per_image = Vec::with_capacity(preds.len());
        for p in preds {
            let (h, w) = p.target.dims();
            let bin = BinaryMask::new(
                h,
                w,
                p.probs.iter().map(|&v| (v >= BINARIZE_THRESHOLD) as u8).collect(),
            )?;
            let hd = hausdorff(&bin, p.target, spacing)?;
            per_image.push(ImageMetrics {
                id: p.id.to_string(),
                dsc: dsc(&bin, p.target)?,
                hd: hd.is_finite().then_some(hd),
            });
        }
        let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
        let targets: Vec<BinaryMask> = preds.iter().map(|p| p.target.clone()).collect();
        let curves = pr_roc(&probs, &targets, sweep)?;
        Ok(Self {
            dataset: dataset.to_string(),
            fold,
            dsc: Aggregate::from_values(per_image.iter().map(|m| Some(m.dsc))),
            hd: Aggregate::from_values(per_image.iter().map(|m| m.hd)),
            hd_units: if spacing.is_some() { "mm" } else { "px" }.into(),
            per_image,
            pr_curve: curves.pr,
            roc_curve: curves.roc,
            map: curves.map,
            auc: curves.auc,
        })
    }

    /// Writes `metrics.json`, `pr_curve.csv` and `roc_curve.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self)?;
        let path = dir.join("metrics.json");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        write_curve(&dir.join("pr_curve.csv"), "recall,precision", &self.pr_curve)?;
        write_curve(&dir.join("roc_curve.csv"), "fpr,tpr", &self.roc_curve)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_curve(path: &Path, header: &str, points: &[(f64, f64)]) -> Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    for (a, b) in points {
        out.push_str(&format!("{a},{b}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Mean ± std across folds of the per-fold mean DSC and HD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub folds: usize,
    pub dsc: Aggregate,
    pub hd: Aggregate,
}

pub fn summarize_folds(reports: &[MetricsReport]) -> FoldSummary {
    FoldSummary {
        folds: reports.len(),
        dsc: Aggregate::from_values(reports.iter().map(|r| Some(r.dsc.mean))),
        hd: Aggregate::from_values(reports.iter().map(|r| Some(r.hd.mean))),
    }
}
