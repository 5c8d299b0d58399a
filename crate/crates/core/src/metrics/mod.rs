//! Segmentation metrics and the paired signed-rank test.

mod hausdorff;
mod wilcoxon;

pub use hausdorff::{boundary, hausdorff};
pub use wilcoxon::{signed_rank_distribution, wilcoxon_one_tailed, Wilcoxon, EXACT_MAX_N, MIN_N};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const THRESHOLD: f64 = 0.5;

/// Binary mask with its extent; `data` is row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape("mask", format!("{} values for {h}x{w}", data.len())));
        }
        Ok(Mask { h, w, data })
    }

    /// Thresholds the last two axes of a tensor holding a single plane.
    pub fn from_tensor<T: Float>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() < 2 || s[..s.len() - 2].iter().product::<usize>() != 1 {
            return Err(Error::shape("mask", format!("expected one plane, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Mask::new(h, w, t.data().iter().map(|v| v.as_f64() >= THRESHOLD).collect())
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<Confusion> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return Err(Error::shape(
            "confusion",
            format!("prediction {}x{} vs reference {}x{}", pred.h, pred.w, gt.h, gt.w),
        ));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// 1 when both masks are empty.
    pub fn dsc(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, 1.0)
    }

    /// 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_, 1.0)
    }

    /// Empty prediction: 1 if the reference is empty too, else 0.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, if self.fn_ == 0 { 1.0 } else { 0.0 })
    }

    /// Empty reference: 1 if nothing was predicted, else 0.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, if self.fp == 0 { 1.0 } else { 0.0 })
    }

    /// No reference background: 1 if nothing was missed, else 0.
    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp, if self.fn_ == 0 { 1.0 } else { 0.0 })
    }

    /// 0 when any marginal is empty.
    pub fn mcc(&self) -> f64 {
        let (tp, tn, fp, fn_) = (self.tp as f64, self.tn as f64, self.fp as f64, self.fn_ as f64);
        let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if den == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / den.sqrt()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub dsc: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub mcc: f64,
    /// Pixels.
    pub hd: f64,
}

impl MetricsReport {
    pub const NAMES: [&'static str; 7] = ["dsc", "iou", "precision", "recall", "specificity", "mcc", "hd"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.dsc,
            self.iou,
            self.precision,
            self.recall,
            self.specificity,
            self.mcc,
            self.hd,
        ]
    }
}

pub fn report(counts: &Confusion, pred: &Mask, gt: &Mask) -> Result<MetricsReport> {
    Ok(MetricsReport {
        dsc: counts.dsc(),
        iou: counts.iou(),
        precision: counts.precision(),
        recall: counts.recall(),
        specificity: counts.specificity(),
        mcc: counts.mcc(),
        hd: hausdorff(pred, gt)?,
    })
}

pub fn evaluate(pred: &Mask, gt: &Mask) -> Result<MetricsReport> {
    report(&confusion(pred, gt)?, pred, gt)
}

/// Dice of thresholded probabilities against a reference plane.
pub fn dice_score<T: Float>(prob: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    Ok(confusion(&Mask::from_tensor(prob)?, &Mask::from_tensor(gt)?)?.dsc())
}

/// Mean and sample standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}
