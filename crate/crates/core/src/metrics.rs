//! Evaluation metrics: accuracy / macro-F1, PSNR / SSIM, Dice / IoU.
//!
//! SSIM here is the mean over non-overlapping uniform `8 × 8` windows, not
//! the Gaussian-weighted variant; values are not comparable with
//! Gaussian-window references.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("class id {id} out of range for {classes} classes")]
    ClassRange { id: usize, classes: usize },
    #[error("image {height}×{width} smaller than the {window}×{window} SSIM window")]
    TooSmall { height: usize, width: usize, window: usize },
    #[error("mask value {0} is not binary")]
    NonBinary(u8),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// PSNR reported when the two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Accuracy and unweighted mean of per-class F1. A class absent from both
/// predictions and targets contributes F1 = 0.
pub fn accuracy_macro_f1(predictions: &[usize], targets: &[usize], num_classes: usize) -> Result<(f64, f64)> {
    if predictions.is_empty() {
        return Err(MetricError::Empty);
    }
    if predictions.len() != targets.len() {
        return Err(MetricError::Length(predictions.len(), targets.len()));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    let mut correct = 0;
    for (&p, &t) in predictions.iter().zip(targets) {
        for id in [p, t] {
            if id >= num_classes {
                return Err(MetricError::ClassRange { id, classes: num_classes });
            }
        }
        if p == t {
            correct += 1;
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let f1_sum: f64 = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok((correct as f64 / predictions.len() as f64, f1_sum / num_classes as f64))
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    if a.len() != b.len() {
        return Err(MetricError::Length(a.len(), b.len()));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` for signals with peak value 1, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    // running mean: exact when every squared error is the same
    let mse = pred
        .iter()
        .zip(target)
        .enumerate()
        .fold(0.0, |m, (i, (a, b))| m + ((a - b) * (a - b) - m) / (i + 1) as f64);
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

/// Mean SSIM over non-overlapping `8 × 8` windows of a `height × width`
/// plane. Partial windows at the right and bottom edges are skipped.
pub fn ssim(pred: &[f64], target: &[f64], height: usize, width: usize) -> Result<f64> {
    check_pair(pred, target)?;
    if pred.len() != height * width {
        return Err(MetricError::Length(pred.len(), height * width));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(MetricError::TooSmall {
            height,
            width,
            window: SSIM_WINDOW,
        });
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0;
    for wy in (0..=height - SSIM_WINDOW).step_by(SSIM_WINDOW) {
        for wx in (0..=width - SSIM_WINDOW).step_by(SSIM_WINDOW) {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in wy..wy + SSIM_WINDOW {
                for x in wx..wx + SSIM_WINDOW {
                    let (a, b) = (pred[y * width + x], target[y * width + x]);
                    sa += a;
                    sb += b;
                    saa += a * a;
                    sbb += b * b;
                    sab += a * b;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// Dice and IoU of two binary masks; two empty masks score `(1, 1)`.
pub fn dice_iou(pred: &[u8], target: &[u8]) -> Result<(f64, f64)> {
    if pred.len() != target.len() {
        return Err(MetricError::Length(pred.len(), target.len()));
    }
    if let Some(&v) = pred.iter().chain(target).find(|&&v| v > 1) {
        return Err(MetricError::NonBinary(v));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        a += p as usize;
        b += t as usize;
        inter += (p & t) as usize;
    }
    if a + b == 0 {
        return Ok((1.0, 1.0));
    }
    let union = a + b - inter;
    Ok((2.0 * inter as f64 / (a + b) as f64, inter as f64 / union as f64))
}
