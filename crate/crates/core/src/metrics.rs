//! Classification scores and structural similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    /// Counts binary outcomes; class 1 is positive.
    pub fn from_predictions(predicted: &[usize], actual: &[usize]) -> Result<Self> {
        if predicted.len() != actual.len() {
            return Err(Error::Dimension { op: "confusion_matrix", shapes: vec![vec![predicted.len()], vec![actual.len()]] });
        }
        let mut cm = ConfusionMatrix::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            if p > 1 || a > 1 {
                return Err(Error::contract(format!("binary labels expected, got prediction {p}, label {a}")));
            }
            match (p == 1, a == 1) {
                (true, true) => cm.tp += 1,
                (false, false) => cm.tn += 1,
                (true, false) => cm.fp += 1,
                (false, true) => cm.fn_ += 1,
            }
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Scores derived from a confusion matrix. `None` marks a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
    pub mcc: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Scores for a non-empty confusion matrix.
pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<ClassificationMetrics> {
    if cm.total() == 0 {
        return Err(Error::contract("empty confusion matrix"));
    }
    let ConfusionMatrix { tp, tn, fp, fn_ } = *cm;
    let mcc_den = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    let mcc = if mcc_den.contains(&0) {
        None
    } else {
        let num = tp as f64 * tn as f64 - fp as f64 * fn_ as f64;
        let den = mcc_den.iter().map(|&d| d as f64).product::<f64>().sqrt();
        Some(num / den)
    };
    Ok(ClassificationMetrics {
        accuracy: ratio(tp + tn, cm.total()),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        mcc,
    })
}

/// Fraction of matching labels.
pub fn accuracy(predicted: &[usize], actual: &[usize]) -> Result<f64> {
    if predicted.len() != actual.len() || predicted.is_empty() {
        return Err(Error::Dimension { op: "accuracy", shapes: vec![vec![predicted.len()], vec![actual.len()]] });
    }
    let hits = predicted.iter().zip(actual).filter(|(p, a)| p == a).count();
    Ok(hits as f64 / predicted.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SsimWindow {
    Uniform { size: usize },
    Gaussian { size: usize, sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: SsimWindow,
    pub dynamic_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: SsimWindow::Uniform { size: 8 }, dynamic_range: 1.0, k1: 0.01, k2: 0.03 }
    }
}

impl SsimParams {
    pub fn gaussian() -> Self {
        SsimParams { window: SsimWindow::Gaussian { size: 11, sigma: 1.5 }, ..Default::default() }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

/// Height and width of a single-channel image tensor (any leading extents
/// must be 1).
fn image_dims(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    let lead: usize = s[..s.len().saturating_sub(2)].iter().product();
    if s.len() < 2 || lead != 1 {
        return Err(Error::Dimension { op: "ssim", shapes: vec![s.to_vec()] });
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

fn window_stat(ma: f64, mb: f64, va: f64, vb: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// Mean SSIM over all valid windows (stride 1). Windows larger than the
/// image shrink to the image size.
pub fn ssim(a: &Tensor, b: &Tensor, params: &SsimParams) -> Result<f64> {
    let (h, w) = image_dims(a)?;
    if image_dims(b)? != (h, w) {
        return Err(Error::Dimension { op: "ssim", shapes: vec![a.shape().to_vec(), b.shape().to_vec()] });
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::numeric("ssim input"));
    }
    let (c1, c2) = (params.c1(), params.c2());
    match params.window {
        SsimWindow::Uniform { size } => Ok(ssim_uniform(a.data(), b.data(), h, w, size.min(h).min(w).max(1), c1, c2)),
        SsimWindow::Gaussian { size, sigma } => Ok(ssim_weighted(a.data(), b.data(), h, w, &gaussian_kernel(size.min(h).min(w).max(1), sigma), c1, c2)),
    }
}

/// Summed-area table with a zero first row and column.
fn integral(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f(y * w + x);
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn ssim_uniform(a: &[f64], b: &[f64], h: usize, w: usize, k: usize, c1: f64, c2: f64) -> f64 {
    let sa = integral(h, w, |i| a[i]);
    let sb = integral(h, w, |i| b[i]);
    let saa = integral(h, w, |i| a[i] * a[i]);
    let sbb = integral(h, w, |i| b[i] * b[i]);
    let sab = integral(h, w, |i| a[i] * b[i]);
    let n = (k * k) as f64;
    let w1 = w + 1;
    let block = |s: &[f64], y: usize, x: usize| s[(y + k) * w1 + x + k] - s[y * w1 + x + k] - s[(y + k) * w1 + x] + s[y * w1 + x];
    let mut total = 0.0;
    let (ny, nx) = (h - k + 1, w - k + 1);
    for y in 0..ny {
        for x in 0..nx {
            let (ma, mb) = (block(&sa, y, x) / n, block(&sb, y, x) / n);
            let va = block(&saa, y, x) / n - ma * ma;
            let vb = block(&sbb, y, x) / n - mb * mb;
            let cov = block(&sab, y, x) / n - ma * mb;
            total += window_stat(ma, mb, va, vb, cov, c1, c2);
        }
    }
    total / (ny * nx) as f64
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (dy, dx) = ((i / size) as f64 - c, (i % size) as f64 - c);
            (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn ssim_weighted(a: &[f64], b: &[f64], h: usize, w: usize, kernel: &[f64], c1: f64, c2: f64) -> f64 {
    let k = (kernel.len() as f64).sqrt() as usize;
    let (ny, nx) = (h - k + 1, w - k + 1);
    let mut total = 0.0;
    for y in 0..ny {
        for x in 0..nx {
            let (mut ma, mut mb) = (0.0, 0.0);
            for (i, &g) in kernel.iter().enumerate() {
                let p = (y + i / k) * w + x + i % k;
                ma += g * a[p];
                mb += g * b[p];
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for (i, &g) in kernel.iter().enumerate() {
                let p = (y + i / k) * w + x + i % k;
                let (da, db) = (a[p] - ma, b[p] - mb);
                va += g * da * da;
                vb += g * db * db;
                cov += g * da * db;
            }
            total += window_stat(ma, mb, va, vb, cov, c1, c2);
        }
    }
    total / (ny * nx) as f64
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension { op: "mse", shapes: vec![a.shape().to_vec(), b.shape().to_vec()] });
    }
    Ok(crate::tensor::squared_distance(a.data(), b.data()) / a.len() as f64)
}
