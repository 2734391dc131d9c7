//! Exact rational metrics and a direct per-window SSIM.

use gradleak::metrics::ConfusionMatrix;
use num::{BigInt, BigRational, ToPrimitive, Zero};

pub fn q(n: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

pub fn exact_ratio(num: BigRational, den: BigRational) -> Option<f64> {
    (!den.is_zero()).then(|| (num / den).to_f64().unwrap())
}

/// MCC through its square, which is rational, then the sign of the numerator.
pub fn exact_mcc(cm: &ConfusionMatrix) -> Option<f64> {
    let (tp, tn, fp, fn_) = (q(cm.tp), q(cm.tn), q(cm.fp), q(cm.fn_));
    let den = (&tp + &fp) * (&tp + &fn_) * (&tn + &fp) * (&tn + &fn_);
    if den.is_zero() {
        return None;
    }
    let num = &tp * &tn - &fp * &fn_;
    let sq = (&num * &num / den).to_f64().unwrap();
    Some(sq.sqrt().copysign(num.to_f64().unwrap()))
}

pub fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
        _ => false,
    }
}

/// Two-pass population statistics for each window, no summed-area tables.
pub fn naive_uniform_ssim(a: &[f64], b: &[f64], h: usize, w: usize, k: usize, c1: f64, c2: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let idx: Vec<usize> = (0..k * k).map(|i| (y + i / k) * w + x + i % k).collect();
            let n = idx.len() as f64;
            let ma = idx.iter().map(|&i| a[i]).sum::<f64>() / n;
            let mb = idx.iter().map(|&i| b[i]).sum::<f64>() / n;
            let va = idx.iter().map(|&i| (a[i] - ma).powi(2)).sum::<f64>() / n;
            let vb = idx.iter().map(|&i| (b[i] - mb).powi(2)).sum::<f64>() / n;
            let cov = idx.iter().map(|&i| (a[i] - ma) * (b[i] - mb)).sum::<f64>() / n;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Every classification metric against its rational evaluation.
pub fn metrics_agree(cm: &ConfusionMatrix) -> bool {
    let m = gradleak::metrics::classification_metrics(cm).unwrap();
    let (tp, tn, fp, fn_) = (q(cm.tp), q(cm.tn), q(cm.fp), q(cm.fn_));
    close(m.accuracy, exact_ratio(&tp + &tn, &tp + &tn + &fp + &fn_))
        && close(m.precision, exact_ratio(tp.clone(), &tp + &fp))
        && close(m.recall, exact_ratio(tp.clone(), &tp + &fn_))
        && close(m.specificity, exact_ratio(tn.clone(), &tn + &fp))
        && close(m.f1, exact_ratio(q(2) * &tp, q(2) * &tp + &fp + &fn_))
        && close(m.mcc, exact_mcc(cm))
}
