//! Rényi-DP accounting for the subsampled Gaussian mechanism.
//!
//! For integer order α and sampling rate q < 1 the per-step bound is
//! `log A_α / (α − 1)` with
//! `A_α = Σ_{k=0}^{α} C(α,k) (1−q)^{α−k} q^k exp((k² − k) / (2σ²))`,
//! the binomial-expansion bound of Mironov, Talwar and Zhang (2019) for
//! Poisson subsampling. Fractional orders use the bound at `⌈α⌉`, which is
//! valid because Rényi divergence is non-decreasing in the order.
//! Conversion: `ε = min_α T·rdp(α) + ln(1/δ)/(α − 1)`.

use serde::{Deserialize, Serialize};

use crate::data::persist::{fmt_f64, CsvTable};
use crate::error::{Error, Result};

/// Orders 2..=64 plus 128 and 256.
pub fn default_orders() -> Vec<f64> {
    (2..=64).chain([128, 256]).map(f64::from).collect()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// RDP of one step of the sampled Gaussian mechanism at order `alpha`.
pub fn rdp_gaussian(sigma: f64, q: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::contract(format!("order must be finite and > 1, got {alpha}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::contract(format!("sigma must be positive, got {sigma}")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::contract(format!("sampling rate must lie in (0, 1], got {q}")));
    }
    if q == 1.0 {
        return Ok(alpha / (2.0 * sigma * sigma));
    }
    let a = alpha.ceil() as u64;
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let mut log_binom = 0.0;
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=a {
        if k > 0 {
            log_binom += ((a - k + 1) as f64).ln() - (k as f64).ln();
        }
        let kf = k as f64;
        let term = log_binom + (a - k) as f64 * l1q + kf * lq + (kf * kf - kf) / (2.0 * sigma * sigma);
        acc = log_add_exp(acc, term);
    }
    Ok((acc / (a as f64 - 1.0)).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetEntry {
    pub sigma: f64,
    pub q: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonDelta {
    pub epsilon: f64,
    pub delta: f64,
    /// Order at which the minimum was attained.
    pub order: f64,
}

/// Log of mechanism invocations with a fixed target δ.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyBudget {
    entries: Vec<BudgetEntry>,
    delta: f64,
    orders: Vec<f64>,
}

impl PrivacyBudget {
    pub fn new(delta: f64) -> Result<Self> {
        Self::with_orders(delta, default_orders())
    }

    pub fn with_orders(delta: f64, orders: Vec<f64>) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::contract(format!("delta must lie in (0, 1), got {delta}")));
        }
        if orders.is_empty() || orders.iter().any(|&a| !(a > 1.0)) {
            return Err(Error::contract("orders must be non-empty and all > 1"));
        }
        Ok(PrivacyBudget { entries: Vec::new(), delta, orders })
    }

    /// Records `steps` invocations; consecutive runs with the same `(σ, q)`
    /// share one entry.
    pub fn log(&mut self, sigma: f64, q: f64, steps: u64) -> Result<()> {
        rdp_gaussian(sigma, q, 2.0)?;
        match self.entries.last_mut() {
            Some(last) if last.sigma == sigma && last.q == q => last.steps += steps,
            _ => self.entries.push(BudgetEntry { sigma, q, steps }),
        }
        Ok(())
    }

    pub fn entries(&self) -> &[BudgetEntry] {
        &self.entries
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    /// Accumulated RDP at each order.
    pub fn rdp_curve(&self) -> Result<Vec<(f64, f64)>> {
        self.orders
            .iter()
            .map(|&a| {
                let mut total = 0.0;
                for e in &self.entries {
                    total += e.steps as f64 * rdp_gaussian(e.sigma, e.q, a)?;
                }
                Ok((a, total))
            })
            .collect()
    }

    /// One CSV row per logged step with the running ε.
    pub fn history_csv(&self) -> Result<CsvTable> {
        let mut table = CsvTable::new(&["step", "sigma", "q", "best_alpha", "epsilon"]);
        let mut running = PrivacyBudget { entries: Vec::new(), delta: self.delta, orders: self.orders.clone() };
        let mut step = 0u64;
        for e in &self.entries {
            for _ in 0..e.steps {
                step += 1;
                running.log(e.sigma, e.q, 1)?;
                let ed = compose_and_convert(&running)?;
                table.push(vec![step.to_string(), fmt_f64(e.sigma), fmt_f64(e.q), fmt_f64(ed.order), fmt_f64(ed.epsilon)])?;
            }
        }
        Ok(table)
    }
}

pub fn compose_and_convert(budget: &PrivacyBudget) -> Result<EpsilonDelta> {
    if budget.entries.is_empty() {
        return Err(Error::contract("privacy budget has no logged steps"));
    }
    let log_inv_delta = -budget.delta.ln();
    let mut best = EpsilonDelta { epsilon: f64::INFINITY, delta: budget.delta, order: f64::NAN };
    for (a, rdp) in budget.rdp_curve()? {
        let eps = rdp + log_inv_delta / (a - 1.0);
        if eps < best.epsilon {
            best = EpsilonDelta { epsilon: eps, delta: budget.delta, order: a };
        }
    }
    Ok(best)
}

/// ε after `steps` identical steps.
pub fn epsilon_for(sigma: f64, q: f64, steps: u64, delta: f64) -> Result<f64> {
    let mut b = PrivacyBudget::new(delta)?;
    b.log(sigma, q, steps)?;
    Ok(compose_and_convert(&b)?.epsilon)
}

pub const SIGMA_MIN: f64 = 1e-2;
pub const SIGMA_MAX: f64 = 1e3;

/// Noise multiplier whose accounted ε is within 1% of `target`, by bisection
/// on `ln σ` over `[SIGMA_MIN, SIGMA_MAX]`. The returned σ never gives an ε
/// above the target by more than the tolerance.
pub fn calibrate_sigma(target: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    if !(target > 0.0) || !target.is_finite() {
        return Err(Error::contract(format!("target epsilon must be positive, got {target}")));
    }
    if steps == 0 {
        return Err(Error::contract("calibration needs at least one step"));
    }
    let eps = |s: f64| epsilon_for(s, q, steps, delta);
    let (e_lo, e_hi) = (eps(SIGMA_MIN)?, eps(SIGMA_MAX)?);
    if e_hi > target || e_lo < target {
        return Err(Error::Range(format!("target epsilon {target} not reachable: sigma in [{SIGMA_MIN}, {SIGMA_MAX}] gives epsilon in [{e_hi}, {e_lo}]")));
    }
    let (mut lo, mut hi) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let e = eps(mid.exp())?;
        if (e - target).abs() <= 1e-4 * target {
            return Ok(mid.exp());
        }
        if e > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi.exp())
}

/// `1/n` rounded down to a power of ten.
pub fn default_delta(n_train: usize) -> Result<f64> {
    if n_train < 2 {
        return Err(Error::contract("default delta needs at least two training samples"));
    }
    let mut p = 0;
    let mut power = 1usize;
    while power < n_train {
        power = power.saturating_mul(10);
        p += 1;
    }
    Ok(10f64.powi(-p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unsubsampled_examples() {
        assert_eq!(rdp_gaussian(1.0, 1.0, 2.0).unwrap(), 1.0);
        assert_eq!(rdp_gaussian(2.0, 1.0, 8.0).unwrap(), 1.0);
        assert!(rdp_gaussian(1.0, 1.0, 1.0).is_err());
        assert!(rdp_gaussian(1.0, 0.0, 2.0).is_err());
    }

    #[test]
    fn full_batch_matches_grid_minimum() {
        let e = epsilon_for(1.0, 1.0, 1, 1e-5).unwrap();
        let brute = default_orders().iter().map(|&a| a / 2.0 + (1e5f64).ln() / (a - 1.0)).fold(f64::INFINITY, f64::min);
        assert!((e - brute).abs() < 1e-12);
    }

    #[test]
    fn empty_budget_and_zero_steps() {
        let b = PrivacyBudget::new(1e-5).unwrap();
        assert!(matches!(compose_and_convert(&b), Err(Error::Contract(_))));
        assert!(calibrate_sigma(8.0, 1e-5, 0.1, 0).is_err());
    }

    #[test]
    fn delta_defaults() {
        assert_eq!(default_delta(256).unwrap(), 1e-3);
        assert_eq!(default_delta(1000).unwrap(), 1e-3);
        assert_eq!(default_delta(60000).unwrap(), 1e-5);
        assert_eq!(default_delta(99).unwrap(), 1e-2);
    }

    #[test]
    fn history_rows_track_steps() {
        let mut b = PrivacyBudget::new(1e-5).unwrap();
        b.log(1.0, 0.1, 3).unwrap();
        let t = b.history_csv().unwrap();
        assert_eq!(t.rows.len(), 3);
        let eps = t.floats("epsilon").unwrap();
        assert!(eps[0] <= eps[1] && eps[1] <= eps[2]);
        assert_eq!(eps[2].unwrap(), compose_and_convert(&b).unwrap().epsilon);
    }
}
