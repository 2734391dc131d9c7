//! Monte-Carlo lower bounds on ε for toy mechanisms.
//!
//! Each mechanism is run `trials` times on two neighbouring datasets. For
//! every output event (single bins plus lower and upper tails) the hit
//! frequencies are turned into one-sided Clopper–Pearson bounds, and the
//! estimate is the largest `ln((p̲_D(E) − δ) / p̄_D'(E))` over events and
//! both orderings of the pair.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{Error, Result};

/// Minimum hits an event needs under both datasets before the audit trusts
/// it without a warning.
pub const MIN_EVENT_COUNT: u64 = 30;

/// How mechanism outputs map to bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Binning {
    /// One bin per integer in `lo..=hi`; values outside fall into the end bins.
    Integer { lo: i64, hi: i64 },
    /// `bins` equal-width bins over `[lo, hi)` plus underflow and overflow bins.
    Uniform { lo: f64, hi: f64, bins: usize },
}

impl Binning {
    pub fn count(&self) -> usize {
        match *self {
            Binning::Integer { lo, hi } => (hi - lo + 1) as usize,
            Binning::Uniform { bins, .. } => bins + 2,
        }
    }

    pub fn index(&self, v: f64) -> usize {
        match *self {
            Binning::Integer { lo, hi } => (v.round() as i64).clamp(lo, hi).wrapping_sub(lo) as usize,
            Binning::Uniform { lo, hi, bins } => {
                if v < lo {
                    0
                } else if v >= hi {
                    bins + 1
                } else {
                    1 + (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
                }
            }
        }
    }
}

/// A randomized algorithm over small real-valued datasets.
pub trait Mechanism {
    fn name(&self) -> String;
    fn binning(&self) -> Binning;
    fn sample(&self, data: &[f64], rng: &mut ChaCha8Rng) -> f64;
}

/// Reports whether the dataset contains a positive record, truthfully with
/// probability `p` and flipped otherwise. Its exact ε is `ln(p / (1 − p))`.
#[derive(Debug, Clone, Copy)]
pub struct RandomizedResponse {
    pub p: f64,
}

impl Mechanism for RandomizedResponse {
    fn name(&self) -> String {
        format!("randomized-response(p={})", self.p)
    }

    fn binning(&self) -> Binning {
        Binning::Integer { lo: 0, hi: 1 }
    }

    fn sample(&self, data: &[f64], rng: &mut ChaCha8Rng) -> f64 {
        let truth = data.iter().any(|&v| v > 0.0);
        let answer = if rng.random::<f64>() < self.p { truth } else { !truth };
        f64::from(u8::from(answer))
    }
}

/// Sum of records clipped to `[0, sensitivity]` plus Gaussian noise of std
/// `noise_multiplier · sensitivity`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianMechanism {
    pub noise_multiplier: f64,
    pub sensitivity: f64,
}

impl Mechanism for GaussianMechanism {
    fn name(&self) -> String {
        format!("gaussian(sigma={}, sensitivity={})", self.noise_multiplier, self.sensitivity)
    }

    fn binning(&self) -> Binning {
        let s = self.noise_multiplier * self.sensitivity;
        Binning::Uniform { lo: -4.0 * s, hi: 4.0 * s + self.sensitivity, bins: 40 }
    }

    fn sample(&self, data: &[f64], rng: &mut ChaCha8Rng) -> f64 {
        let sum: f64 = data.iter().map(|v| v.clamp(0.0, self.sensitivity)).sum();
        let z: f64 = rng.sample(StandardNormal);
        sum + self.noise_multiplier * self.sensitivity * z
    }
}

/// `steps` rounds of Poisson subsampling at rate `q`, each releasing the sum
/// of sampled records (clipped to [0, 1]) plus `N(0, σ²)`; the output is the
/// total over rounds.
#[derive(Debug, Clone, Copy)]
pub struct SubsampledGaussian {
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub steps: u32,
}

impl Mechanism for SubsampledGaussian {
    fn name(&self) -> String {
        format!("subsampled-gaussian(sigma={}, q={}, steps={})", self.noise_multiplier, self.sampling_rate, self.steps)
    }

    fn binning(&self) -> Binning {
        let spread = 4.0 * self.noise_multiplier * (self.steps as f64).sqrt();
        Binning::Uniform { lo: -spread, hi: spread + self.steps as f64 * self.sampling_rate.max(0.25), bins: 40 }
    }

    fn sample(&self, data: &[f64], rng: &mut ChaCha8Rng) -> f64 {
        let mut total = 0.0;
        for _ in 0..self.steps {
            for &v in data {
                if rng.random::<f64>() < self.sampling_rate {
                    total += v.clamp(0.0, 1.0);
                }
            }
            let z: f64 = rng.sample(StandardNormal);
            total += self.noise_multiplier * z;
        }
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub trials: u64,
    pub delta: f64,
    /// Two-sided confidence of each Clopper–Pearson interval.
    pub confidence: f64,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig { trials: 100_000, delta: 0.0, confidence: 0.95, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditResult {
    /// Lower bound on ε (never negative).
    pub epsilon: f64,
    /// Description of the event that attained the bound.
    pub event: String,
    pub trials: u64,
    /// No event reached [`MIN_EVENT_COUNT`] hits under both datasets, or
    /// the best event rests on such a sparse count.
    pub wide_interval_warning: bool,
}

/// True when the datasets differ in exactly one record, either by
/// replacement at one position or by adding/removing one record.
pub fn are_neighbors(d: &[f64], d_prime: &[f64]) -> bool {
    match d.len() as i64 - d_prime.len() as i64 {
        0 => d.iter().zip(d_prime).filter(|(a, b)| a != b).count() == 1,
        1 => (0..d.len()).any(|i| d[..i] == d_prime[..i] && d[i + 1..] == d_prime[i..]),
        -1 => are_neighbors(d_prime, d),
        _ => false,
    }
}

fn cp_lower(k: u64, n: u64, alpha: f64) -> f64 {
    if k == 0 {
        return 0.0;
    }
    Beta::new(k as f64, (n - k + 1) as f64).map(|b| b.inverse_cdf(alpha)).unwrap_or(0.0)
}

fn cp_upper(k: u64, n: u64, alpha: f64) -> f64 {
    if k == n {
        return 1.0;
    }
    Beta::new((k + 1) as f64, (n - k) as f64).map(|b| b.inverse_cdf(1.0 - alpha)).unwrap_or(1.0)
}

fn histogram(m: &dyn Mechanism, data: &[f64], trials: u64, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let b = m.binning();
    let mut h = vec![0u64; b.count()];
    for _ in 0..trials {
        h[b.index(m.sample(data, rng))] += 1;
    }
    h
}

pub fn empirical_dp_audit(m: &dyn Mechanism, d: &[f64], d_prime: &[f64], cfg: &AuditConfig) -> Result<AuditResult> {
    if !are_neighbors(d, d_prime) {
        return Err(Error::contract("datasets must differ in exactly one record"));
    }
    if cfg.trials == 0 {
        return Err(Error::contract("audit needs at least one trial"));
    }
    if !(0.0..1.0).contains(&cfg.delta) || !(cfg.confidence > 0.0 && cfg.confidence < 1.0) {
        return Err(Error::contract("delta must lie in [0, 1) and confidence in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h_d = histogram(m, d, cfg.trials, &mut rng);
    let h_dp = histogram(m, d_prime, cfg.trials, &mut rng);
    let alpha = (1.0 - cfg.confidence) / 2.0;
    let n = cfg.trials;

    // Events: single bins, lower tails [0, i] and upper tails [i, end).
    let bins = h_d.len();
    let mut events: Vec<(String, u64, u64)> = Vec::new();
    for i in 0..bins {
        events.push((format!("bin {i}"), h_d[i], h_dp[i]));
    }
    let (mut a, mut b) = (0, 0);
    for i in 0..bins.saturating_sub(1) {
        a += h_d[i];
        b += h_dp[i];
        events.push((format!("bins 0..={i}"), a, b));
        events.push((format!("bins {}..", i + 1), n - a, n - b));
    }

    let mut best = (0.0f64, String::from("none"), 0u64);
    let mut well_populated = false;
    for (name, kd, kdp) in &events {
        well_populated |= *kd >= MIN_EVENT_COUNT && *kdp >= MIN_EVENT_COUNT;
        for (num, den, dir) in [(*kd, *kdp, "D/D'"), (*kdp, *kd, "D'/D")] {
            let lo = cp_lower(num, n, alpha) - cfg.delta;
            let hi = cp_upper(den, n, alpha);
            if lo > 0.0 && hi > 0.0 {
                let e = (lo / hi).ln();
                if e > best.0 {
                    best = (e, format!("{name} ({dir})"), num.min(den));
                }
            }
        }
    }
    Ok(AuditResult { epsilon: best.0, event: best.1, trials: n, wide_interval_warning: !well_populated || (best.0 > 0.0 && best.2 < MIN_EVENT_COUNT) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neighbor_relation() {
        assert!(are_neighbors(&[1.0, 0.0], &[0.0, 0.0]));
        assert!(are_neighbors(&[1.0, 0.0], &[0.0]));
        assert!(are_neighbors(&[0.0], &[1.0, 0.0]));
        assert!(!are_neighbors(&[1.0, 1.0], &[0.0, 0.0]));
        assert!(!are_neighbors(&[1.0], &[1.0]));
    }

    #[test]
    fn binning_indices() {
        let b = Binning::Uniform { lo: 0.0, hi: 1.0, bins: 4 };
        assert_eq!([b.index(-1.0), b.index(0.0), b.index(0.99), b.index(1.0)], [0, 1, 4, 5]);
        let b = Binning::Integer { lo: 0, hi: 1 };
        assert_eq!([b.index(-3.0), b.index(0.0), b.index(1.0), b.index(7.0)], [0, 0, 1, 1]);
    }

    #[test]
    fn identical_outputs_give_zero() {
        let m = RandomizedResponse { p: 0.5 };
        let r = empirical_dp_audit(&m, &[1.0], &[0.0], &AuditConfig { trials: 20_000, ..Default::default() }).unwrap();
        assert!(r.epsilon < 0.1, "{r:?}");
    }

    #[test]
    fn tiny_trial_counts_warn() {
        let m = RandomizedResponse { p: 0.75 };
        let r = empirical_dp_audit(&m, &[1.0], &[0.0], &AuditConfig { trials: 10, ..Default::default() }).unwrap();
        assert!(r.wide_interval_warning);
    }
}
