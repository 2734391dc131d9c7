//! Differentially private training steps and privacy arithmetic.

pub mod audit;
pub mod pdp;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelSpec, ParamSet};
use crate::tensor::Tensor;

pub use audit::{empirical_dp_audit, AuditConfig, AuditResult, Binning, GaussianMechanism, Mechanism, RandomizedResponse, SubsampledGaussian};
pub use pdp::{pdp_loss, pdp_loss_and_gradients, penalty_weights, PdpConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpSgdConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl DpSgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::contract(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return Err(Error::contract(format!("noise multiplier must be finite and >= 0, got {}", self.noise_multiplier)));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::contract(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

fn total_norm(g: &[Tensor]) -> f64 {
    g.iter().map(|t| t.norm_squared()).sum::<f64>().sqrt()
}

/// Scales the whole per-sample gradient (all layers jointly) by
/// `1 / max(1, ‖g‖/C)`. The scale is nudged down by ulps if rounding would
/// leave the result just above `C`, so clipping is exactly idempotent.
pub fn clip_gradients(g: &[Tensor], clip_norm: f64) -> Result<Vec<Tensor>> {
    if !(clip_norm > 0.0) {
        return Err(Error::contract(format!("clip norm must be positive, got {clip_norm}")));
    }
    let norm = total_norm(g);
    if norm <= clip_norm {
        return Ok(g.to_vec());
    }
    let mut factor = clip_norm / norm;
    loop {
        let scaled: Vec<Tensor> = g.iter().map(|t| t.map(|v| v * factor)).collect();
        if total_norm(&scaled) <= clip_norm {
            return Ok(scaled);
        }
        factor = factor.next_down();
    }
}

/// Single-tensor form of [`clip_gradients`].
pub fn clip_gradient(g: &Tensor, clip_norm: f64) -> Result<Tensor> {
    Ok(clip_gradients(std::slice::from_ref(g), clip_norm)?.remove(0))
}

/// Per-sample gradients in batch order, each from its own tape. With
/// `kappa > 0` each sample's loss carries the PDP penalty.
pub fn per_sample_gradients(spec: &ModelSpec, params: &ParamSet, images: &Tensor, labels: &[usize], kappa: f64) -> Result<Vec<Vec<Tensor>>> {
    let n = images.shape()[0];
    if n != labels.len() {
        return Err(Error::Dimension { op: "per_sample_gradients", shapes: vec![images.shape().to_vec(), vec![labels.len()]] });
    }
    let per = images.len() / n;
    let mut sample_shape = images.shape().to_vec();
    sample_shape[0] = 1;
    (0..n)
        .map(|i| {
            let x = Tensor::new(sample_shape.clone(), images.data()[i * per..(i + 1) * per].to_vec())?;
            let (_, grads) = pdp_loss_and_gradients(spec, params, &x, &labels[i..=i], kappa).map_err(|e| match e {
                Error::Numeric { context } => Error::numeric(format!("sample {i}: {context}")),
                other => other,
            })?;
            if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
                return Err(Error::numeric(format!("sample {i}: gradient of parameter tensor {bad}")));
            }
            Ok(grads)
        })
        .collect()
}

fn accumulate(sum: &mut [Tensor], g: &[Tensor]) {
    for (s, t) in sum.iter_mut().zip(g) {
        for (a, b) in s.data_mut().iter_mut().zip(t.data()) {
            *a += b;
        }
    }
}

/// Mean of per-sample gradients, summed in batch order then divided by the
/// batch size.
pub fn mean_gradient(samples: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    let first = samples.first().ok_or_else(|| Error::contract("empty batch"))?;
    let mut sum: Vec<Tensor> = first.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    for g in samples {
        accumulate(&mut sum, g);
    }
    let l = samples.len() as f64;
    Ok(sum.into_iter().map(|t| t.map(|v| v / l)).collect())
}

/// `(Σ clip(g_i) + N(0, σ²C²)) / L`. Clipped gradients are summed in batch
/// order; noise is drawn per coordinate in parameter order, and only when
/// `σ > 0`, so a zero-noise call leaves `rng` untouched.
pub fn noisy_clipped_mean<R: Rng + ?Sized>(samples: &[Vec<Tensor>], clip_norm: f64, noise_multiplier: f64, rng: &mut R) -> Result<Vec<Tensor>> {
    let first = samples.first().ok_or_else(|| Error::contract("empty batch"))?;
    let mut sum: Vec<Tensor> = first.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    for g in samples {
        accumulate(&mut sum, &clip_gradients(g, clip_norm)?);
    }
    if noise_multiplier > 0.0 {
        let std = noise_multiplier * clip_norm;
        for t in &mut sum {
            for v in t.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += std * z;
            }
        }
    }
    let l = samples.len() as f64;
    Ok(sum.into_iter().map(|t| t.map(|v| v / l)).collect())
}

/// One DP-SGD step on a batch of exactly `cfg.batch_size` samples. Returns
/// the updated parameters and the noisy aggregated gradient that was applied.
pub fn dp_sgd_step<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ParamSet,
    images: &Tensor,
    labels: &[usize],
    cfg: &DpSgdConfig,
    rng: &mut R,
) -> Result<(ParamSet, Vec<Tensor>)> {
    cfg.validate()?;
    if labels.len() != cfg.batch_size {
        return Err(Error::contract(format!("batch has {} samples, config expects {}", labels.len(), cfg.batch_size)));
    }
    let samples = per_sample_gradients(spec, params, images, labels, 0.0)?;
    let g = noisy_clipped_mean(&samples, cfg.clip_norm, cfg.noise_multiplier, rng)?;
    Ok((params.sgd_update(&g, cfg.learning_rate)?, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupPrivacy {
    pub epsilon: f64,
    pub delta: f64,
    /// `e^{kε}` overflowed; `delta` is then `f64::MAX`.
    pub saturated: bool,
}

/// Guarantee for datasets differing in `k` records:
/// `(kε, (e^{kε} − 1)/(e^ε − 1) · δ)`.
pub fn group_privacy(epsilon: f64, delta: f64, k: u32) -> Result<GroupPrivacy> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::contract(format!("epsilon must be positive and finite, got {epsilon}")));
    }
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::contract(format!("delta must lie in [0, 1), got {delta}")));
    }
    if k == 0 {
        return Err(Error::contract("group size must be at least 1"));
    }
    if k == 1 {
        return Ok(GroupPrivacy { epsilon, delta, saturated: false });
    }
    let ke = k as f64 * epsilon;
    let factor = ke.exp_m1() / epsilon.exp_m1();
    let d = factor * delta;
    if !factor.is_finite() || !d.is_finite() {
        return Ok(GroupPrivacy { epsilon: ke, delta: f64::MAX, saturated: true });
    }
    Ok(GroupPrivacy { epsilon: ke, delta: d, saturated: false })
}
