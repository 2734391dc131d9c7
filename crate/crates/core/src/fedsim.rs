//! One round of federated training with an interception point on the
//! transmitted client update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dp::{mean_gradient, noisy_clipped_mean, per_sample_gradients, PdpConfig};
use crate::error::{Error, Result};
use crate::models::{ModelSpec, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeKind {
    Standard = 0,
    DpSgd = 1,
    PdpSgd = 2,
}

impl RegimeKind {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(RegimeKind::Standard),
            1 => Some(RegimeKind::DpSgd),
            2 => Some(RegimeKind::PdpSgd),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            RegimeKind::Standard => "standard",
            RegimeKind::DpSgd => "dp-sgd",
            RegimeKind::PdpSgd => "pdp-sgd",
        }
    }
}

/// Training regime with its resolved parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Regime {
    Standard,
    DpSgd { clip_norm: f64, noise_multiplier: f64 },
    PdpSgd(PdpConfig),
}

impl Regime {
    pub fn kind(&self) -> RegimeKind {
        match self {
            Regime::Standard => RegimeKind::Standard,
            Regime::DpSgd { .. } => RegimeKind::DpSgd,
            Regime::PdpSgd(_) => RegimeKind::PdpSgd,
        }
    }

    /// Gradient of one batch under this regime: the plain mean for the
    /// standard regime, the penalised mean for PDP, and the noisy clipped
    /// mean for DP-SGD. Per-sample gradients are reduced in batch order.
    pub fn batch_gradient(&self, spec: &ModelSpec, params: &ParamSet, images: &Tensor, labels: &[usize], noise: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
        match *self {
            Regime::Standard => mean_gradient(&per_sample_gradients(spec, params, images, labels, 0.0)?),
            Regime::PdpSgd(c) => mean_gradient(&per_sample_gradients(spec, params, images, labels, c.kappa)?),
            Regime::DpSgd { clip_norm, noise_multiplier } => {
                noisy_clipped_mean(&per_sample_gradients(spec, params, images, labels, 0.0)?, clip_norm, noise_multiplier, noise)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptureMetadata {
    pub learning_rate: f64,
    pub clip_norm: Option<f64>,
    pub noise_multiplier: Option<f64>,
    pub kappa: Option<f64>,
}

/// The update a client transmits, as seen by an interceptor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCapture {
    round: u32,
    client_id: u32,
    regime: RegimeKind,
    layers: Vec<Tensor>,
    metadata: CaptureMetadata,
}

impl GradientCapture {
    pub fn new(round: u32, client_id: u32, regime: RegimeKind, layers: Vec<Tensor>, metadata: CaptureMetadata) -> Self {
        GradientCapture { round, client_id, regime, layers, metadata }
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn client_id(&self) -> u32 {
        self.client_id
    }

    pub fn regime(&self) -> RegimeKind {
        self.regime
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn metadata(&self) -> &CaptureMetadata {
        &self.metadata
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|t| t.shape().to_vec()).collect()
    }
}

/// A client with its local data (`[n, C, H, W]` images and labels).
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: u32,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub learning_rate: f64,
    pub regime: Regime,
    /// Seed of the client's noise stream (used by DP-SGD only).
    pub noise_seed: u64,
}

impl ClientState {
    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() || self.images.shape()[0] != self.labels.len() {
            return Err(Error::contract(format!("client {} has an empty or inconsistent dataset", self.id)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::contract(format!("client {} learning rate must be positive", self.id)));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.labels.len()
    }
}

/// One local step over the whole local slice. The capture holds exactly the
/// gradient that was applied.
pub fn local_update(client: &ClientState, spec: &ModelSpec, global: &ParamSet, round: u32) -> Result<(ParamSet, GradientCapture)> {
    client.validate()?;
    if !global.matches(spec) {
        return Err(Error::contract("global parameters do not match the model"));
    }
    let mut noise = ChaCha8Rng::seed_from_u64(client.noise_seed);
    let g = client.regime.batch_gradient(spec, global, &client.images, &client.labels, &mut noise)?;
    let next = global.sgd_update(&g, client.learning_rate)?;
    let metadata = match client.regime {
        Regime::Standard => CaptureMetadata { learning_rate: client.learning_rate, clip_norm: None, noise_multiplier: None, kappa: None },
        Regime::DpSgd { clip_norm, noise_multiplier } => {
            CaptureMetadata { learning_rate: client.learning_rate, clip_norm: Some(clip_norm), noise_multiplier: Some(noise_multiplier), kappa: None }
        }
        Regime::PdpSgd(c) => CaptureMetadata { learning_rate: client.learning_rate, clip_norm: None, noise_multiplier: None, kappa: Some(c.kappa) },
    };
    Ok((next, GradientCapture::new(round, client.id, client.regime.kind(), g, metadata)))
}

/// Gradient implied by one local step: `(θ_t − θ_{t+1}) / η`.
pub fn gradient_from_delta(theta_next: &ParamSet, theta: &ParamSet, eta: f64) -> Result<Vec<Tensor>> {
    if eta == 0.0 || !eta.is_finite() {
        return Err(Error::contract(format!("learning rate must be non-zero and finite, got {eta}")));
    }
    if theta_next.shapes() != theta.shapes() {
        return Err(Error::Dimension { op: "gradient_from_delta", shapes: theta.shapes() });
    }
    theta.tensors().zip(theta_next.tensors()).map(|(a, b)| a.zip_map(b, |t, n| (t - n) / eta)).collect()
}

/// Sample-count-weighted average `Σ (n_k / Σn) θ_k`, folded in list order.
pub fn fed_avg(updates: &[(ParamSet, usize)]) -> Result<ParamSet> {
    let (first, _) = updates.first().ok_or_else(|| Error::contract("fed_avg needs at least one update"))?;
    if updates.iter().any(|(_, n)| *n == 0) {
        return Err(Error::contract("every client must contribute at least one sample"));
    }
    if updates.iter().any(|(p, _)| p.shapes() != first.shapes()) {
        return Err(Error::Dimension { op: "fed_avg", shapes: first.shapes() });
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    let mut acc: Vec<Tensor> = first.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    for (p, n) in updates {
        let w = *n as f64 / total as f64;
        for (a, t) in acc.iter_mut().zip(p.tensors()) {
            for (x, v) in a.data_mut().iter_mut().zip(t.data()) {
                *x += w * v;
            }
        }
    }
    first.with_tensors(acc)
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub global: ParamSet,
    pub captures: Vec<GradientCapture>,
}

/// Runs every client from the same global parameters (in id order) and
/// aggregates with [`fed_avg`].
pub fn run_round(clients: &[ClientState], spec: &ModelSpec, global: &ParamSet, round: u32) -> Result<RoundOutcome> {
    let mut order: Vec<&ClientState> = clients.iter().collect();
    order.sort_by_key(|c| c.id);
    let mut updates = Vec::with_capacity(order.len());
    let mut captures = Vec::with_capacity(order.len());
    for c in order {
        let (p, cap) = local_update(c, spec, global, round)?;
        updates.push((p, c.samples()));
        captures.push(cap);
    }
    Ok(RoundOutcome { global: fed_avg(&updates)?, captures })
}
