//! Penalty-based private training: `L + κ Σ θ_i² X_i`.
//!
//! `X_i` is the squared input activation that multiplies `θ_i` in its affine
//! op, summed over the positions where the weight is applied and averaged
//! over the batch. Bias terms use `X_i = 1`. Because `X` is treated as a
//! constant of the loss, the gradient is exactly `∇L + 2κ X ⊙ θ`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{forward, head_loss, target_tensor, Layer, ModelSpec, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdpConfig {
    pub kappa: f64,
}

impl PdpConfig {
    pub fn new(kappa: f64) -> Result<Self> {
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::contract(format!("kappa must be finite and >= 0, got {kappa}")));
        }
        Ok(PdpConfig { kappa })
    }

    /// `κ = η²σ²`.
    pub fn from_noise(learning_rate: f64, noise_multiplier: f64) -> Result<Self> {
        Self::new(learning_rate * learning_rate * noise_multiplier * noise_multiplier)
    }
}

/// Penalty weights `X`, aligned with the parameter list, as differentiable
/// functions of the layer inputs.
pub fn penalty_weights(tape: &mut Tape, spec: &ModelSpec, affine_inputs: &[Var]) -> Result<Vec<Var>> {
    let mut inputs = affine_inputs.iter().copied();
    let mut out = Vec::new();
    for layer in &spec.layers {
        match *layer {
            Layer::Conv2d { out_channels, kernel, stride, padding, .. } => {
                let x = inputs.next().ok_or_else(|| Error::contract("missing conv input activation"))?;
                let s = tape.shape(x).to_vec();
                let n = s[0] as f64;
                let oh = (s[2] + 2 * padding - kernel) / stride + 1;
                let ow = (s[3] + 2 * padding - kernel) / stride + 1;
                let sq = tape.square(x)?;
                let ones = tape.constant(Tensor::ones(vec![s[0], out_channels, oh, ow]))?;
                let xw = tape.conv2d_weight_grad(sq, ones, kernel, stride, padding)?;
                out.push(tape.scale(xw, 1.0 / n)?);
                out.push(tape.constant(Tensor::ones(vec![out_channels]))?);
            }
            Layer::Linear { out_features, .. } => {
                let x = inputs.next().ok_or_else(|| Error::contract("missing linear input activation"))?;
                let n = tape.shape(x)[0];
                let sq = tape.square(x)?;
                let ones = tape.constant(Tensor::ones(vec![out_features, n]))?;
                let xw = tape.matmul(ones, sq)?;
                out.push(tape.scale(xw, 1.0 / n as f64)?);
                out.push(tape.constant(Tensor::ones(vec![out_features]))?);
            }
            _ => {}
        }
    }
    Ok(out)
}

/// `Σ_i sum(θ_i² ⊙ X_i)` over aligned parameter and weight lists.
pub fn penalty(tape: &mut Tape, params: &[Var], weights: &[Var]) -> Result<Var> {
    if params.len() != weights.len() || params.is_empty() {
        return Err(Error::contract(format!("{} parameters but {} penalty weights", params.len(), weights.len())));
    }
    let mut total: Option<Var> = None;
    for (&p, &x) in params.iter().zip(weights) {
        let sq = tape.square(p)?;
        let w = tape.mul(sq, x)?;
        let s = tape.sum(w)?;
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `base_loss + κ Σ θ_i² X_i` with `X` detached from the graph.
pub fn pdp_loss(tape: &mut Tape, spec: &ModelSpec, base_loss: Var, params: &[Var], affine_inputs: &[Var], kappa: f64) -> Result<Var> {
    PdpConfig::new(kappa)?;
    if kappa == 0.0 {
        return Ok(base_loss);
    }
    let live = penalty_weights(tape, spec, affine_inputs)?;
    let detached = live
        .iter()
        .map(|&x| {
            let v = tape.value(x).clone();
            tape.constant(v)
        })
        .collect::<Result<Vec<_>>>()?;
    let p = penalty(tape, params, &detached)?;
    let scaled = tape.scale(p, kappa)?;
    tape.add(base_loss, scaled)
}

/// Loss value and parameter gradients of the (possibly penalised) loss on
/// one batch. `kappa = 0` gives the plain loss.
pub fn pdp_loss_and_gradients(spec: &ModelSpec, params: &ParamSet, images: &Tensor, labels: &[usize], kappa: f64) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true)?;
    let x = tape.constant(images.clone())?;
    let target = tape.constant(target_tensor(spec, labels)?)?;
    let f = forward(&mut tape, spec, &p, x)?;
    let base = head_loss(&mut tape, spec, f.output, target)?;
    let loss = pdp_loss(&mut tape, spec, base, &p, &f.affine_inputs, kappa)?;
    let grads = tape.backward(loss, &p)?;
    Ok((tape.value(loss).item(), grads))
}

/// Numeric penalty weights for a batch (no gradient tracking).
pub fn penalty_weight_values(spec: &ModelSpec, params: &ParamSet, images: &Tensor) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false)?;
    let x = tape.constant(images.clone())?;
    let f = forward(&mut tape, spec, &p, x)?;
    let w = penalty_weights(&mut tape, spec, &f.affine_inputs)?;
    Ok(w.iter().map(|&v| tape.value(v).clone()).collect())
}
