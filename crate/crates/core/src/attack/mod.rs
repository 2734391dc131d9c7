//! Gradient-matching reconstruction of a client's training example from an
//! intercepted update.

pub mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DualGradientRequest, Tape, Var};
use crate::data::persist::{fmt_f64, fmt_opt, CsvTable};
use crate::dp::pdp::penalty_weights;
use crate::error::{Error, Result};
use crate::fedsim::{GradientCapture, RegimeKind};
use crate::metrics::{ssim, SsimParams};
use crate::models::{forward, head_loss, Head, Layer, ModelSpec, ParamSet};
use crate::tensor::Tensor;

pub use optim::{lbfgs_step, AdamState, Bounds, LbfgsState, Objective, StepResult, WolfeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Lbfgs,
    Adam,
    Gd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Fix the label to the one read off the capture.
    Infer,
    /// Optimise class logits (through softmax) together with the image.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub optimizer: Optimizer,
    pub label_mode: LabelMode,
    pub seed: u64,
    /// Stop once the loss falls below this value.
    pub threshold: f64,
    /// Keep a snapshot every this many iterations (0 disables).
    pub snapshot_every: usize,
    pub lbfgs_memory: usize,
    /// Model the PDP penalty term in the simulated client gradient when the
    /// capture comes from a PDP-SGD client.
    pub penalty_aware: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            iterations: 200,
            learning_rate: 1.0,
            alpha: 0.0,
            optimizer: Optimizer::Lbfgs,
            label_mode: LabelMode::Joint,
            seed: 0,
            threshold: 0.0,
            snapshot_every: 20,
            lbfgs_memory: 100,
            penalty_aware: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::contract("attack needs at least one iteration"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::contract(format!("attack learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::contract(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttackTrace {
    pub rows: Vec<TraceRow>,
    /// `(iteration, [H, W] image)` pairs.
    pub snapshots: Vec<(usize, Tensor)>,
}

impl AttackTrace {
    pub fn to_csv(&self) -> Result<CsvTable> {
        let mut t = CsvTable::new(&["iteration", "loss", "ssim"]);
        for r in &self.rows {
            t.push(vec![r.iteration.to_string(), fmt_f64(r.loss), fmt_opt(r.ssim)])?;
        }
        Ok(t)
    }

    pub fn from_csv(table: &CsvTable) -> Result<AttackTrace> {
        let it = table.floats("iteration")?;
        let loss = table.floats("loss")?;
        let ssim = table.floats("ssim")?;
        let rows = it
            .iter()
            .zip(&loss)
            .zip(&ssim)
            .map(|((i, l), s)| {
                Ok(TraceRow {
                    iteration: i.ok_or_else(|| Error::format(0, "missing iteration"))? as usize,
                    loss: l.ok_or_else(|| Error::format(0, "missing loss"))?,
                    ssim: *s,
                })
            })
            .collect::<Result<_>>()?;
        Ok(AttackTrace { rows, snapshots: Vec::new() })
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn final_ssim(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.ssim)
    }

    pub fn loss_at(&self, iteration: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.iteration == iteration).map(|r| r.loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackStatus {
    /// All iterations ran.
    Completed,
    /// The loss fell below the threshold or the gradient vanished.
    Converged,
    /// The loss or its gradient stopped being finite.
    Diverged,
}

impl AttackStatus {
    pub fn label(&self) -> &'static str {
        match self {
            AttackStatus::Completed => "completed",
            AttackStatus::Converged => "converged",
            AttackStatus::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// Reconstructed image `[H, W]` (first channel).
    pub image: Tensor,
    /// Reconstructed label distribution.
    pub label: Vec<f64>,
    pub trace: AttackTrace,
    pub status: AttackStatus,
    /// Line-search failures that fell back to a plain step.
    pub fallback_steps: usize,
    pub evaluations: usize,
}

impl AttackOutcome {
    pub fn label_index(&self) -> usize {
        argmax(&self.label)
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) }).0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelInference {
    pub class: usize,
    /// Several classes shared the minimum; the lowest index was returned.
    pub tie: bool,
}

/// Class whose final-layer weight-gradient row has the smallest sum. For a
/// single-sample cross-entropy gradient with non-negative penultimate
/// activations this is the only negative row, i.e. the true class.
pub fn infer_label(capture: &GradientCapture, spec: &ModelSpec) -> Result<LabelInference> {
    if !matches!(spec.layers.last(), Some(Layer::Linear { .. })) || spec.head != Head::Logits {
        return Err(Error::contract("label inference needs a final linear layer with per-class rows"));
    }
    let layers = capture.layers();
    if layers.len() < 2 {
        return Err(Error::contract("capture has no final-layer weight gradient"));
    }
    let w = &layers[layers.len() - 2];
    if w.rank() != 2 || w.shape()[0] != spec.classes {
        return Err(Error::Dimension { op: "infer_label", shapes: vec![w.shape().to_vec()] });
    }
    let cols = w.shape()[1];
    let sums: Vec<f64> = w.data().chunks(cols).map(|r| r.iter().sum()).collect();
    let min = sums.iter().cloned().fold(f64::INFINITY, f64::min);
    let class = sums.iter().position(|&s| s == min).unwrap_or(0);
    let tie = sums.iter().filter(|&&s| s == min).count() > 1;
    Ok(LabelInference { class, tie })
}

/// Label used in the matching objective.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelSpec {
    /// Fixed target distribution (one-hot or soft), `[classes]`.
    Fixed(Vec<f64>),
    /// Unconstrained logits passed through softmax.
    Logits(Vec<f64>),
}

/// Value of the matching objective and its gradients with respect to the
/// image and, for [`LabelSpec::Logits`], the label logits.
#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub grad_image: Tensor,
    pub grad_logits: Option<Vec<f64>>,
}

/// Gradient-matching objective
/// `D = Σ_l ‖∇θ_l ℓ(x, y) − c_l‖² + α ‖f(x) − y‖²`.
///
/// When `kappa` is set the simulated client gradient includes the penalty
/// term `2κ X(x) ⊙ θ`, matching a PDP-SGD client.
pub struct MatchingObjective<'a> {
    pub spec: &'a ModelSpec,
    pub params: &'a ParamSet,
    pub capture: &'a [Tensor],
    pub alpha: f64,
    pub kappa: Option<f64>,
}

impl<'a> MatchingObjective<'a> {
    pub fn for_capture(spec: &'a ModelSpec, params: &'a ParamSet, capture: &'a GradientCapture, alpha: f64, penalty_aware: bool) -> Result<Self> {
        if capture.shapes() != params.shapes() {
            return Err(Error::Dimension { op: "attack", shapes: capture.shapes() });
        }
        let kappa = match capture.regime() {
            RegimeKind::PdpSgd if penalty_aware => capture.metadata().kappa.filter(|&k| k > 0.0),
            _ => None,
        };
        Ok(MatchingObjective { spec, params, capture: capture.layers(), alpha, kappa })
    }

    /// Builds the objective on `tape` and returns `(D, image var, logits var)`.
    fn evaluate_on(&self, image: &Tensor, label: &LabelSpec) -> Result<ObjectiveValue> {
        let spec = self.spec;
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone())?;
        let theta = self.params.bind(&mut tape, true)?;
        let (target, logits) = match label {
            LabelSpec::Fixed(p) => (tape.constant(Tensor::new(vec![1, p.len()], p.clone())?)?, None),
            LabelSpec::Logits(l) => {
                let lv = tape.leaf(Tensor::new(vec![1, l.len()], l.clone())?)?;
                (tape.softmax(lv)?, Some(lv))
            }
        };
        let f = forward(&mut tape, spec, &theta, x)?;
        let loss = head_loss(&mut tape, spec, f.output, target)?;
        let penalty = match self.kappa {
            Some(k) => Some((k, penalty_weights(&mut tape, spec, &f.affine_inputs)?)),
            None => None,
        };
        let output_match = if self.alpha > 0.0 {
            let probs = match spec.head {
                Head::Logits => tape.softmax(f.output)?,
                Head::Probability => f.output,
            };
            let diff = tape.sub(probs, target)?;
            Some(tape.l2_norm_squared(diff)?)
        } else {
            None
        };
        let capture: Vec<Var> = self.capture.iter().map(|c| tape.constant(c.clone())).collect::<Result<_>>()?;

        let mut outer = vec![x];
        outer.extend(logits);
        let req = DualGradientRequest { inner_objective: loss, inner_leaves: theta.clone(), outer_leaves: outer };
        let alpha = self.alpha;
        let dual = tape.grad_of_grad(&req, |t, grads| {
            let mut total: Option<Var> = None;
            for (i, &g) in grads.iter().enumerate() {
                let g = match &penalty {
                    Some((k, w)) => {
                        let xt = t.mul(w[i], theta[i])?;
                        let term = t.scale(xt, 2.0 * k)?;
                        t.add(g, term)?
                    }
                    None => g,
                };
                let diff = t.sub(g, capture[i])?;
                let n = t.l2_norm_squared(diff)?;
                total = Some(match total {
                    None => n,
                    Some(acc) => t.add(acc, n)?,
                });
            }
            let mut d = total.ok_or_else(|| Error::contract("model has no parameters"))?;
            if let Some(m) = output_match {
                let m = t.scale(m, alpha)?;
                d = t.add(d, m)?;
            }
            Ok(d)
        })?;
        let mut outer = dual.outer.into_iter();
        let grad_image = outer.next().expect("image gradient");
        let grad_logits = outer.next().map(|t| t.into_data());
        Ok(ObjectiveValue { loss: dual.value, grad_image, grad_logits })
    }

    /// Objective value and gradients for an image `[1, C, H, W]`.
    pub fn evaluate(&self, image: &Tensor, label: &LabelSpec) -> Result<ObjectiveValue> {
        if image.shape() != [1, self.spec.input.channels, self.spec.input.height, self.spec.input.width] {
            return Err(Error::Dimension { op: "reconstruction_loss", shapes: vec![image.shape().to_vec()] });
        }
        self.evaluate_on(image, label)
    }
}

/// Scalar value of the matching objective.
pub fn reconstruction_loss(spec: &ModelSpec, params: &ParamSet, capture: &GradientCapture, image: &Tensor, label: &LabelSpec, alpha: f64) -> Result<f64> {
    Ok(MatchingObjective::for_capture(spec, params, capture, alpha, true)?.evaluate(image, label)?.loss)
}

fn one_hot(class: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[class] = 1.0;
    v
}

struct Problem<'a> {
    objective: MatchingObjective<'a>,
    pixels: usize,
    image_shape: Vec<usize>,
    fixed_label: Option<Vec<f64>>,
    evaluations: usize,
}

impl Problem<'_> {
    fn split(&self, z: &[f64]) -> Result<(Tensor, LabelSpec)> {
        let image = Tensor::new(self.image_shape.clone(), z[..self.pixels].to_vec())?;
        let label = match &self.fixed_label {
            Some(p) => LabelSpec::Fixed(p.clone()),
            None => LabelSpec::Logits(z[self.pixels..].to_vec()),
        };
        Ok((image, label))
    }

    fn label_distribution(&self, z: &[f64]) -> Vec<f64> {
        match &self.fixed_label {
            Some(p) => p.clone(),
            None => crate::models::softmax(&z[self.pixels..]),
        }
    }
}

impl Objective for Problem<'_> {
    fn evaluate(&mut self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (image, label) = self.split(z)?;
        self.evaluations += 1;
        let v = self.objective.evaluate(&image, &label)?;
        if !v.loss.is_finite() {
            return Err(Error::numeric("reconstruction loss"));
        }
        let mut g = v.grad_image.into_data();
        if let Some(gl) = v.grad_logits {
            g.extend(gl);
        }
        Ok((v.loss, g))
    }
}

/// Runs the reconstruction attack. `ground_truth` (an `[H, W]` image) only
/// feeds the SSIM column of the trace.
pub fn run_attack(spec: &ModelSpec, params: &ParamSet, capture: &GradientCapture, cfg: &AttackConfig, ground_truth: Option<&Tensor>) -> Result<AttackOutcome> {
    cfg.validate()?;
    spec.validate()?;
    if spec.input.channels != 1 {
        return Err(Error::contract("reconstruction supports single-channel images"));
    }
    let objective = MatchingObjective::for_capture(spec, params, capture, cfg.alpha, cfg.penalty_aware)?;
    let (h, w) = (spec.input.height, spec.input.width);
    let pixels = h * w;
    let classes = match spec.head {
        Head::Logits => spec.classes,
        Head::Probability => 1,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z: Vec<f64> = (0..pixels).map(|_| rng.random::<f64>()).collect();
    let fixed_label = match (cfg.label_mode, spec.head) {
        (LabelMode::Infer, Head::Logits) => Some(one_hot(infer_label(capture, spec)?.class, classes)),
        (_, Head::Probability) => {
            return Err(Error::contract("reconstruction supports logit heads only"));
        }
        (LabelMode::Joint, Head::Logits) => {
            z.extend((0..classes).map(|_| rng.random_range(-0.1..0.1)));
            None
        }
    };
    let mut bounds = Bounds::unbounded(z.len());
    bounds.lo[..pixels].fill(0.0);
    bounds.hi[..pixels].fill(1.0);

    let mut problem = Problem { objective, pixels, image_shape: vec![1, 1, h, w], fixed_label, evaluations: 0 };
    let ssim_params = SsimParams::default();
    let score = |z: &[f64]| -> Result<Option<f64>> {
        match ground_truth {
            Some(gt) => Ok(Some(ssim(&Tensor::new(vec![h, w], z[..pixels].to_vec())?, gt, &ssim_params)?)),
            None => Ok(None),
        }
    };
    let snapshot = |z: &[f64]| Tensor::new(vec![h, w], z[..pixels].to_vec()).expect("image shape");

    let mut trace = AttackTrace::default();
    let (mut f, mut g) = match problem.evaluate(&z) {
        Ok(v) => v,
        Err(Error::Numeric { .. }) => {
            return Ok(AttackOutcome {
                image: snapshot(&z),
                label: problem.label_distribution(&z),
                trace,
                status: AttackStatus::Diverged,
                fallback_steps: 0,
                evaluations: problem.evaluations,
            })
        }
        Err(e) => return Err(e),
    };
    trace.rows.push(TraceRow { iteration: 0, loss: f, ssim: score(&z)? });
    if cfg.snapshot_every > 0 {
        trace.snapshots.push((0, snapshot(&z)));
    }

    let mut lbfgs = LbfgsState::new(cfg.lbfgs_memory, cfg.learning_rate);
    let mut adam = AdamState::new(z.len(), cfg.learning_rate);
    let mut status = AttackStatus::Completed;
    let mut fallback_steps = 0;
    for it in 1..=cfg.iterations {
        if f < cfg.threshold || g.iter().all(|&v| v == 0.0) {
            status = AttackStatus::Converged;
            break;
        }
        let step = match cfg.optimizer {
            Optimizer::Lbfgs => lbfgs_step(&mut lbfgs, &mut problem, &bounds, &z, f, &g),
            Optimizer::Adam | Optimizer::Gd => {
                let mut zn = z.clone();
                if cfg.optimizer == Optimizer::Adam {
                    adam.update(&mut zn, &g);
                } else {
                    zn.iter_mut().zip(&g).for_each(|(v, gv)| *v -= cfg.learning_rate * gv);
                }
                bounds.project(&mut zn);
                problem.evaluate(&zn).map(|(value, gradient)| StepResult { z: zn, value, gradient, fallback: false, evaluations: 1 })
            }
        };
        let step = match step {
            Ok(s) => s,
            Err(Error::Numeric { .. }) => {
                status = AttackStatus::Diverged;
                break;
            }
            Err(e) => return Err(e),
        };
        fallback_steps += usize::from(step.fallback);
        z = step.z;
        f = step.value;
        g = step.gradient;
        trace.rows.push(TraceRow { iteration: it, loss: f, ssim: score(&z)? });
        if cfg.snapshot_every > 0 && (it % cfg.snapshot_every == 0 || it == cfg.iterations) {
            trace.snapshots.push((it, snapshot(&z)));
        }
    }
    if status == AttackStatus::Converged && cfg.snapshot_every > 0 {
        let last = trace.rows.last().map(|r| r.iteration).unwrap_or(0);
        if trace.snapshots.last().map(|s| s.0) != Some(last) {
            trace.snapshots.push((last, snapshot(&z)));
        }
    }
    Ok(AttackOutcome { image: snapshot(&z), label: problem.label_distribution(&z), trace, status, fallback_steps, evaluations: problem.evaluations })
}
