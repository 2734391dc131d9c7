//! Box-constrained first-order and quasi-Newton optimisers over flat
//! vectors.
//!
//! L-BFGS follows the two-loop recursion and the strong-Wolfe line search
//! with cubic zoom of Nocedal and Wright, "Numerical Optimization" (2nd ed.),
//! algorithms 7.4, 3.5 and 3.6. Bounds are handled by projecting trial
//! points and zeroing direction components that push against an active
//! bound.

use std::collections::VecDeque;

use crate::error::Result;

/// A differentiable objective over a flat parameter vector.
pub trait Objective {
    fn evaluate(&mut self, z: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F> Objective for F
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn evaluate(&mut self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(z)
    }
}

/// Per-coordinate box `[lo, hi]` (infinite ends allowed).
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Bounds { lo: vec![f64::NEG_INFINITY; n], hi: vec![f64::INFINITY; n] }
    }

    pub fn project(&self, z: &mut [f64]) {
        for ((v, &lo), &hi) in z.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(lo, hi);
        }
    }

    /// Zeroes components of `d` that would leave the box from `z`.
    fn restrict(&self, z: &[f64], d: &mut [f64]) {
        for i in 0..d.len() {
            if (z[i] <= self.lo[i] && d[i] < 0.0) || (z[i] >= self.hi[i] && d[i] > 0.0) {
                d[i] = 0.0;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WolfeParams {
    pub c1: f64,
    pub c2: f64,
    pub max_trials: usize,
}

impl Default for WolfeParams {
    fn default() -> Self {
        WolfeParams { c1: 1e-4, c2: 0.9, max_trials: 20 }
    }
}

/// Minimum `sᵀy` for a curvature pair to be stored.
pub const CURVATURE_EPS: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LbfgsState {
    pub memory: usize,
    pub wolfe: WolfeParams,
    /// Step used when the line search fails.
    pub fallback_rate: f64,
    /// Initial trial step of the first iteration is `min(1, 1/‖g‖₁)` times this.
    pub initial_rate: f64,
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    iterations: usize,
}

impl LbfgsState {
    pub fn new(memory: usize, rate: f64) -> Self {
        LbfgsState {
            memory: memory.max(1),
            wolfe: WolfeParams::default(),
            fallback_rate: rate,
            initial_rate: rate,
            s: VecDeque::new(),
            y: VecDeque::new(),
            iterations: 0,
        }
    }

    pub fn history_len(&self) -> usize {
        self.s.len()
    }

    pub fn reset(&mut self) {
        self.s.clear();
        self.y.clear();
    }

    /// `-H g` from the two-loop recursion.
    pub fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let k = self.s.len();
        let mut alphas = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / dot(&self.y[i], &self.s[i]);
            alphas[i] = rho * dot(&self.s[i], &q);
            for (qv, yv) in q.iter_mut().zip(&self.y[i]) {
                *qv -= alphas[i] * yv;
            }
        }
        if let (Some(s), Some(y)) = (self.s.back(), self.y.back()) {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y), alpha) in self.s.iter().zip(&self.y).zip(alphas) {
            let beta = dot(y, &q) / dot(y, s);
            for (qv, sv) in q.iter_mut().zip(s) {
                *qv += sv * (alpha - beta);
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    fn push_pair(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        if dot(&s, &y) <= CURVATURE_EPS {
            return false;
        }
        if self.s.len() == self.memory {
            self.s.pop_front();
            self.y.pop_front();
        }
        self.s.push_back(s);
        self.y.push_back(y);
        true
    }
}

/// Result of one optimiser step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub z: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    /// The line search did not find a strong-Wolfe point.
    pub fallback: bool,
    pub evaluations: usize,
}

struct Trial {
    a: f64,
    z: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    dphi: f64,
}

struct LineSearch<'a, O: Objective> {
    obj: &'a mut O,
    bounds: &'a Bounds,
    z0: &'a [f64],
    d: &'a [f64],
    evaluations: usize,
}

impl<O: Objective> LineSearch<'_, O> {
    fn trial(&mut self, a: f64) -> Result<Trial> {
        let mut z: Vec<f64> = self.z0.iter().zip(self.d).map(|(z, d)| z + a * d).collect();
        self.bounds.project(&mut z);
        let (f, g) = self.obj.evaluate(&z)?;
        self.evaluations += 1;
        // Derivative along the projected path: clamped coordinates do not move.
        let dphi = (0..z.len())
            .filter(|&i| {
                let raw = self.z0[i] + a * self.d[i];
                raw >= self.bounds.lo[i] && raw <= self.bounds.hi[i]
            })
            .map(|i| g[i] * self.d[i])
            .sum();
        Ok(Trial { a, z, f, g, dphi })
    }
}

fn cubic_min(a: &Trial, b: &Trial) -> Option<f64> {
    let d1 = a.dphi + b.dphi - 3.0 * (a.f - b.f) / (a.a - b.a);
    let disc = d1 * d1 - a.dphi * b.dphi;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b.a - a.a).signum() * disc.sqrt();
    let t = b.a - (b.a - a.a) * (b.dphi + d2 - d1) / (b.dphi - a.dphi + 2.0 * d2);
    t.is_finite().then_some(t)
}

/// Strong-Wolfe search along `d` from `z0`. Returns the accepted trial, or
/// the best trial satisfying sufficient decrease if the curvature condition
/// was never met, or `None`.
fn strong_wolfe<O: Objective>(ls: &mut LineSearch<'_, O>, f0: f64, dphi0: f64, a_init: f64, w: WolfeParams) -> Result<(Option<Trial>, bool)> {
    let armijo = |t: &Trial| t.f <= f0 + w.c1 * t.a * dphi0;
    let curvature = |t: &Trial| t.dphi.abs() <= -w.c2 * dphi0;
    let mut best: Option<Trial> = None;
    let keep = |best: &mut Option<Trial>, t: &Trial| {
        if t.f.is_finite() && t.f <= f0 + w.c1 * t.a * dphi0 && best.as_ref().is_none_or(|b| t.f < b.f) {
            *best = Some(Trial { a: t.a, z: t.z.clone(), f: t.f, g: t.g.clone(), dphi: t.dphi });
        }
    };

    let mut prev = Trial { a: 0.0, z: ls.z0.to_vec(), f: f0, g: Vec::new(), dphi: dphi0 };
    let mut a = a_init;
    let mut bracket: Option<(Trial, Trial)> = None;
    while ls.evaluations < w.max_trials {
        let t = ls.trial(a)?;
        keep(&mut best, &t);
        if !armijo(&t) || !t.f.is_finite() || (prev.a > 0.0 && t.f >= prev.f) {
            bracket = Some((prev, t));
            break;
        }
        if curvature(&t) {
            return Ok((Some(t), false));
        }
        if t.dphi >= 0.0 {
            bracket = Some((t, prev));
            break;
        }
        a = 2.0 * t.a;
        prev = t;
    }

    // Zoom between lo (sufficient decrease, lowest value) and hi.
    if let Some((mut lo, mut hi)) = bracket {
        while ls.evaluations < w.max_trials {
            let (l, h) = (lo.a.min(hi.a), lo.a.max(hi.a));
            let width = h - l;
            let mut a = if hi.f.is_finite() { cubic_min(&lo, &hi).unwrap_or(0.5 * (l + h)) } else { 0.5 * (l + h) };
            if !(a > l + 0.1 * width && a < h - 0.1 * width) {
                a = 0.5 * (l + h);
            }
            if width <= 1e-16 * h.max(1e-300) {
                break;
            }
            let t = ls.trial(a)?;
            keep(&mut best, &t);
            if !armijo(&t) || !t.f.is_finite() || t.f >= lo.f {
                hi = t;
            } else {
                if curvature(&t) {
                    return Ok((Some(t), false));
                }
                if t.dphi * (hi.a - lo.a) >= 0.0 {
                    hi = lo;
                }
                lo = t;
            }
        }
    }
    Ok((best, true))
}

/// One L-BFGS iteration from `(z, f, g)`.
pub fn lbfgs_step<O: Objective>(state: &mut LbfgsState, obj: &mut O, bounds: &Bounds, z: &[f64], f: f64, g: &[f64]) -> Result<StepResult> {
    let mut d = state.direction(g);
    bounds.restrict(z, &mut d);
    let mut dphi0 = dot(g, &d);
    if !(dphi0 < 0.0) {
        state.reset();
        d = g.iter().map(|v| -v).collect();
        bounds.restrict(z, &mut d);
        dphi0 = dot(g, &d);
    }
    if !(dphi0 < 0.0) {
        // Stationary within the box.
        return Ok(StepResult { z: z.to_vec(), value: f, gradient: g.to_vec(), fallback: false, evaluations: 0 });
    }
    let a_init = if state.iterations == 0 {
        let l1: f64 = g.iter().map(|v| v.abs()).sum();
        state.initial_rate * (1.0f64).min(1.0 / l1)
    } else {
        1.0
    };
    state.iterations += 1;

    let mut ls = LineSearch { obj, bounds, z0: z, d: &d, evaluations: 0 };
    let (found, failed) = strong_wolfe(&mut ls, f, dphi0, a_init, state.wolfe)?;
    let mut evaluations = ls.evaluations;
    let accepted = match found {
        Some(t) => t,
        None => {
            // No sufficient decrease anywhere: plain projected gradient step.
            state.reset();
            let mut zn: Vec<f64> = z.iter().zip(g).map(|(z, g)| z - state.fallback_rate * g).collect();
            bounds.project(&mut zn);
            let (fv, gv) = obj.evaluate(&zn)?;
            evaluations += 1;
            return Ok(StepResult { z: zn, value: fv, gradient: gv, fallback: true, evaluations });
        }
    };
    let s: Vec<f64> = accepted.z.iter().zip(z).map(|(a, b)| a - b).collect();
    let y: Vec<f64> = accepted.g.iter().zip(g).map(|(a, b)| a - b).collect();
    state.push_pair(s, y);
    Ok(StepResult { z: accepted.z, value: accepted.f, gradient: accepted.g, fallback: failed, evaluations })
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    pub fn new(n: usize, rate: f64) -> Self {
        AdamState { rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// In-place bias-corrected Adam update of `z`.
    pub fn update(&mut self, z: &mut [f64], g: &[f64]) {
        self.t += 1;
        let (b1t, b2t) = (1.0 - self.beta1.powi(self.t), 1.0 - self.beta2.powi(self.t));
        for i in 0..z.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let (mh, vh) = (self.m[i] / b1t, self.v[i] / b2t);
            z[i] -= self.rate * mh / (vh.sqrt() + self.eps);
        }
    }
}
