//! Random differentiable graphs and finite-difference oracles.

use gradleak::autodiff::{DualGradientRequest, Tape, Var};
use gradleak::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub enum Step {
    AddLeaf,
    SubLeaf,
    MulLeaf,
    Scale(f64),
    Sigmoid,
    Tanh,
    Relu,
    Square,
    LogSigmoid,
    Conv { stride: usize, padding: usize },
    MaxPool,
    AvgPool,
    Flatten,
    MatMulLeaf,
    Softmax,
    LogSoftmax,
}

#[derive(Debug, Clone, Copy)]
pub enum Reduce {
    Sum,
    Mean,
    L2,
}

#[derive(Debug, Clone)]
pub struct Graph {
    pub steps: Vec<Step>,
    pub reduce: Reduce,
}

/// Leaf values: an image `[2,2,4,4]`, a shift of the same shape, a conv
/// weight `[2,2,3,3]` and a projection `[32,3]`.
pub fn leaves(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut t = |shape: Vec<usize>, s: f64| Tensor::from_fn(shape, |_| rng.random_range(-s..s));
    vec![t(vec![2, 2, 4, 4], 1.0), t(vec![2, 2, 4, 4], 1.0), t(vec![2, 2, 3, 3], 0.5), t(vec![32, 3], 0.3)]
}

pub fn apply(tape: &mut Tape, h: Var, step: Step, l: &[Var]) -> Result<Var> {
    match step {
        Step::AddLeaf => tape.add(h, l[1]),
        Step::SubLeaf => tape.sub(h, l[1]),
        Step::MulLeaf => tape.mul(h, l[1]),
        Step::Scale(s) => tape.scale(h, s),
        Step::Sigmoid => tape.sigmoid(h),
        Step::Tanh => tape.tanh(h),
        Step::Relu => tape.relu(h),
        Step::Square => tape.square(h),
        Step::LogSigmoid => {
            let s = tape.sigmoid(h)?;
            tape.log(s)
        }
        Step::Conv { stride, padding } => tape.conv2d(h, l[2], stride, padding),
        Step::MaxPool => tape.maxpool2d(h, 2),
        Step::AvgPool => tape.avgpool2d(h, 2),
        Step::Flatten => {
            let s = tape.shape(h).to_vec();
            tape.reshape(h, vec![s[0], s[1..].iter().product()])
        }
        Step::MatMulLeaf => tape.matmul(h, l[3]),
        Step::Softmax => tape.softmax(h),
        Step::LogSoftmax => tape.log_softmax(h),
    }
}

pub fn build(tape: &mut Tape, g: &Graph, values: &[Tensor]) -> Result<(Vec<Var>, Var)> {
    let l: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect::<Result<_>>()?;
    let mut h = l[0];
    for &s in &g.steps {
        h = apply(tape, h, s, &l)?;
    }
    let out = match g.reduce {
        Reduce::Sum => tape.sum(h)?,
        Reduce::Mean => tape.mean(h)?,
        Reduce::L2 => tape.l2_norm_squared(h)?,
    };
    Ok((l, out))
}

pub fn eval(g: &Graph, values: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let (_, out) = build(&mut tape, g, values).unwrap();
    tape.value(out).item()
}

/// Smallest distance of any value to a non-differentiable point of the
/// next step (relu kink, or the runner-up inside a maxpool block).
pub fn kink_margin(v: &Tensor, step: Step) -> f64 {
    match step {
        Step::Relu => v.data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs())),
        Step::MaxPool => {
            let s = v.shape();
            let (h, w) = (s[2], s[3]);
            let mut m = f64::INFINITY;
            for plane in v.data().chunks(h * w) {
                for by in 0..h / 2 {
                    for bx in 0..w / 2 {
                        let mut block: Vec<f64> = (0..4).map(|k| plane[(2 * by + k / 2) * w + 2 * bx + k % 2]).collect();
                        block.sort_by(|a, b| b.partial_cmp(a).unwrap());
                        m = m.min(block[0] - block[1]);
                    }
                }
            }
            m
        }
        _ => f64::INFINITY,
    }
}

/// Random graph of depth ≤ 6 whose steps are chosen according to the
/// running shape, avoiding steps that sit within `margin` of a kink.
pub fn random_graph(rng: &mut ChaCha8Rng, values: &[Tensor], margin: f64) -> Graph {
    let depth = rng.random_range(1..=6);
    let mut tape = Tape::new();
    let l: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone()).unwrap()).collect();
    let mut h = l[0];
    let mut steps = Vec::new();
    while steps.len() < depth {
        let shape = tape.shape(h).to_vec();
        let image = shape.len() == 4;
        let full = image && shape == [2, 2, 4, 4];
        let candidates: Vec<Step> = if image {
            let mut c = vec![Step::Scale(rng.random_range(-2.0..2.0)), Step::Sigmoid, Step::Tanh, Step::Relu, Step::Square, Step::LogSigmoid];
            if full {
                c.extend([Step::AddLeaf, Step::SubLeaf, Step::MulLeaf, Step::Conv { stride: 1, padding: 1 }, Step::Flatten]);
                c.extend([Step::MaxPool, Step::AvgPool, Step::Conv { stride: 2, padding: 1 }]);
            }
            c
        } else {
            let mut c = vec![Step::Sigmoid, Step::Tanh, Step::Square, Step::Softmax, Step::LogSoftmax, Step::Scale(0.7)];
            if shape[1] == 32 {
                c.push(Step::MatMulLeaf);
            }
            c
        };
        let step = candidates[rng.random_range(0..candidates.len())];
        if kink_margin(tape.value(h), step) < margin {
            continue;
        }
        h = apply(&mut tape, h, step, &l).unwrap();
        steps.push(step);
    }
    let reduce = [Reduce::Sum, Reduce::Mean, Reduce::L2][rng.random_range(0..3)];
    Graph { steps, reduce }
}

pub fn finite_difference(f: impl Fn(&[Tensor]) -> f64, values: &[Tensor], h: f64) -> Vec<Tensor> {
    let mut out = Vec::new();
    for (li, v) in values.iter().enumerate() {
        let mut g = Tensor::zeros(v.shape().to_vec());
        for i in 0..v.len() {
            let mut plus = values.to_vec();
            let mut minus = values.to_vec();
            plus[li].data_mut()[i] += h;
            minus[li].data_mut()[i] -= h;
            g.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Largest per-coordinate relative error, with a floor tied to the overall
/// gradient scale so coordinates that are numerically zero do not dominate.
/// The absolute floor covers objectives that are constant in their inputs
/// (e.g. the mean of a softmax), where both sides are round-off.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let scale = numeric.iter().map(|t| t.max_abs()).fold(0.0, f64::max).max(1e-3);
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let denom = x.abs().max(y.abs()).max(1e-3 * scale);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

/// Worst first-order error over `count` random graphs (FD step 1e-6).
pub fn first_order_worst(seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let values = leaves(&mut rng);
        let g = random_graph(&mut rng, &values, 1e-3);
        let mut tape = Tape::new();
        let (l, out) = build(&mut tape, &g, &values).unwrap();
        let analytic = tape.backward(out, &l).unwrap();
        let numeric = finite_difference(|v| eval(&g, v), &values, 1e-6);
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

pub fn gradient_norm(g: &Graph, values: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let (l, out) = build(&mut tape, g, values).unwrap();
    tape.backward(out, &l).unwrap().iter().map(|t| t.norm_squared()).sum()
}

/// Worst error of the derivative of the squared gradient norm, plus the
/// worst mismatch between the dual value and a separate backward pass.
pub fn second_order_worst(seed: u64, count: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut value_gap): (f64, f64) = (0.0, 0.0);
    for _ in 0..count {
        let values = leaves(&mut rng);
        let g = random_graph(&mut rng, &values, 1e-3);
        let mut tape = Tape::new();
        let (l, out) = build(&mut tape, &g, &values).unwrap();
        let req = DualGradientRequest { inner_objective: out, inner_leaves: l.clone(), outer_leaves: l.clone() };
        let dual = tape
            .grad_of_grad(&req, |t, grads| {
                let mut acc = t.l2_norm_squared(grads[0])?;
                for &gr in &grads[1..] {
                    let n = t.l2_norm_squared(gr)?;
                    acc = t.add(acc, n)?;
                }
                Ok(acc)
            })
            .unwrap();
        value_gap = value_gap.max((dual.value - gradient_norm(&g, &values)).abs() / dual.value.abs().max(1.0));
        let numeric = finite_difference(|v| gradient_norm(&g, v), &values, 1e-5);
        worst = worst.max(max_relative_error(&dual.outer, &numeric));
    }
    (worst, value_gap)
}
