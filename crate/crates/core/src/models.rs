//! Victim architectures, parameter sets and losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower/upper clamp applied to probabilities inside the BCE loss.
pub const BCE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, activation: Activation },
    MaxPool2d { size: usize },
    AvgPool2d { size: usize },
    Flatten,
    Linear { in_features: usize, out_features: usize, activation: Activation },
}

/// How the network output is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// Raw logits, scored with softmax cross-entropy.
    Logits,
    /// A single probability (sigmoid already applied), scored with BCE.
    Probability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input: InputShape,
    pub layers: Vec<Layer>,
    pub classes: usize,
    pub head: Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ModelSpec {
    /// Checks that consecutive layer shapes chain and that the output width
    /// matches the head.
    pub fn validate(&self) -> Result<()> {
        let out = self.output_width()?;
        let expected = match self.head {
            Head::Logits => self.classes,
            Head::Probability => 1,
        };
        if out != expected {
            return Err(Error::contract(format!("{}: output width {out} does not match head expecting {expected}", self.name)));
        }
        Ok(())
    }

    fn output_width(&self) -> Result<usize> {
        let mut shape = Shape::Image { c: self.input.channels, h: self.input.height, w: self.input.width };
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::contract(format!("{} layer {i}: {msg}", self.name));
            shape = match (*layer, shape) {
                (Layer::Conv2d { in_channels, out_channels, kernel, stride, padding, .. }, Shape::Image { c, h, w }) => {
                    if c != in_channels || stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(bad(format!("conv expects {in_channels} channels, got {c}x{h}x{w}")));
                    }
                    Shape::Image { c: out_channels, h: (h + 2 * padding - kernel) / stride + 1, w: (w + 2 * padding - kernel) / stride + 1 }
                }
                (Layer::MaxPool2d { size } | Layer::AvgPool2d { size }, Shape::Image { c, h, w }) => {
                    if size == 0 || h % size != 0 || w % size != 0 {
                        return Err(bad(format!("pool size {size} does not divide {h}x{w}")));
                    }
                    Shape::Image { c, h: h / size, w: w / size }
                }
                (Layer::Flatten, Shape::Image { c, h, w }) => Shape::Flat(c * h * w),
                (Layer::Linear { in_features, out_features, .. }, Shape::Flat(n)) => {
                    if n != in_features {
                        return Err(bad(format!("linear expects {in_features} features, got {n}")));
                    }
                    Shape::Flat(out_features)
                }
                (l, s) => return Err(bad(format!("{l:?} cannot follow shape {s:?}"))),
            };
        }
        match shape {
            Shape::Flat(n) => Ok(n),
            Shape::Image { .. } => Err(Error::contract(format!("{}: network must end flat", self.name))),
        }
    }

    /// Parameter names, shapes and fan-in, in serialization order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv2d { in_channels, out_channels, kernel, .. } => {
                    let fan_in = in_channels * kernel * kernel;
                    out.push((format!("layer{i}.conv.weight"), vec![out_channels, in_channels, kernel, kernel], fan_in));
                    out.push((format!("layer{i}.conv.bias"), vec![out_channels], fan_in));
                }
                Layer::Linear { in_features, out_features, .. } => {
                    out.push((format!("layer{i}.linear.weight"), vec![out_features, in_features], in_features));
                    out.push((format!("layer{i}.linear.bias"), vec![out_features], in_features));
                }
                _ => {}
            }
        }
        out
    }

    pub fn parameter_shapes(&self) -> Vec<Vec<usize>> {
        self.parameter_layout().into_iter().map(|(_, s, _)| s).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    pub fn input_len(&self) -> usize {
        self.input.channels * self.input.height * self.input.width
    }
}

/// Four sigmoid convolutions (1→8→16→32→32, 3×3) and a linear classifier
/// over ten digit classes, for 32×32 grayscale input.
pub fn build_victim_cnn() -> ModelSpec {
    let conv = |in_channels, out_channels, stride| Layer::Conv2d { in_channels, out_channels, kernel: 3, stride, padding: 1, activation: Activation::Sigmoid };
    let spec = ModelSpec {
        name: "victim-cnn".into(),
        input: InputShape { channels: 1, height: 32, width: 32 },
        layers: vec![
            conv(1, 8, 2),
            conv(8, 16, 2),
            conv(16, 32, 1),
            conv(32, 32, 2),
            Layer::Flatten,
            Layer::Linear { in_features: 32 * 4 * 4, out_features: 10, activation: Activation::Identity },
        ],
        classes: 10,
        head: Head::Logits,
    };
    debug_assert!(spec.validate().is_ok());
    spec
}

/// Two relu convolutions with max pooling followed by two linear layers and
/// a single sigmoid output, for binary classification of 32×32 images.
pub fn build_custom_cnn_binary() -> ModelSpec {
    let spec = ModelSpec {
        name: "custom-cnn".into(),
        input: InputShape { channels: 1, height: 32, width: 32 },
        layers: vec![
            Layer::Conv2d { in_channels: 1, out_channels: 4, kernel: 3, stride: 1, padding: 1, activation: Activation::Relu },
            Layer::MaxPool2d { size: 2 },
            Layer::Conv2d { in_channels: 4, out_channels: 8, kernel: 3, stride: 1, padding: 1, activation: Activation::Relu },
            Layer::MaxPool2d { size: 2 },
            Layer::Flatten,
            Layer::Linear { in_features: 8 * 8 * 8, out_features: 16, activation: Activation::Relu },
            Layer::Linear { in_features: 16, out_features: 1, activation: Activation::Sigmoid },
        ],
        classes: 2,
        head: Head::Probability,
    };
    debug_assert!(spec.validate().is_ok());
    spec
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Model parameters in layer order. The order is the serialization order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<NamedTensor>,
}

impl ParamSet {
    pub fn new(entries: Vec<NamedTensor>) -> Self {
        ParamSet { entries }
    }

    /// Uniform initialisation in ±1/√fan_in from a seeded stream.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = spec
            .parameter_layout()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let tensor = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
                NamedTensor { name, tensor }
            })
            .collect();
        ParamSet { entries }
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|e| &e.tensor)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors().map(|t| t.shape().to_vec()).collect()
    }

    pub fn matches(&self, spec: &ModelSpec) -> bool {
        self.shapes() == spec.parameter_shapes()
    }

    /// Same names and shapes with replaced values.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != self.entries.len() {
            return Err(Error::contract(format!("expected {} tensors, got {}", self.entries.len(), tensors.len())));
        }
        let entries = self
            .entries
            .iter()
            .zip(tensors)
            .map(|(e, t)| {
                if e.tensor.shape() != t.shape() {
                    return Err(Error::Dimension { op: "with_tensors", shapes: vec![e.tensor.shape().to_vec(), t.shape().to_vec()] });
                }
                Ok(NamedTensor { name: e.name.clone(), tensor: t })
            })
            .collect::<Result<_>>()?;
        Ok(ParamSet { entries })
    }

    /// `self - lr * grads`, elementwise.
    pub fn sgd_update(&self, grads: &[Tensor], lr: f64) -> Result<Self> {
        let updated = self.tensors().zip(grads).map(|(p, g)| p.zip_map(g, |a, b| a - lr * b)).collect::<Result<Vec<_>>>()?;
        self.with_tensors(updated)
    }

    /// Registers every tensor on the tape, as differentiable leaves or as
    /// constants.
    pub fn bind(&self, tape: &mut Tape, as_leaves: bool) -> Result<Vec<Var>> {
        self.tensors().map(|t| if as_leaves { tape.leaf(t.clone()) } else { tape.constant(t.clone()) }).collect()
    }
}

/// Result of a network forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub output: Var,
    /// Input activation of each affine layer (conv or linear), in order.
    pub affine_inputs: Vec<Var>,
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Identity => Ok(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Relu => tape.relu(x),
    }
}

/// Runs the network on `x: [N, C, H, W]` with parameters bound on `tape`.
pub fn forward(tape: &mut Tape, spec: &ModelSpec, params: &[Var], x: Var) -> Result<Forward> {
    let mut h = x;
    let mut p = params.iter().copied();
    let mut next = || p.next().ok_or_else(|| Error::contract("too few parameters for model"));
    let mut affine_inputs = Vec::new();
    for layer in &spec.layers {
        h = match *layer {
            Layer::Conv2d { stride, padding, activation, .. } => {
                let (w, b) = (next()?, next()?);
                affine_inputs.push(h);
                let y = tape.conv2d(h, w, stride, padding)?;
                let shape = tape.shape(y).to_vec();
                let bb = tape.broadcast_axis(b, shape, 1)?;
                let y = tape.add(y, bb)?;
                activate(tape, y, activation)?
            }
            Layer::MaxPool2d { size } => tape.maxpool2d(h, size)?,
            Layer::AvgPool2d { size } => tape.avgpool2d(h, size)?,
            Layer::Flatten => {
                let s = tape.shape(h).to_vec();
                tape.reshape(h, vec![s[0], s[1..].iter().product()])?
            }
            Layer::Linear { activation, .. } => {
                let (w, b) = (next()?, next()?);
                affine_inputs.push(h);
                let wt = tape.transpose(w)?;
                let y = tape.matmul(h, wt)?;
                let shape = tape.shape(y).to_vec();
                let bb = tape.broadcast_axis(b, shape, 1)?;
                let y = tape.add(y, bb)?;
                activate(tape, y, activation)?
            }
        };
    }
    Ok(Forward { output: h, affine_inputs })
}

/// Mean softmax cross-entropy between `logits: [N, C]` and target
/// distributions `target: [N, C]`.
pub fn cross_entropy_on_tape(tape: &mut Tape, logits: Var, target: Var) -> Result<Var> {
    let n = tape.shape(logits)[0] as f64;
    let ls = tape.log_softmax(logits)?;
    let prod = tape.mul(target, ls)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / n)
}

/// Mean binary cross-entropy between probabilities and 0/1 labels of the
/// same shape. Probabilities are clamped to `[ε, 1−ε]`.
pub fn bce_on_tape(tape: &mut Tape, probs: Var, labels: Var) -> Result<Var> {
    let p = tape.clamp(probs, BCE_EPSILON, 1.0 - BCE_EPSILON)?;
    let log_p = tape.log(p)?;
    let one_minus_p = tape.affine(p, -1.0, 1.0)?;
    let log_q = tape.log(one_minus_p)?;
    let one_minus_y = tape.affine(labels, -1.0, 1.0)?;
    let a = tape.mul(labels, log_p)?;
    let b = tape.mul(one_minus_y, log_q)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    tape.neg(m)
}

/// Target tensor for the model head: one-hot `[N, classes]` for logits,
/// `[N, 1]` 0/1 labels for a probability head.
pub fn target_tensor(spec: &ModelSpec, labels: &[usize]) -> Result<Tensor> {
    for &l in labels {
        if l >= spec.classes {
            return Err(Error::contract(format!("label {l} out of range for {} classes", spec.classes)));
        }
    }
    match spec.head {
        Head::Logits => {
            let c = spec.classes;
            let mut data = vec![0.0; labels.len() * c];
            for (i, &l) in labels.iter().enumerate() {
                data[i * c + l] = 1.0;
            }
            Tensor::new(vec![labels.len(), c], data)
        }
        Head::Probability => Tensor::new(vec![labels.len(), 1], labels.iter().map(|&l| l as f64).collect()),
    }
}

/// Loss of the model head given a target tensor already on the tape.
pub fn head_loss(tape: &mut Tape, spec: &ModelSpec, output: Var, target: Var) -> Result<Var> {
    match spec.head {
        Head::Logits => cross_entropy_on_tape(tape, output, target),
        Head::Probability => bce_on_tape(tape, output, target),
    }
}

/// Plain-value BCE over a batch. Labels must be exactly 0 or 1.
pub fn bce_loss(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::Dimension { op: "bce_loss", shapes: vec![vec![predictions.len()], vec![labels.len()]] });
    }
    let mut total = 0.0;
    for (&p, &y) in predictions.iter().zip(labels) {
        if y != 0.0 && y != 1.0 {
            return Err(Error::contract(format!("BCE label {y} is not 0 or 1")));
        }
        let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
        total += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    Ok(total / predictions.len() as f64)
}

/// Plain-value softmax cross-entropy for one row of logits.
pub fn cross_entropy_loss(logits: &[f64], class: usize) -> Result<f64> {
    if class >= logits.len() {
        return Err(Error::contract(format!("class {class} out of range for {} logits", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("cross_entropy_loss logits"));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[class])
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    crate::autodiff::kernels::softmax_rows(logits, logits.len())
}

/// Evaluates the network without recording gradients.
pub fn predict(spec: &ModelSpec, params: &ParamSet, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false)?;
    let x = tape.constant(images.clone())?;
    let f = forward(&mut tape, spec, &p, x)?;
    Ok(tape.value(f.output).clone())
}

/// Loss value and parameter gradients for one batch.
pub fn loss_and_gradients(spec: &ModelSpec, params: &ParamSet, images: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true)?;
    let x = tape.constant(images.clone())?;
    let target = tape.constant(target_tensor(spec, labels)?)?;
    let f = forward(&mut tape, spec, &p, x)?;
    let loss = head_loss(&mut tape, spec, f.output, target)?;
    let grads = tape.backward(loss, &p)?;
    Ok((tape.value(loss).item(), grads))
}

/// Predicted class per row of a network output.
pub fn classify(spec: &ModelSpec, output: &Tensor) -> Vec<usize> {
    match spec.head {
        Head::Probability => output.data().iter().map(|&p| usize::from(p >= 0.5)).collect(),
        Head::Logits => output
            .data()
            .chunks(spec.classes)
            .map(|row| row.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0)
            .collect(),
    }
}

/// Random inputs in [0, 1) for shape checks and tests.
pub fn random_images(spec: &ModelSpec, batch: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![batch, spec.input.channels, spec.input.height, spec.input.width], |_| rng.random::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn victim_parameter_count() {
        // (k·k·c_in·c_out + c_out) per conv, then flatten·10 + 10.
        let convs = [(1, 8), (8, 16), (16, 32), (32, 32)];
        let expected: usize = convs.iter().map(|(ci, co)| 9 * ci * co + co).sum::<usize>() + 512 * 10 + 10;
        let spec = build_victim_cnn();
        assert_eq!(spec.parameter_count(), expected);
        assert_eq!(expected, 20266);
    }

    #[test]
    fn victim_forward_shapes() {
        let spec = build_victim_cnn();
        let params = ParamSet::init(&spec, 7);
        let out = predict(&spec, &params, &Tensor::zeros(vec![1, 1, 32, 32])).unwrap();
        assert!(out.is_finite());
        let out = predict(&spec, &params, &random_images(&spec, 8, 1)).unwrap();
        assert_eq!(out.shape(), &[8, 10]);
    }

    #[test]
    fn custom_cnn_shapes() {
        let spec = build_custom_cnn_binary();
        assert!(spec.validate().is_ok());
        let params = ParamSet::init(&spec, 3);
        assert!(params.matches(&spec));
        let out = predict(&spec, &params, &Tensor::zeros(vec![1, 1, 32, 32])).unwrap();
        assert!(out.is_finite());
        let out = predict(&spec, &params, &random_images(&spec, 5, 2)).unwrap();
        assert_eq!(out.shape(), &[5, 1]);
        assert!(out.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn broken_chain_is_rejected() {
        let mut spec = build_victim_cnn();
        spec.layers[1] = Layer::Conv2d { in_channels: 4, out_channels: 16, kernel: 3, stride: 2, padding: 1, activation: Activation::Sigmoid };
        assert!(spec.validate().is_err());
        let mut spec = build_victim_cnn();
        spec.classes = 5;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn bce_known_values() {
        assert!((bce_loss(&[0.5], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() <= 1e-11);
        assert!(matches!(bce_loss(&[0.5], &[0.5]), Err(Error::Contract(_))));
    }

    #[test]
    fn bce_batch_matches_loop() {
        let preds = [0.1, 0.8, 0.35, 0.99, 0.5];
        let labels = [0.0, 1.0, 1.0, 0.0, 1.0];
        let mut naive = 0.0;
        for i in 0..preds.len() {
            let (p, y): (f64, f64) = (preds[i], labels[i]);
            naive -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        naive /= preds.len() as f64;
        assert!((bce_loss(&preds, &labels).unwrap() - naive).abs() < 1e-14);

        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![5, 1], preds.to_vec()).unwrap()).unwrap();
        let y = tape.constant(Tensor::new(vec![5, 1], labels.to_vec()).unwrap()).unwrap();
        let l = bce_on_tape(&mut tape, p, y).unwrap();
        assert!((tape.value(l).item() - naive).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_known_values() {
        assert!((cross_entropy_loss(&[0.0; 10], 3).unwrap() - 10f64.ln()).abs() < 1e-15);
        let mut extreme = vec![0.0; 10];
        extreme[4] = 100.0;
        assert!(cross_entropy_loss(&extreme, 4).unwrap() < 1e-40);
        assert!(matches!(cross_entropy_loss(&[0.0; 10], 10), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits = [0.3, -1.2, 2.5, 0.0, 0.7];
        let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        let direct = -(logits[2].exp() / z).ln();
        assert!((cross_entropy_loss(&logits, 2).unwrap() - direct).abs() < 1e-14);

        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::new(vec![1, 5], logits.to_vec()).unwrap()).unwrap();
        let t = tape.constant(Tensor::new(vec![1, 5], vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap()).unwrap();
        let ce = cross_entropy_on_tape(&mut tape, l, t).unwrap();
        assert!((tape.value(ce).item() - direct).abs() < 1e-14);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = softmax(&[1.0, 2.0, 3.0, -50.0, 700.0]);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = build_victim_cnn();
        assert_eq!(ParamSet::init(&spec, 5), ParamSet::init(&spec, 5));
        assert_ne!(ParamSet::init(&spec, 5), ParamSet::init(&spec, 6));
        let p = ParamSet::init(&spec, 5);
        for ((_, _, fan_in), t) in spec.parameter_layout().iter().zip(p.tensors()) {
            assert!(t.max_abs() <= 1.0 / (*fan_in as f64).sqrt());
        }
    }
}
