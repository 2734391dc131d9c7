use gradleak::attack::{infer_label, reconstruction_loss, run_attack, AttackConfig, AttackStatus, LabelSpec, MatchingObjective};
use gradleak::data::synthetic_digits;
use gradleak::fedsim::{local_update, CaptureMetadata, ClientState, GradientCapture, Regime, RegimeKind};
use gradleak::models::{build_victim_cnn, loss_and_gradients, random_images, ModelSpec, ParamSet};
use gradleak::{dp::PdpConfig, Tensor};

fn capture_for(spec: &ModelSpec, params: &ParamSet, image: &Tensor, label: usize, regime: Regime) -> GradientCapture {
    let client = ClientState { id: 0, images: image.clone(), labels: vec![label], learning_rate: 0.1, regime, noise_seed: 11 };
    local_update(&client, spec, params, 0).unwrap().1
}

fn one_hot(c: usize) -> Vec<f64> {
    let mut v = vec![0.0; 10];
    v[c] = 1.0;
    v
}

#[test]
fn true_input_matches_exactly() {
    let spec = build_victim_cnn();
    let params = ParamSet::init(&spec, 0);
    let data = synthetic_digits(4, 3).unwrap();
    for i in 0..4 {
        let x = data.batch_nchw(&[i]).unwrap();
        let y = data.labels()[i];
        for regime in [Regime::Standard, Regime::PdpSgd(PdpConfig::from_noise(0.1, 0.1).unwrap())] {
            let cap = capture_for(&spec, &params, &x, y, regime);
            let d = reconstruction_loss(&spec, &params, &cap, &x, &LabelSpec::Fixed(one_hot(y)), 0.0).unwrap();
            assert!(d <= 1e-12, "sample {i}: {d}");
        }
    }
}

#[test]
fn loss_equals_naive_layer_loop() {
    let spec = build_victim_cnn();
    let params = ParamSet::init(&spec, 4);
    let data = synthetic_digits(2, 9).unwrap();
    let cap = capture_for(&spec, &params, &data.batch_nchw(&[1]).unwrap(), data.labels()[1], Regime::Standard);
    let seed = random_images(&spec, 1, 21);
    let d = reconstruction_loss(&spec, &params, &cap, &seed, &LabelSpec::Fixed(one_hot(6)), 0.0).unwrap();

    let (_, g) = loss_and_gradients(&spec, &params, &seed, &[6]).unwrap();
    let mut naive = 0.0;
    for (layer, c) in g.iter().zip(cap.layers()) {
        for j in 0..layer.len() {
            let diff = layer.data()[j] - c.data()[j];
            naive += diff * diff;
        }
    }
    assert!((d - naive).abs() <= 1e-12 * naive.max(1.0), "{d} vs {naive}");
}

#[test]
fn output_term_adds_alpha_weighted_distance() {
    let spec = build_victim_cnn();
    let params = ParamSet::init(&spec, 4);
    let data = synthetic_digits(1, 9).unwrap();
    let cap = capture_for(&spec, &params, &data.batch_nchw(&[0]).unwrap(), 0, Regime::Standard);
    let seed = random_images(&spec, 1, 2);
    let label = LabelSpec::Fixed(one_hot(2));
    let d0 = reconstruction_loss(&spec, &params, &cap, &seed, &label, 0.0).unwrap();
    let d1 = reconstruction_loss(&spec, &params, &cap, &seed, &label, 0.5).unwrap();
    let probs = gradleak::models::softmax(gradleak::models::predict(&spec, &params, &seed).unwrap().data());
    let dist: f64 = probs.iter().zip(one_hot(2)).map(|(p, t)| (p - t) * (p - t)).sum();
    assert!((d1 - d0 - 0.5 * dist).abs() < 1e-12 * d1.max(1.0));
}

#[test]
fn image_gradient_matches_finite_differences() {
    let spec = build_victim_cnn();
    let params = ParamSet::init(&spec, 0);
    let data = synthetic_digits(1, 1).unwrap();
    let cap = capture_for(&spec, &params, &data.batch_nchw(&[0]).unwrap(), 0, Regime::Standard);
    let obj = MatchingObjective::for_capture(&spec, &params, &cap, 0.1, true).unwrap();
    let x = random_images(&spec, 1, 5);
    let logits = vec![0.3, -0.2, 0.1, 0.0, 0.5, -0.4, 0.2, 0.05, -0.1, 0.15];
    let v = obj.evaluate(&x, &LabelSpec::Logits(logits.clone())).unwrap();
    // The objective is O(100) at a random seed, so smaller steps drown in round-off.
    let h = 1e-4;
    let eval = |x: &Tensor, l: &[f64]| obj.evaluate(x, &LabelSpec::Logits(l.to_vec())).unwrap().loss;
    let central = |p: usize| {
        let mut xp = x.clone();
        xp.data_mut()[p] += h;
        let mut xm = x.clone();
        xm.data_mut()[p] -= h;
        (eval(&xp, &logits) - eval(&xm, &logits)) / (2.0 * h)
    };
    // Relative error of the sampled sub-vector in the 2-norm.
    let (mut err, mut norm) = (0.0, 0.0);
    for p in (0..1024).step_by(37) {
        let an = v.grad_image.data()[p];
        err += (central(p) - an).powi(2);
        norm += an * an;
    }
    assert!((err / norm).sqrt() < 1e-3, "relative error {}", (err / norm).sqrt());
    let gl = v.grad_logits.unwrap();
    for k in 0..10 {
        let (mut lp, mut lm) = (logits.clone(), logits.clone());
        lp[k] += h;
        lm[k] -= h;
        let fd = (eval(&x, &lp) - eval(&x, &lm)) / (2.0 * h);
        let rel = (fd - gl[k]).abs() / gl[k].abs().max(fd.abs()).max(1e-8);
        assert!(rel < 1e-3, "logit {k}: analytic {} numeric {fd}", gl[k]);
    }
}

#[test]
fn label_inference_on_clean_captures() {
    let spec = build_victim_cnn();
    let data = synthetic_digits(20, 17).unwrap();
    for i in 0..20 {
        let params = ParamSet::init(&spec, i as u64);
        let cap = capture_for(&spec, &params, &data.batch_nchw(&[i]).unwrap(), data.labels()[i], Regime::Standard);
        let got = infer_label(&cap, &spec).unwrap();
        assert_eq!(got.class, data.labels()[i]);
        assert!(!got.tie);
    }
}

#[test]
fn zero_capture_infers_first_class_with_tie() {
    let spec = build_victim_cnn();
    let layers = spec.parameter_shapes().into_iter().map(Tensor::zeros).collect();
    let meta = CaptureMetadata { learning_rate: 0.1, clip_norm: None, noise_multiplier: None, kappa: None };
    let cap = GradientCapture::new(0, 0, RegimeKind::Standard, layers, meta);
    let got = infer_label(&cap, &spec).unwrap();
    assert_eq!((got.class, got.tie), (0, true));
}

fn short_attack() -> (ModelSpec, ParamSet, GradientCapture, Tensor) {
    let spec = build_victim_cnn();
    let params = ParamSet::init(&spec, 0);
    let data = synthetic_digits(4, 7).unwrap();
    let cap = capture_for(&spec, &params, &data.batch_nchw(&[3]).unwrap(), data.labels()[3], Regime::Standard);
    (spec, params, cap, data.image(3))
}

#[test]
fn attack_is_deterministic_and_descends() {
    let (spec, params, cap, gt) = short_attack();
    let cfg = AttackConfig { iterations: 30, ..Default::default() };
    let a = run_attack(&spec, &params, &cap, &cfg, Some(&gt)).unwrap();
    let b = run_attack(&spec, &params, &cap, &cfg, Some(&gt)).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.image, b.image);
    assert_eq!(a.trace.rows.len(), 31);
    assert_eq!(a.fallback_steps, 0);
    for w in a.trace.rows.windows(2) {
        assert!(w[1].loss <= w[0].loss, "{:?}", w);
    }
    assert!(a.image.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    assert_eq!(a.trace.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 20, 30]);
}

#[test]
fn infer_mode_and_other_optimizers_run() {
    let (spec, params, cap, gt) = short_attack();
    for opt in [gradleak::attack::Optimizer::Adam, gradleak::attack::Optimizer::Gd] {
        let cfg = AttackConfig { iterations: 5, optimizer: opt, learning_rate: 0.01, label_mode: gradleak::attack::LabelMode::Infer, ..Default::default() };
        let out = run_attack(&spec, &params, &cap, &cfg, Some(&gt)).unwrap();
        assert_eq!(out.label_index(), 3);
        assert_eq!(out.trace.rows.len(), 6);
    }
}

#[test]
fn degenerate_inputs() {
    let (spec, params, cap, _) = short_attack();
    let cfg = AttackConfig { iterations: 0, ..Default::default() };
    assert!(run_attack(&spec, &params, &cap, &cfg, None).is_err());

    let mut layers = cap.layers().to_vec();
    layers[0].data_mut()[0] = f64::INFINITY;
    let bad = GradientCapture::new(0, 0, RegimeKind::Standard, layers, *cap.metadata());
    let out = run_attack(&spec, &params, &bad, &AttackConfig { iterations: 3, ..Default::default() }, None).unwrap();
    assert_eq!(out.status, AttackStatus::Diverged);

    let wrong = GradientCapture::new(0, 0, RegimeKind::Standard, cap.layers()[..2].to_vec(), *cap.metadata());
    assert!(run_attack(&spec, &params, &wrong, &AttackConfig::default(), None).is_err());
}

#[test]
fn threshold_stops_early() {
    let (spec, params, cap, _) = short_attack();
    let cfg = AttackConfig { iterations: 50, threshold: 1e-2, ..Default::default() };
    let out = run_attack(&spec, &params, &cap, &cfg, None).unwrap();
    assert_eq!(out.status, AttackStatus::Converged);
    assert!(out.trace.rows.len() < 51);
    assert!(out.trace.final_loss().unwrap() < 1e-2);
}
