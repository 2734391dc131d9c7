use gradleak::data::persist::{decode_capture, decode_params, decode_pgm, encode_capture, encode_params, encode_pgm, CsvTable};
use gradleak::data::{load_idx, parse_idx, resize, resize_nearest, synthetic_binary, synthetic_digits, ResizeMethod};
use gradleak::fedsim::{CaptureMetadata, GradientCapture, RegimeKind};
use gradleak::models::{build_custom_cnn_binary, build_victim_cnn, ParamSet};
use gradleak::{Error, Tensor};
use proptest::prelude::*;

fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
    let mut images = vec![0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 2];
    images.extend([0, 255, 51, 102, 10, 20, 30, 40, 255, 255, 0, 0]);
    let mut labels = vec![0, 0, 8, 1, 0, 0, 0, 3];
    labels.extend([7, 0, 9]);
    (images, labels)
}

#[test]
fn idx_fixture_loads() {
    let (images, labels) = idx_fixture();
    let d = parse_idx(&images, &labels).unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!((d.height(), d.width(), d.channels()), (2, 2, 1));
    assert_eq!(d.labels(), &[7, 0, 9]);
    assert_eq!(d.image(0).data(), &[0.0, 1.0, 0.2, 0.4]);
    assert_eq!(d.image(2).data(), &[1.0, 1.0, 0.0, 0.0]);

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("i"), &images).unwrap();
    std::fs::write(dir.path().join("l"), &labels).unwrap();
    let from_disk = load_idx(&dir.path().join("i"), &dir.path().join("l")).unwrap();
    assert_eq!(from_disk.images(), d.images());
    assert!(matches!(load_idx(&dir.path().join("missing"), &dir.path().join("l")), Err(Error::Io { .. })));
}

#[test]
fn idx_format_errors() {
    let (images, labels) = idx_fixture();
    let mut bad = images.clone();
    bad[3] = 0x01;
    assert!(matches!(parse_idx(&bad, &labels), Err(Error::Format { offset: 0, .. })));
    let truncated = &images[..images.len() - 3];
    match parse_idx(truncated, &labels) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, truncated.len()),
        other => panic!("{other:?}"),
    }
    let mut short = labels.clone();
    short[7] = 2;
    assert!(matches!(parse_idx(&images, &short), Err(Error::Format { .. })));
}

#[test]
fn nearest_resize_index_map() {
    // 2x2 checkerboard to 5x5: destination d reads source floor((2d + 1) * 2 / 10).
    let src = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let out = resize_nearest(&src, 5, 5).unwrap();
    let map = [0usize, 0, 1, 1, 1];
    for y in 0..5 {
        for x in 0..5 {
            assert_eq!(out.data()[y * 5 + x], src.data()[map[y] * 2 + map[x]]);
        }
    }
    let big = Tensor::from_fn(vec![28, 28], |i| (i % 7) as f64 / 6.0);
    assert_eq!(resize_nearest(&big, 28, 28).unwrap(), big);
    let flat = Tensor::full(vec![28, 28], 0.3);
    assert!(resize(&flat, 32, 32, ResizeMethod::Nearest).unwrap().data().iter().all(|&v| v == 0.3));
    assert!(resize(&flat, 32, 32, ResizeMethod::Bilinear).unwrap().data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
}

#[test]
fn synthetic_sets() {
    let a = synthetic_digits(10, 4).unwrap();
    assert_eq!(a.labels(), &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
    assert_eq!(a.images(), synthetic_digits(10, 4).unwrap().images());
    assert_ne!(a.images(), synthetic_digits(10, 5).unwrap().images());
    assert!(a.images().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let b = synthetic_binary(64, 1).unwrap();
    assert_eq!(b.classes(), 2);
    assert!(b.labels().iter().all(|&l| l < 2));
    assert!(b.images().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

fn capture_strategy() -> impl Strategy<Value = GradientCapture> {
    (
        any::<u32>(),
        any::<u32>(),
        0u8..3,
        prop::collection::vec(prop::collection::vec(any::<f64>(), 1..20), 1..5),
        prop::option::of(any::<f64>()),
        prop::option::of(-10.0f64..10.0),
    )
        .prop_map(|(round, id, tag, layers, clip, kappa)| {
            let layers = layers.into_iter().map(Tensor::vector).collect();
            let meta = CaptureMetadata { learning_rate: 0.1, clip_norm: clip, noise_multiplier: None, kappa };
            GradientCapture::new(round, id, RegimeKind::from_tag(tag).unwrap(), layers, meta)
        })
}

fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

proptest! {
    #[test]
    fn capture_round_trip_is_bit_exact(c in capture_strategy()) {
        let bytes = encode_capture(&c).unwrap();
        let back = decode_capture(&bytes).unwrap();
        prop_assert_eq!(back.round(), c.round());
        prop_assert_eq!(back.client_id(), c.client_id());
        prop_assert_eq!(back.regime(), c.regime());
        prop_assert_eq!(back.metadata().clip_norm.map(f64::to_bits), c.metadata().clip_norm.map(f64::to_bits));
        prop_assert_eq!(back.metadata().kappa, c.metadata().kappa);
        for (a, b) in back.layers().iter().zip(c.layers()) {
            prop_assert!(same_bits(a, b));
        }
        prop_assert_eq!(encode_capture(&back).unwrap(), bytes);
    }

    #[test]
    fn csv_round_trip_is_exact(values in prop::collection::vec((any::<u32>(), -1e300f64..1e300, prop::option::of(-1.0f64..1.0)), 0..30)) {
        let mut t = CsvTable::new(&["iteration", "loss", "ssim"]);
        for (i, l, s) in &values {
            t.push(vec![i.to_string(), format!("{l}"), s.map(|v| format!("{v}")).unwrap_or_default()]).unwrap();
        }
        let text = t.render();
        prop_assert!(text.ends_with('\n'));
        let back = CsvTable::parse(&text).unwrap();
        prop_assert_eq!(&back, &t);
        let losses = back.floats("loss").unwrap();
        for ((_, l, _), got) in values.iter().zip(losses) {
            prop_assert_eq!(got.unwrap().to_bits(), l.to_bits());
        }
    }

    #[test]
    fn pgm_round_trip_is_exact(levels in prop::collection::vec(any::<u8>(), 12)) {
        let img = Tensor::new(vec![3, 4], levels.iter().map(|&l| l as f64 / 255.0).collect()).unwrap();
        let bytes = encode_pgm(&img).unwrap();
        let back = decode_pgm(&bytes).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(encode_pgm(&back).unwrap(), bytes);
    }
}

#[test]
fn params_round_trip_is_bit_exact() {
    for spec in [build_victim_cnn(), build_custom_cnn_binary()] {
        let p = ParamSet::init(&spec, 99);
        let bytes = encode_params(&p).unwrap();
        let back = decode_params(&bytes).unwrap();
        assert_eq!(back, p);
        for (a, b) in back.tensors().zip(p.tensors()) {
            assert!(same_bits(a, b));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.glpar");
        gradleak::data::persist::write_bytes(&path, &bytes).unwrap();
        assert_eq!(gradleak::data::persist::read_bytes(&path).unwrap(), bytes);
    }
}

#[test]
fn corrupt_binaries_report_offsets() {
    let c = GradientCapture::new(
        1,
        2,
        RegimeKind::Standard,
        vec![Tensor::vector(vec![1.0, 2.0])],
        CaptureMetadata { learning_rate: 0.1, clip_norm: None, noise_multiplier: None, kappa: None },
    );
    let bytes = encode_capture(&c).unwrap();
    assert!(matches!(decode_capture(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_capture(&bad), Err(Error::Format { offset: 0, .. })));
    assert!(decode_pgm(b"P2\n1 1\n255\n\x00").is_err());
}
