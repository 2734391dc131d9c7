use std::path::Path;
use std::process::{Command, Output};

fn gradleak(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradleak")).args(args).env_remove("GRADLEAK_MNIST_DIR").output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn manifest_lists(dir: &Path, names: &[&str]) {
    let m = std::fs::read_to_string(dir.join("manifest.txt")).unwrap();
    assert!(m.contains("[config]"));
    for n in names {
        let line = m.lines().find(|l| l.ends_with(&format!("  {n}"))).unwrap_or_else(|| panic!("{n} missing from manifest"));
        assert_eq!(line.split_whitespace().next().unwrap().len(), 64);
    }
}

const SHORT_ATTACK: &str = "[attack]\niterations = 12\nsnapshot_every = 5\n";

#[test]
fn attack_writes_outputs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT_ATTACK);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = gradleak(&["attack", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["trace.csv", "loss.svg", "ssim.svg", "recon_0000.pgm", "recon_0005.pgm", "recon_0012.pgm", "manifest.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let trace = std::fs::read_to_string(a.join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,loss,ssim\n"));
    assert_eq!(trace.lines().count(), 14);
    manifest_lists(&a, &["trace.csv", "loss.svg", "recon_0012.pgm"]);
}

#[test]
fn zero_iterations_fail_with_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[attack]\niterations = 0\n");
    let o = gradleak(&["attack", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("attack.iterations"));
}

#[test]
fn unknown_keys_and_conflicting_noise_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nepochz = 3\n");
    assert!(!gradleak(&["train", "--config", &cfg]).status.success());
    let cfg = write_config(dir.path(), "[experiment]\nregime = \"dp-sgd\"\n[dp]\nnoise_multiplier = 1.0\ntarget_epsilon = 8.0\n");
    let o = gradleak(&["attack", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("dp.noise_multiplier"));
}

#[test]
fn missing_mnist_directory_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data]\nsynthetic = false\n");
    let o = gradleak(&["attack", "--config", &cfg, "--mnist-dir", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("data.mnist_dir"));
}

#[test]
fn diverged_attack_still_exits_zero() {
    // A huge DP noise level makes the capture enormous but finite; the run
    // must complete with a status either way.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[experiment]\nregime = \"dp-sgd\"\n[dp]\nnoise_multiplier = 1e150\n[attack]\niterations = 3\n");
    let out = dir.path().join("o");
    let o = gradleak(&["attack", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("trace.csv").exists());
}

#[test]
fn accountant_and_audit_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg =
        write_config(dir.path(), "[dp]\ntarget_epsilon = 8.0\n[audit]\ntrials = 2000\nmechanisms = [\"randomized-response\", \"gaussian\"]\nsigmas = [2.0]\n");
    let acc = dir.path().join("acc");
    let o = gradleak(&["accountant", "--config", &cfg, "--out", acc.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    let eps: f64 = stdout.split("epsilon ").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
    assert!((eps - 8.0).abs() < 0.01, "{stdout}");
    manifest_lists(&acc, &["accountant.csv", "rdp.csv"]);

    let aud = dir.path().join("aud");
    let o = gradleak(&["audit", "--config", &cfg, "--out", aud.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(aud.join("audit.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().skip(1).all(|l| l.contains(",true,")));
}

#[test]
fn sweep_is_independent_of_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[dp]\ntarget_epsilon = 8.0\n[attack]\niterations = 4\nsnapshot_every = 0\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(gradleak(&["sweep", "--config", &cfg, "--runs", "2", "--jobs", "1", "--out", a.to_str().unwrap()]).status.success());
    assert!(gradleak(&["sweep", "--config", &cfg, "--runs", "2", "--jobs", "3", "--out", b.to_str().unwrap()]).status.success());
    let sa = std::fs::read_to_string(a.join("sweep.csv")).unwrap();
    assert_eq!(sa, std::fs::read_to_string(b.join("sweep.csv")).unwrap());
    assert_eq!(sa.lines().count(), 7);
    assert!(a.join("pdp-sgd/trace.csv").exists());
}

#[test]
fn train_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data]\ntrain_samples = 40\ntest_samples = 20\n[train]\nmax_epochs = 2\n");
    let out = dir.path().join("t");
    let o = gradleak(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(m.starts_with("metric,value\n"));
    assert!(m.contains("accuracy,"));
    manifest_lists(&out, &["epochs.csv", "metrics.csv", "loss.svg"]);
    assert!(std::fs::read_to_string(out.join("manifest.txt")).unwrap().contains("seed = 3"));
}
