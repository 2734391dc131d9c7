//! Experiment pipelines: classification training, the interception attack,
//! the privacy audit and accountant reports. Every pipeline can write its
//! outputs plus a `manifest.txt` into an output directory.

pub mod config;
pub mod plot;
pub mod train;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::accountant::{compose_and_convert, epsilon_for, PrivacyBudget};
use crate::attack::{infer_label, run_attack, AttackOutcome, AttackStatus};
use crate::data::persist::{encode_capture, encode_pgm, fmt_f64, fmt_opt, CsvTable};
use crate::data::{load_idx, synthetic_binary, synthetic_digits, Dataset, Split};
use crate::dp::{empirical_dp_audit, AuditConfig, GaussianMechanism, Mechanism, RandomizedResponse, SubsampledGaussian};
use crate::error::{Error, Result};
use crate::fedsim::{local_update, ClientState, GradientCapture, Regime, RegimeKind};
use crate::metrics::{ClassificationMetrics, ConfusionMatrix};
use crate::models::{build_custom_cnn_binary, build_victim_cnn, ParamSet};

use config::{AuditMechanism, MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS};
pub use config::{ExperimentConfig, STABLE_MODEL_SEED};
use plot::{LinePlot, Series};
use train::{evaluate, parity_dataset, train_classifier, TrainOptions, TrainOutcome};

/// Side length every image is brought to.
pub const IMAGE_SIZE: usize = 32;

/// `sha256("blob <len>\0" ‖ content)`, the object hash git uses in its
/// SHA-256 mode.
pub fn git_blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

/// Collects files written into one output directory.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: Vec<(String, String)>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(OutputDir { root: root.to_path_buf(), files: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.retain(|(n, _)| n != name);
        self.files.push((name.to_string(), git_blob_hash(bytes)));
        Ok(())
    }

    pub fn write_csv(&mut self, name: &str, table: &CsvTable) -> Result<()> {
        self.write(name, table.render().as_bytes())
    }

    /// Writes `manifest.txt`: the command, the resolved config and one
    /// `hash  name` line per output, sorted by name.
    pub fn finish(mut self, command: &str, cfg: &ExperimentConfig) -> Result<PathBuf> {
        self.files.sort();
        let mut m = String::new();
        let _ = writeln!(m, "command = {command}");
        let _ = writeln!(m, "hash = sha256 git-blob");
        let _ = writeln!(m, "\n[config]\n{}", cfg.to_toml());
        let _ = writeln!(m, "[outputs]");
        for (name, hash) in &self.files {
            let _ = writeln!(m, "{hash}  {name}");
        }
        let path = self.root.join("manifest.txt");
        std::fs::write(&path, m).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// The first `n` digit images at 32×32, from MNIST files or generated.
pub fn load_digits(cfg: &ExperimentConfig, n: usize) -> Result<Dataset> {
    if cfg.data.synthetic {
        return synthetic_digits(n, cfg.experiment.data_seed);
    }
    let dir = cfg.mnist_dir().ok_or_else(|| Error::config("data.mnist_dir", "not set"))?;
    let all = load_idx(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS))?;
    if all.len() < n {
        return Err(Error::config("data.train_samples", format!("MNIST provides only {} samples", all.len())));
    }
    let idx: Vec<usize> = (0..n).collect();
    all.subset(&idx, Split::Full)?.resized(IMAGE_SIZE, IMAGE_SIZE, cfg.data.resize)
}

fn regime_noise(regime: &Regime) -> Option<f64> {
    match regime {
        Regime::DpSgd { noise_multiplier, .. } => Some(*noise_multiplier),
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct ClassificationReport {
    pub regime: RegimeKind,
    pub noise_multiplier: Option<f64>,
    pub kappa: Option<f64>,
    /// ε spent by the epochs actually run (DP-SGD only).
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub training: TrainOutcome,
    pub confusion: ConfusionMatrix,
    pub metrics: ClassificationMetrics,
}

impl ClassificationReport {
    pub fn metrics_csv(&self) -> Result<CsvTable> {
        let mut t = CsvTable::new(&["metric", "value"]);
        let m = &self.metrics;
        let rows: Vec<(&str, String)> = vec![
            ("regime", self.regime.label().into()),
            ("status", self.training.status.label().into()),
            ("epochs", self.training.epochs.len().to_string()),
            ("best_epoch", self.training.best_epoch.to_string()),
            ("noise_multiplier", fmt_opt(self.noise_multiplier)),
            ("kappa", fmt_opt(self.kappa)),
            ("epsilon", fmt_opt(self.epsilon)),
            ("delta", fmt_f64(self.delta)),
            ("tp", self.confusion.tp.to_string()),
            ("tn", self.confusion.tn.to_string()),
            ("fp", self.confusion.fp.to_string()),
            ("fn", self.confusion.fn_.to_string()),
            ("accuracy", fmt_opt(m.accuracy)),
            ("precision", fmt_opt(m.precision)),
            ("recall", fmt_opt(m.recall)),
            ("specificity", fmt_opt(m.specificity)),
            ("f1", fmt_opt(m.f1)),
            ("mcc", fmt_opt(m.mcc)),
        ];
        for (k, v) in rows {
            t.push(vec![k.to_string(), v])?;
        }
        Ok(t)
    }
}

/// Trains the binary classifier on the digit-parity task and scores it on a
/// disjoint test split. Writes `epochs.csv`, `metrics.csv`, `loss.svg` and
/// the manifest when `out` is given.
pub fn run_classification_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ClassificationReport> {
    cfg.validate()?;
    let n = cfg.data.train_samples + cfg.data.test_samples;
    let data = if cfg.data.synthetic { synthetic_binary(n, cfg.experiment.data_seed)? } else { parity_dataset(&load_digits(cfg, n)?)? };
    let train_idx: Vec<usize> = (0..cfg.data.train_samples).collect();
    let test_idx: Vec<usize> = (cfg.data.train_samples..n).collect();
    let test = data.subset(&test_idx, Split::Test)?;
    let (train, validation) = data.subset(&train_idx, Split::Full)?.train_validation_split(cfg.train.holdout, cfg.experiment.data_seed)?;

    let spec = build_custom_cnn_binary();
    let init = ParamSet::init(&spec, cfg.experiment.seed);
    let regime = cfg.regime()?;
    let delta = cfg.delta()?;
    let opts = TrainOptions {
        learning_rate: cfg.train.learning_rate,
        batch_size: cfg.train.batch_size,
        max_epochs: cfg.train.max_epochs,
        patience: cfg.train.patience,
        seed: cfg.experiment.seed,
        delta: Some(delta),
    };
    let training = train_classifier(&spec, &init, &train, &validation, &regime, &opts)?;
    let (confusion, metrics) = evaluate(&spec, &training.params, &test)?;
    let kappa = match regime {
        Regime::PdpSgd(c) => Some(c.kappa),
        _ => None,
    };
    let report = ClassificationReport {
        regime: regime.kind(),
        noise_multiplier: regime_noise(&regime),
        kappa,
        epsilon: training.epochs.last().and_then(|r| r.epsilon),
        delta,
        training,
        confusion,
        metrics,
    };
    if let Some(dir) = out {
        let mut o = OutputDir::create(dir)?;
        o.write_csv("epochs.csv", &report.training.epochs_csv()?)?;
        o.write_csv("metrics.csv", &report.metrics_csv()?)?;
        let e = &report.training.epochs;
        let plot = LinePlot {
            title: format!("training loss ({})", report.regime.label()),
            x_label: "epoch".into(),
            y_label: "BCE".into(),
            log_y: false,
            series: vec![
                Series { name: "train".into(), points: e.iter().map(|r| (r.epoch as f64, r.train_loss)).collect() },
                Series { name: "validation".into(), points: e.iter().map(|r| (r.epoch as f64, r.validation_loss)).collect() },
            ],
        };
        o.write("loss.svg", plot.render().as_bytes())?;
        o.finish("train", cfg)?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct AttackReport {
    pub regime: RegimeKind,
    pub noise_multiplier: Option<f64>,
    pub true_label: usize,
    /// Label read off the capture's final-layer gradient.
    pub inferred_label: usize,
    pub ground_truth: crate::Tensor,
    pub capture: GradientCapture,
    pub outcome: AttackOutcome,
}

impl AttackReport {
    pub fn final_ssim(&self) -> Option<f64> {
        self.outcome.trace.final_ssim()
    }

    pub fn status(&self) -> AttackStatus {
        self.outcome.status
    }
}

/// Seed of the intercepted client's noise stream.
fn client_noise_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.experiment.seed ^ 0x5eed_0fc1_1e47
}

/// Builds the capture for the configured regime and runs the attack on it.
pub fn run_attack_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<AttackReport> {
    cfg.validate()?;
    let data = load_digits(cfg, cfg.data.train_samples)?;
    let i = cfg.experiment.attack_sample;
    let spec = build_victim_cnn();
    let params = ParamSet::init(&spec, cfg.experiment.seed);
    let regime = cfg.regime()?;
    let client = ClientState {
        id: 0,
        images: data.batch_nchw(&[i])?,
        labels: vec![data.labels()[i]],
        learning_rate: cfg.train.learning_rate,
        regime,
        noise_seed: client_noise_seed(cfg),
    };
    let (_, capture) = local_update(&client, &spec, &params, 0)?;
    let ground_truth = data.image(i);
    let inferred_label = infer_label(&capture, &spec)?.class;
    let outcome = run_attack(&spec, &params, &capture, &cfg.attack, Some(&ground_truth))?;
    let report = AttackReport {
        regime: regime.kind(),
        noise_multiplier: regime_noise(&regime),
        true_label: data.labels()[i],
        inferred_label,
        ground_truth,
        capture,
        outcome,
    };
    if let Some(dir) = out {
        let mut o = OutputDir::create(dir)?;
        write_attack_outputs(&mut o, &report)?;
        o.finish("attack", cfg)?;
    }
    Ok(report)
}

fn attack_summary(r: &AttackReport) -> Result<CsvTable> {
    let mut t = CsvTable::new(&["key", "value"]);
    let rows = [
        ("regime", r.regime.label().to_string()),
        ("status", r.outcome.status.label().to_string()),
        ("noise_multiplier", fmt_opt(r.noise_multiplier)),
        ("true_label", r.true_label.to_string()),
        ("inferred_label", r.inferred_label.to_string()),
        ("reconstructed_label", r.outcome.label_index().to_string()),
        ("final_loss", fmt_opt(r.outcome.trace.final_loss())),
        ("final_ssim", fmt_opt(r.final_ssim())),
        ("fallback_steps", r.outcome.fallback_steps.to_string()),
        ("evaluations", r.outcome.evaluations.to_string()),
    ];
    for (k, v) in rows {
        t.push(vec![k.to_string(), v])?;
    }
    Ok(t)
}

fn write_attack_outputs(o: &mut OutputDir, r: &AttackReport) -> Result<()> {
    o.write_csv("trace.csv", &r.outcome.trace.to_csv()?)?;
    o.write_csv("attack.csv", &attack_summary(r)?)?;
    o.write("capture.glcap", &encode_capture(&r.capture)?)?;
    o.write("truth.pgm", &encode_pgm(&r.ground_truth)?)?;
    for (it, img) in &r.outcome.trace.snapshots {
        o.write(&format!("recon_{it:04}.pgm"), &encode_pgm(img)?)?;
    }
    let series = |f: fn(&crate::attack::TraceRow) -> Option<f64>| Series {
        name: r.regime.label().into(),
        points: r.outcome.trace.rows.iter().filter_map(|row| f(row).map(|v| (row.iteration as f64, v))).collect(),
    };
    o.write("loss.svg", trace_plot("reconstruction loss", "D", true, vec![series(|row| Some(row.loss))]).as_bytes())?;
    o.write("ssim.svg", trace_plot("SSIM to ground truth", "SSIM", false, vec![series(|row| row.ssim)]).as_bytes())?;
    Ok(())
}

fn trace_plot(title: &str, y: &str, log_y: bool, series: Vec<Series>) -> String {
    LinePlot { title: title.into(), x_label: "iteration".into(), y_label: y.into(), log_y, series }.render()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub regime: RegimeKind,
    pub attack_seed: u64,
    pub status: AttackStatus,
    pub final_loss: Option<f64>,
    pub final_ssim: Option<f64>,
}

/// Runs the attack for every regime and `runs` consecutive attack seeds,
/// spreading runs over `jobs` threads. Rows come back in (regime, seed)
/// order regardless of `jobs`.
pub fn run_sweep(cfg: &ExperimentConfig, runs: usize, jobs: usize, out: Option<&Path>) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if runs == 0 {
        return Err(Error::config("runs", "sweep needs at least one run"));
    }
    let mut tasks = Vec::new();
    for kind in [RegimeKind::Standard, RegimeKind::DpSgd, RegimeKind::PdpSgd] {
        for k in 0..runs as u64 {
            let mut c = cfg.clone();
            c.experiment.regime = kind;
            c.attack.seed = cfg.attack.seed.wrapping_add(k);
            tasks.push(c);
        }
    }
    let jobs = jobs.clamp(1, tasks.len());
    let mut results: Vec<Option<Result<AttackReport>>> = (0..tasks.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<_> = results.chunks_mut(tasks.len().div_ceil(jobs)).zip(tasks.chunks(tasks.len().div_ceil(jobs))).collect();
        for (slots, cfgs) in chunks {
            scope.spawn(move || {
                for (slot, c) in slots.iter_mut().zip(cfgs) {
                    *slot = Some(run_attack_experiment(c, None));
                }
            });
        }
    });
    let reports: Vec<AttackReport> = results.into_iter().map(|r| r.expect("every task ran")).collect::<Result<_>>()?;
    let rows: Vec<SweepRow> = reports
        .iter()
        .zip(&tasks)
        .map(|(r, c)| SweepRow {
            regime: r.regime,
            attack_seed: c.attack.seed,
            status: r.outcome.status,
            final_loss: r.outcome.trace.final_loss(),
            final_ssim: r.final_ssim(),
        })
        .collect();
    if let Some(dir) = out {
        let mut o = OutputDir::create(dir)?;
        let mut t = CsvTable::new(&["regime", "attack_seed", "status", "final_loss", "final_ssim"]);
        for r in &rows {
            t.push(vec![r.regime.label().into(), r.attack_seed.to_string(), r.status.label().into(), fmt_opt(r.final_loss), fmt_opt(r.final_ssim)])?;
        }
        o.write_csv("sweep.csv", &t)?;
        // Curves of the first seed per regime.
        let firsts: Vec<&AttackReport> = reports.iter().step_by(runs).collect();
        let curves = |f: fn(&crate::attack::TraceRow) -> Option<f64>| -> Vec<Series> {
            firsts
                .iter()
                .map(|r| Series {
                    name: r.regime.label().into(),
                    points: r.outcome.trace.rows.iter().filter_map(|row| f(row).map(|v| (row.iteration as f64, v))).collect(),
                })
                .collect()
        };
        o.write("loss.svg", trace_plot("reconstruction loss", "D", true, curves(|row| Some(row.loss))).as_bytes())?;
        o.write("ssim.svg", trace_plot("SSIM to ground truth", "SSIM", false, curves(|row| row.ssim)).as_bytes())?;
        for r in firsts {
            let mut sub = OutputDir::create(&dir.join(r.regime.label()))?;
            write_attack_outputs(&mut sub, r)?;
            for (name, hash) in sub.files {
                o.files.push((format!("{}/{name}", r.regime.label()), hash));
            }
        }
        o.finish("sweep", cfg)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub mechanism: String,
    pub noise_multiplier: Option<f64>,
    pub sampling_rate: Option<f64>,
    pub steps: u32,
    pub trials: u64,
    pub empirical_epsilon: f64,
    /// Accountant (or analytic) ε for the same mechanism and δ.
    pub accountant_epsilon: f64,
    pub event: String,
    pub warning: bool,
}

#[allow(clippy::too_many_arguments)]
fn audit_row(
    m: &dyn Mechanism,
    d: &[f64],
    d_prime: &[f64],
    cfg: &AuditConfig,
    sigma: Option<f64>,
    q: Option<f64>,
    steps: u32,
    accountant: f64,
) -> Result<AuditRow> {
    let r = empirical_dp_audit(m, d, d_prime, cfg)?;
    Ok(AuditRow {
        mechanism: m.name(),
        noise_multiplier: sigma,
        sampling_rate: q,
        steps,
        trials: r.trials,
        empirical_epsilon: r.epsilon,
        accountant_epsilon: accountant,
        event: r.event,
        warning: r.wide_interval_warning,
    })
}

/// Empirical ε lower bounds next to the accounted ε for the configured toy
/// mechanisms. Writes `audit.csv` and the manifest when `out` is given.
pub fn run_audit(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<AuditRow>> {
    cfg.validate()?;
    let a = &cfg.audit;
    let base = AuditConfig { trials: a.trials, delta: a.delta, confidence: 0.95, seed: a.seed };
    let acct_delta = if a.delta > 0.0 { a.delta } else { 1e-12 };
    let mut rows = Vec::new();
    for (k, mech) in a.mechanisms.iter().enumerate() {
        let seed_for = |j: usize| AuditConfig { seed: a.seed.wrapping_add((k * 1000 + j) as u64), ..base };
        match mech {
            AuditMechanism::RandomizedResponse => {
                let p = a.response_probability;
                let m = RandomizedResponse { p };
                rows.push(audit_row(&m, &[1.0], &[0.0], &seed_for(0), None, None, 1, (p / (1.0 - p)).ln())?);
            }
            AuditMechanism::Gaussian => {
                for (j, &s) in a.sigmas.iter().enumerate() {
                    let m = GaussianMechanism { noise_multiplier: s, sensitivity: 1.0 };
                    rows.push(audit_row(&m, &[1.0], &[0.0], &seed_for(j), Some(s), None, 1, epsilon_for(s, 1.0, 1, acct_delta)?)?);
                }
            }
            AuditMechanism::SubsampledGaussian => {
                let q = a.sampling_rate;
                for (j, &s) in a.sigmas.iter().enumerate() {
                    for (t, &steps) in a.steps.iter().enumerate() {
                        let m = SubsampledGaussian { noise_multiplier: s, sampling_rate: q, steps };
                        let eps = epsilon_for(s, q, steps as u64, acct_delta)?;
                        rows.push(audit_row(&m, &[1.0], &[], &seed_for(j * 100 + t), Some(s), Some(q), steps, eps)?);
                    }
                }
            }
        }
    }
    if let Some(dir) = out {
        let mut o = OutputDir::create(dir)?;
        o.write_csv("audit.csv", &audit_csv(&rows)?)?;
        o.finish("audit", cfg)?;
    }
    Ok(rows)
}

pub fn audit_csv(rows: &[AuditRow]) -> Result<CsvTable> {
    let mut t = CsvTable::new(&["mechanism", "sigma", "q", "steps", "trials", "empirical_epsilon", "accountant_epsilon", "sound", "warning", "event"]);
    for r in rows {
        t.push(vec![
            r.mechanism.replace(',', ";"),
            fmt_opt(r.noise_multiplier),
            fmt_opt(r.sampling_rate),
            r.steps.to_string(),
            r.trials.to_string(),
            fmt_f64(r.empirical_epsilon),
            fmt_f64(r.accountant_epsilon),
            (r.empirical_epsilon <= r.accountant_epsilon).to_string(),
            r.warning.to_string(),
            r.event.clone(),
        ])?;
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccountantReport {
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub steps: u64,
    pub delta: f64,
    pub epsilon: f64,
    pub order: f64,
}

/// Accounts the planned training horizon (σ given or calibrated). Writes
/// the per-step history `accountant.csv` when `out` is given.
pub fn run_accountant(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<AccountantReport> {
    cfg.validate()?;
    let sigma = cfg.noise_multiplier()?;
    if !(sigma > 0.0) {
        return Err(Error::config("dp.noise_multiplier", "accounting needs a positive noise multiplier"));
    }
    let (q, steps) = cfg.accounting_horizon();
    let delta = cfg.delta()?;
    let mut budget = PrivacyBudget::new(delta)?;
    budget.log(sigma, q, steps)?;
    let ed = compose_and_convert(&budget)?;
    let report = AccountantReport { noise_multiplier: sigma, sampling_rate: q, steps, delta, epsilon: ed.epsilon, order: ed.order };
    if let Some(dir) = out {
        let mut o = OutputDir::create(dir)?;
        o.write_csv("accountant.csv", &budget.history_csv()?)?;
        let mut curve = CsvTable::new(&["alpha", "rdp"]);
        for (a, r) in budget.rdp_curve()? {
            curve.push(vec![fmt_f64(a), fmt_f64(r)])?;
        }
        o.write_csv("rdp.csv", &curve)?;
        o.finish("accountant", cfg)?;
    }
    Ok(report)
}
