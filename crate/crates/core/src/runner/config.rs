//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_sigma, default_delta};
use crate::attack::AttackConfig;
use crate::data::ResizeMethod;
use crate::dp::PdpConfig;
use crate::error::{Error, Result};
use crate::fedsim::{Regime, RegimeKind};

/// Model seed whose no-privacy reconstruction is stable (first of 32
/// scanned seeds to reach SSIM ≥ 0.85 on the default digit).
pub const STABLE_MODEL_SEED: u64 = 0;

/// Environment variable overriding `data.mnist_dir`.
pub const MNIST_DIR_ENV: &str = "GRADLEAK_MNIST_DIR";

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub regime: RegimeKind,
    /// Model initialisation seed.
    pub seed: u64,
    /// Seed of the synthetic data and of the train/validation split.
    pub data_seed: u64,
    /// Index of the attacked sample within the dataset.
    pub attack_sample: usize,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection { regime: RegimeKind::Standard, seed: STABLE_MODEL_SEED, data_seed: 7, attack_sample: 3, output: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Use generated glyphs instead of MNIST files.
    pub synthetic: bool,
    pub mnist_dir: Option<PathBuf>,
    /// Samples available for training (split into train and validation).
    pub train_samples: usize,
    /// Held-out samples for the final classification metrics.
    pub test_samples: usize,
    pub resize: ResizeMethod,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { synthetic: true, mnist_dir: None, train_samples: 256, test_samples: 256, resize: ResizeMethod::Nearest }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Fraction of the training samples held out for validation.
    pub holdout: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { learning_rate: 0.1, batch_size: 32, max_epochs: 60, patience: 20, holdout: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpSection {
    pub clip_norm: f64,
    pub noise_multiplier: Option<f64>,
    pub target_epsilon: Option<f64>,
    /// Defaults to `1/N` rounded down to a power of ten.
    pub delta: Option<f64>,
}

impl Default for DpSection {
    fn default() -> Self {
        DpSection { clip_norm: 1.2, noise_multiplier: None, target_epsilon: None, delta: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdpSection {
    /// Explicit κ; otherwise `η²σ²` from the two fields below.
    pub kappa: Option<f64>,
    pub learning_rate: f64,
    pub noise_multiplier: f64,
}

impl Default for PdpSection {
    fn default() -> Self {
        PdpSection { kappa: None, learning_rate: 0.1, noise_multiplier: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditMechanism {
    RandomizedResponse,
    Gaussian,
    SubsampledGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditSection {
    pub mechanisms: Vec<AuditMechanism>,
    pub trials: u64,
    pub delta: f64,
    /// Truth probability of randomized response.
    pub response_probability: f64,
    /// Noise multipliers of the Gaussian rows.
    pub sigmas: Vec<f64>,
    /// Step counts of the subsampled Gaussian rows.
    pub steps: Vec<u32>,
    pub sampling_rate: f64,
    pub seed: u64,
}

impl Default for AuditSection {
    fn default() -> Self {
        AuditSection {
            mechanisms: vec![AuditMechanism::RandomizedResponse, AuditMechanism::Gaussian, AuditMechanism::SubsampledGaussian],
            trials: 100_000,
            delta: 1e-5,
            response_probability: 0.75,
            sigmas: vec![1.0, 2.0, 4.0],
            steps: vec![1, 4, 16],
            sampling_rate: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub dp: DpSection,
    pub pdp: PdpSection,
    pub attack: AttackConfig,
    pub audit: AuditSection,
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be positive and finite, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let at = e.span().map(|s| format!(" (bytes {}..{})", s.start, s.end)).unwrap_or_default();
            Error::config("<toml>", format!("{}{at}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks ranges, the σ / target-ε exclusivity for DP-SGD and that
    /// referenced paths exist.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.train_samples < 2 {
            return Err(Error::config("data.train_samples", "need at least 2 samples"));
        }
        if d.test_samples == 0 {
            return Err(Error::config("data.test_samples", "need at least 1 sample"));
        }
        if !d.synthetic {
            let dir =
                self.mnist_dir().ok_or_else(|| Error::config("data.mnist_dir", format!("required when data.synthetic = false (or set {MNIST_DIR_ENV})")))?;
            for f in [MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS] {
                if !dir.join(f).is_file() {
                    return Err(Error::config("data.mnist_dir", format!("{} does not exist", dir.join(f).display())));
                }
            }
        }
        if self.experiment.attack_sample >= d.train_samples {
            return Err(Error::config("experiment.attack_sample", format!("must be below data.train_samples ({})", d.train_samples)));
        }

        let t = &self.train;
        positive("train.learning_rate", t.learning_rate)?;
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if t.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be at least 1"));
        }
        if !(t.holdout > 0.0 && t.holdout < 1.0) {
            return Err(Error::config("train.holdout", format!("must lie in (0, 1), got {}", t.holdout)));
        }

        let dp = &self.dp;
        positive("dp.clip_norm", dp.clip_norm)?;
        if self.experiment.regime == RegimeKind::DpSgd {
            match (dp.noise_multiplier, dp.target_epsilon) {
                (Some(_), Some(_)) | (None, None) => {
                    return Err(Error::config("dp.noise_multiplier", "set exactly one of dp.noise_multiplier and dp.target_epsilon"));
                }
                _ => {}
            }
        }
        if let Some(s) = dp.noise_multiplier {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::config("dp.noise_multiplier", format!("must be finite and >= 0, got {s}")));
            }
        }
        if let Some(e) = dp.target_epsilon {
            positive("dp.target_epsilon", e)?;
        }
        if let Some(delta) = dp.delta {
            if !(delta > 0.0 && delta < 1.0) {
                return Err(Error::config("dp.delta", format!("must lie in (0, 1), got {delta}")));
            }
        }

        if let Some(k) = self.pdp.kappa {
            if !(k >= 0.0 && k.is_finite()) {
                return Err(Error::config("pdp.kappa", format!("must be finite and >= 0, got {k}")));
            }
        }

        let a = &self.attack;
        if a.iterations == 0 {
            return Err(Error::config("attack.iterations", "must be at least 1"));
        }
        positive("attack.learning_rate", a.learning_rate)?;
        if !(a.alpha >= 0.0) {
            return Err(Error::config("attack.alpha", format!("must be >= 0, got {}", a.alpha)));
        }
        if a.lbfgs_memory == 0 {
            return Err(Error::config("attack.lbfgs_memory", "must be at least 1"));
        }

        let au = &self.audit;
        if au.trials == 0 {
            return Err(Error::config("audit.trials", "must be at least 1"));
        }
        if !(au.delta >= 0.0 && au.delta < 1.0) {
            return Err(Error::config("audit.delta", format!("must lie in [0, 1), got {}", au.delta)));
        }
        if !(au.response_probability > 0.5 && au.response_probability < 1.0) {
            return Err(Error::config("audit.response_probability", "must lie in (0.5, 1)"));
        }
        if au.sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("audit.sigmas", "all noise multipliers must be positive"));
        }
        if au.steps.contains(&0) {
            return Err(Error::config("audit.steps", "step counts must be at least 1"));
        }
        if !(au.sampling_rate > 0.0 && au.sampling_rate <= 1.0) {
            return Err(Error::config("audit.sampling_rate", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// MNIST directory, with the environment override taking precedence.
    pub fn mnist_dir(&self) -> Option<PathBuf> {
        std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from).or_else(|| self.data.mnist_dir.clone())
    }

    /// Training-split size after the validation holdout.
    pub fn training_size(&self) -> usize {
        let n = self.data.train_samples;
        let val = ((n as f64) * self.train.holdout).round() as usize;
        n - val.clamp(1, n - 1)
    }

    /// Sampling rate and step count of the planned training run.
    pub fn accounting_horizon(&self) -> (f64, u64) {
        let n = self.training_size();
        let l = self.train.batch_size.min(n);
        let batches = n.div_ceil(l) as u64;
        (l as f64 / n as f64, batches * self.train.max_epochs as u64)
    }

    pub fn delta(&self) -> Result<f64> {
        match self.dp.delta {
            Some(d) => Ok(d),
            None => default_delta(self.training_size()),
        }
    }

    /// Noise multiplier for DP-SGD: the configured value, or the σ that
    /// meets the target ε over the planned horizon.
    pub fn noise_multiplier(&self) -> Result<f64> {
        match (self.dp.noise_multiplier, self.dp.target_epsilon) {
            (Some(s), _) => Ok(s),
            (None, Some(eps)) => {
                let (q, steps) = self.accounting_horizon();
                calibrate_sigma(eps, self.delta()?, q, steps)
            }
            (None, None) => Err(Error::config("dp.noise_multiplier", "set dp.noise_multiplier or dp.target_epsilon")),
        }
    }

    pub fn kappa(&self) -> Result<f64> {
        match self.pdp.kappa {
            Some(k) => Ok(k),
            None => Ok(PdpConfig::from_noise(self.pdp.learning_rate, self.pdp.noise_multiplier)?.kappa),
        }
    }

    pub fn regime(&self) -> Result<Regime> {
        self.regime_for(self.experiment.regime)
    }

    pub fn regime_for(&self, kind: RegimeKind) -> Result<Regime> {
        Ok(match kind {
            RegimeKind::Standard => Regime::Standard,
            RegimeKind::DpSgd => Regime::DpSgd { clip_norm: self.dp.clip_norm, noise_multiplier: self.noise_multiplier()? },
            RegimeKind::PdpSgd => Regime::PdpSgd(PdpConfig::new(self.kappa()?)?),
        })
    }
}
