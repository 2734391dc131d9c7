//! Mini-batch training of the binary classifier with early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::accountant::{compose_and_convert, PrivacyBudget};
use crate::data::persist::{fmt_f64, fmt_opt, CsvTable};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::fedsim::Regime;
use crate::metrics::{classification_metrics, ClassificationMetrics, ConfusionMatrix};
use crate::models::{bce_loss, classify, predict, ModelSpec, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Seed of batch shuffling; the DP noise stream is derived from it.
    pub seed: u64,
    /// δ for the running ε column (DP-SGD only).
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStatus {
    Completed,
    EarlyStopped,
    /// A loss or gradient became non-finite; parameters are from the best
    /// epoch before the failure.
    Failed,
}

impl TrainStatus {
    pub fn label(&self) -> &'static str {
        match self {
            TrainStatus::Completed => "completed",
            TrainStatus::EarlyStopped => "early-stopped",
            TrainStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub epochs: Vec<EpochRow>,
    pub best_epoch: usize,
    pub status: TrainStatus,
    pub failure: Option<String>,
}

impl TrainOutcome {
    pub fn epochs_csv(&self) -> Result<CsvTable> {
        let mut t = CsvTable::new(&["epoch", "train_loss", "validation_loss", "epsilon"]);
        for r in &self.epochs {
            t.push(vec![r.epoch.to_string(), fmt_f64(r.train_loss), fmt_f64(r.validation_loss), fmt_opt(r.epsilon)])?;
        }
        Ok(t)
    }
}

/// Mean BCE of a probability-head model over a dataset.
pub fn dataset_loss(spec: &ModelSpec, params: &ParamSet, data: &Dataset) -> Result<f64> {
    let all: Vec<usize> = (0..data.len()).collect();
    let out = predict(spec, params, &data.batch_nchw(&all)?)?;
    let labels: Vec<f64> = data.labels().iter().map(|&l| l as f64).collect();
    bce_loss(out.data(), &labels)
}

pub fn evaluate(spec: &ModelSpec, params: &ParamSet, data: &Dataset) -> Result<(ConfusionMatrix, ClassificationMetrics)> {
    let all: Vec<usize> = (0..data.len()).collect();
    let out = predict(spec, params, &data.batch_nchw(&all)?)?;
    let cm = ConfusionMatrix::from_predictions(&classify(spec, &out), data.labels())?;
    Ok((cm, classification_metrics(&cm)?))
}

/// Trains from `init` under `regime`, keeping the parameters with the lowest
/// validation loss. Batches are a fresh seeded shuffle each epoch; the last
/// batch may be short.
pub fn train_classifier(
    spec: &ModelSpec,
    init: &ParamSet,
    train: &Dataset,
    validation: &Dataset,
    regime: &Regime,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if opts.batch_size == 0 || opts.max_epochs == 0 || train.is_empty() || validation.is_empty() {
        return Err(Error::contract("training needs data, a positive batch size and at least one epoch"));
    }
    let mut shuffle = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut noise = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let l = opts.batch_size.min(train.len());
    let mut budget = match (regime, opts.delta) {
        (Regime::DpSgd { noise_multiplier, .. }, Some(delta)) if *noise_multiplier > 0.0 => Some((PrivacyBudget::new(delta)?, *noise_multiplier)),
        _ => None,
    };
    let q = l as f64 / train.len() as f64;

    let mut params = init.clone();
    let mut best = (f64::INFINITY, init.clone(), 0usize);
    let mut epochs = Vec::new();
    let mut status = TrainStatus::Completed;
    let mut failure = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 1..=opts.max_epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(l) {
            let images = train.batch_nchw(batch)?;
            let labels = train.batch_labels(batch);
            let step = regime.batch_gradient(spec, &params, &images, &labels, &mut noise).and_then(|g| params.sgd_update(&g, opts.learning_rate));
            match step {
                Ok(p) if p.tensors().all(|t| t.is_finite()) => params = p,
                Ok(_) | Err(Error::Numeric { .. }) => {
                    status = TrainStatus::Failed;
                    failure = Some(format!("non-finite update in epoch {epoch}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            if let Some((b, sigma)) = budget.as_mut() {
                b.log(*sigma, q, 1)?;
            }
        }
        let train_loss = dataset_loss(spec, &params, train);
        let validation_loss = dataset_loss(spec, &params, validation);
        let (train_loss, validation_loss) = match (train_loss, validation_loss) {
            (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() => (a, b),
            _ => {
                status = TrainStatus::Failed;
                failure = Some(format!("non-finite loss after epoch {epoch}"));
                break;
            }
        };
        let epsilon = match &budget {
            Some((b, _)) => Some(compose_and_convert(b)?.epsilon),
            None => None,
        };
        epochs.push(EpochRow { epoch, train_loss, validation_loss, epsilon });
        if validation_loss < best.0 {
            best = (validation_loss, params.clone(), epoch);
        } else if epoch - best.2 >= opts.patience {
            status = TrainStatus::EarlyStopped;
            break;
        }
    }
    let (_, params, best_epoch) = best;
    Ok(TrainOutcome { params, epochs, best_epoch, status, failure })
}

/// Binary parity task over a digit dataset: label 1 for odd digits.
pub fn parity_dataset(digits: &Dataset) -> Result<Dataset> {
    if digits.classes() == 2 {
        return Ok(digits.clone());
    }
    Dataset::new(digits.images().clone(), digits.labels().iter().map(|l| l % 2).collect(), 2, Split::Full)
}
