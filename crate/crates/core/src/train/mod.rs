//! Optimization, evaluation, and the fusion-comparison and ablation runners.

mod adam;
mod experiments;
mod metrics;
mod report;

pub use adam::{adam_step, AdamConfig, AdamState, Moments};
pub use experiments::{compare_fusions, run_ablation, AblationToggles};
pub use metrics::{ClassMetrics, Confusion, Metrics, THRESHOLD};
pub use report::{Report, ReportRow};

use serde::{Deserialize, Serialize};

use crate::data::{batches, split, Dataset, FeatureDims, FeatureRecord, SplitManifest};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, ModalityBatch};
use crate::model::{Model, ModelConfig};
use crate::nn::Mode;
use crate::tensor::{Precision, Tape, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Step size. `0` is a null run: passes execute but no model state,
    /// parameters or batchnorm statistics, is modified.
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub test_fraction: f64,
    pub precision: Precision,
    pub detector: DetectorConfig,
    pub fusion: FusionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            batch_size: 64,
            epochs: 30,
            seed: 7,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            test_fraction: 0.2,
            precision: Precision::Double,
            detector: DetectorConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and non-negative", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction {} outside [0, 1)",
                self.test_fraction
            )));
        }
        self.fusion.validate()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn model_config(&self, dims: FeatureDims) -> ModelConfig {
        ModelConfig {
            dims,
            fusion: self.fusion,
            detector: self.detector,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean train-mode loss over the epoch's batches.
    pub train_loss: f64,
    pub train: Metrics,
    pub test: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Eval-mode loss of the freshly initialized model on the train set.
    pub initial_loss: f64,
    /// Eval-mode loss of the final model on the train set.
    pub final_loss: f64,
    pub epochs: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
    pub split: SplitManifest,
}

impl TrainOutcome {
    /// Metrics on the held-out side, or on the train side when the split has no test records.
    pub fn final_metrics(&self) -> &Metrics {
        let last = self.log.epochs.last().expect("at least one epoch");
        last.test.as_ref().unwrap_or(&last.train)
    }
}

pub fn evaluate(model: &Model, records: &[&FeatureRecord]) -> Result<Metrics> {
    if records.is_empty() {
        return Err(Error::Contract("evaluate: empty record set".into()));
    }
    let probs = model.predict(records)?;
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    Metrics::from_predictions(&probs, &labels)
}

/// Splits `dataset` with the config's seed and trains on the train side.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let manifest = split(&dataset.records, config.test_fraction, config.seed)?;
    let (tr, te) = manifest.indices(&dataset.records);
    let train_set: Vec<&FeatureRecord> = tr.iter().map(|&i| &dataset.records[i]).collect();
    let test_set: Vec<&FeatureRecord> = te.iter().map(|&i| &dataset.records[i]).collect();
    let (model, log) = train_on(&train_set, &test_set, dataset.dims(), config)?;
    Ok(TrainOutcome {
        model,
        log,
        split: manifest,
    })
}

pub fn train_on(
    train_set: &[&FeatureRecord],
    test_set: &[&FeatureRecord],
    dims: FeatureDims,
    config: &TrainConfig,
) -> Result<(Model, TrainLog)> {
    config.validate()?;
    if train_set.len() < 4 {
        return Err(Error::Contract(format!(
            "training needs at least 4 records, got {}",
            train_set.len()
        )));
    }
    let mut model = Model::new(config.model_config(dims))?;
    let adam = config.adam();
    let mut state = AdamState::default();
    let frozen = config.lr == 0.0;
    let initial_loss = model.eval_loss(train_set)?;
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (bi, idx) in batches(train_set.len(), config.batch_size, config.seed, epoch as u64)
            .into_iter()
            .enumerate()
        {
            let recs: Vec<&FeatureRecord> = idx.iter().map(|&i| train_set[i]).collect();
            let nonfinite = |e: Error| match e {
                Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss { epoch, batch: bi },
                other => other,
            };
            let batch = ModalityBatch::from_records(&recs, &dims, config.fusion.channel_mask)?;
            let mut tape = Tape::new(config.precision);
            let out = model
                .forward(&mut tape, &batch, Mode::Train, !frozen)
                .map_err(nonfinite)?;
            let loss = model.loss(&mut tape, &out, &batch.labels).map_err(nonfinite)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            tape.backward(loss)?;
            if !frozen {
                let grads = model.params().collect_grads(&tape, &out.bindings);
                adam_step(model.params_mut(), &grads, &mut state, &adam)?;
            }
            loss_sum += lv * recs.len() as f64;
            seen += recs.len();
        }
        let train_metrics = evaluate(&model, train_set)?;
        let test_metrics = if test_set.is_empty() {
            None
        } else {
            Some(evaluate(&model, test_set)?)
        };
        log::info!(
            "epoch {epoch}: loss {:.5} train acc {:.4}{}",
            loss_sum / seen.max(1) as f64,
            train_metrics.accuracy,
            test_metrics
                .map(|m| format!(" test acc {:.4}", m.accuracy))
                .unwrap_or_default()
        );
        epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train: train_metrics,
            test: test_metrics,
        });
    }
    let final_loss = model.eval_loss(train_set)?;
    Ok((
        model,
        TrainLog {
            initial_loss,
            final_loss,
            epochs,
        },
    ))
}
