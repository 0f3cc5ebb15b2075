use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::data::{self, DataError, Sample};
use super::metrics::{Confusion, Metrics};
use super::optim::{AdamW, AdamWConfig};
use crate::empathy::{EmpathyVector, SeverityLabel};
use crate::encoder::PreparedText;
use crate::head::{predict_batch, NUM_CLASSES};
use crate::model::{HeaeModel, ModelConfig, ModelError};
use crate::par;
use crate::real::Real;
use crate::tensor::{Gradients, Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },
    #[error("evaluation set is empty")]
    EmptySet,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Seeds parameter init and batch shuffling.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
}

fn default_batch() -> usize {
    8
}
fn default_epochs() -> usize {
    30
}
fn default_train_frac() -> f64 {
    0.9
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            seed: 0,
            train_frac: default_train_frac(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.optimizer.lr >= 0.0 && self.optimizer.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr = {} must be a non-negative number", self.optimizer.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Samples tokenized, chunked and bagged once, ready for repeated epochs.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub texts: Vec<PreparedText>,
    pub evs: Vec<EmpathyVector>,
    pub labels: Vec<SeverityLabel>,
}

impl PreparedSet {
    pub fn new<F: Real>(model: &HeaeModel<F>, samples: &[Sample]) -> Result<Self, TrainError> {
        let texts = par::map(samples, |s| model.prepare(&s.narrative))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            texts,
            evs: samples.iter().map(|s| s.ev).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> (Vec<&PreparedText>, Vec<EmpathyVector>, Vec<SeverityLabel>) {
        (
            idx.iter().map(|&i| &self.texts[i]).collect(),
            idx.iter().map(|&i| self.evs[i]).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val: Option<Metrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn final_metrics(&self) -> Option<&Metrics> {
        self.last().and_then(|r| r.val.as_ref())
    }
}

/// Mini-batch AdamW over seeded shuffles; validation metrics after each epoch
/// when `val` is non-empty.
pub fn train<F: Real>(
    model: &mut HeaeModel<F>,
    train_set: &PreparedSet,
    val: &PreparedSet,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(config.optimizer.clone(), model.params());
    let mut grads = Gradients::for_store(model.params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History::default();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let (texts, evs, labels) = train_set.batch(idx);
            grads.zero();
            let loss = {
                let mut tape = Tape::new(model.params());
                let (loss, _) = match model.loss(&mut tape, &texts, &evs, &labels) {
                    Ok(l) => l,
                    Err(ModelError::Tensor(TensorError::NonFinite { op })) => {
                        return Err(TrainError::NonFiniteLoss {
                            epoch,
                            batch: b,
                            detail: format!("non-finite value produced by {op}"),
                        })
                    }
                    Err(e) => return Err(e.into()),
                };
                let value = tape.value(loss).data()[0].as_f64();
                if !value.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: b,
                        detail: format!("loss = {value}"),
                    });
                }
                tape.backward(loss, &mut grads).map_err(ModelError::from)?;
                value
            };
            if !grads.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: "gradient has non-finite entries".into(),
                });
            }
            opt.step(model.params_mut(), &grads);
            total += loss * idx.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            loss: total / train_set.len() as f64,
            val: if val.is_empty() { None } else { Some(evaluate(model, val)?) },
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(history)
}

const EVAL_BATCH: usize = 32;

/// Metrics over `set`; shards run concurrently and merge their confusions.
pub fn evaluate<F: Real>(model: &HeaeModel<F>, set: &PreparedSet) -> Result<Metrics, TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let shards: Vec<Vec<usize>> = (0..set.len())
        .collect::<Vec<_>>()
        .chunks(EVAL_BATCH)
        .map(<[usize]>::to_vec)
        .collect();
    let parts = par::map(&shards, |idx| -> Result<Confusion, TrainError> {
        let (texts, evs, labels) = set.batch(idx);
        let logits = model.infer(&texts, &evs)?;
        let preds = predict_batch(&logits).map_err(ModelError::from)?;
        let mut c = Confusion::new(NUM_CLASSES);
        for (t, p) in labels.iter().zip(preds) {
            c.record(t.index(), p.index());
        }
        Ok(c)
    });
    let mut confusion = Confusion::new(NUM_CLASSES);
    for p in parts {
        confusion.merge(&p?);
    }
    Ok(Metrics::from_confusion(confusion))
}

/// Result of one split/train/evaluate cycle.
#[derive(Debug)]
pub struct RunOutcome {
    pub model: HeaeModel<f32>,
    pub history: History,
    pub metrics: Metrics,
}

/// Splits `data` (stratified, `split_seed`), trains a fresh model seeded by
/// `config.seed`, and evaluates it on the held-out part.
pub fn run(
    data: &[Sample],
    model_config: &ModelConfig,
    config: &TrainConfig,
    split_seed: u64,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunOutcome, TrainError> {
    let (train_samples, val_samples) = data::split(data, config.train_frac, split_seed)?;
    let mut model = HeaeModel::<f32>::new(model_config.clone(), config.seed)?;
    let train_set = PreparedSet::new(&model, &train_samples)?;
    let val_set = PreparedSet::new(&model, &val_samples)?;
    let history = train(&mut model, &train_set, &val_set, config, on_epoch)?;
    let metrics = match history.final_metrics() {
        Some(m) => m.clone(),
        None => evaluate(&model, &val_set)?,
    };
    Ok(RunOutcome { model, history, metrics })
}
