//! End-to-end training with Adam, global-norm clipping, an ℓ1 proximal
//! step on the CRF block and early stopping on validation κ.

mod adam;
mod checkpoint;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use adam::{clip_global_norm, Adam};
pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};

use crate::crf::{is_transition_param, l1_prox_by};
use crate::dataset::{class_prior, Record, NUM_STAGES};
use crate::error::{param_err, Error, Result};
use crate::metrics::Confusion;
use crate::model::{encode, model_init, predict_indices, sequence_loss, ModelConfig};
use crate::numeric::{streams, Params, SeedTree, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub cost_sensitive: bool,
    /// ℓ1 strength on CRF parameters; the prox threshold is `λ` times the
    /// parameter's effective learning rate.
    pub l1_lambda: f64,
    pub learning_rate: f64,
    /// Learning-rate multiplier for the CRF transition parameters.
    pub transition_lr_scale: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Records per gradient step; losses within a batch are averaged.
    pub batch: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            cost_sensitive: false,
            l1_lambda: 0.005,
            learning_rate: 1e-3,
            transition_lr_scale: 100.0,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            max_epochs: 200,
            patience: 10,
            batch: 1,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l1_lambda >= 0.0) {
            return param_err(format!("lambda {} must be non-negative", self.l1_lambda));
        }
        if !(self.learning_rate > 0.0) {
            return param_err(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.transition_lr_scale > 0.0) {
            return param_err("transition learning-rate scale must be positive");
        }
        if self.patience == 0 || self.batch == 0 || self.max_epochs == 0 {
            return param_err("patience, batch and max_epochs must be at least 1");
        }
        if !(self.clip_norm > 0.0) {
            return param_err("clip norm must be positive");
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-record loss over the epoch.
    pub train_loss: f64,
    pub val_kappa: f64,
}

impl EpochStats {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_kappa";

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.epoch, self.train_loss, self.val_kappa)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation κ.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Loss and parameter gradients of one record.
pub fn record_gradients(
    params: &Params,
    config: &ModelConfig,
    record: &Record,
    alpha: Option<&[f64; NUM_STAGES]>,
    dropout: SeedTree,
) -> Result<(f64, Params)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut rng = dropout.rng();
    let (_, h) = encode(&mut tape, &bound, config, record.signal(), true, &mut rng)?;
    let loss = sequence_loss(&mut tape, &bound, config, h, &record.label_indices(), alpha)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    let grads = bound.collect(&tape.backward(loss)?);
    if !grads.all_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok((value, grads))
}

/// Pooled Cohen's κ of decoded predictions over `records`.
pub fn evaluate_kappa(params: &Params, config: &ModelConfig, records: &[Record]) -> Result<f64> {
    let mut confusion = Confusion::new(NUM_STAGES);
    let per_record: Vec<Result<Confusion>> = records
        .par_iter()
        .map(|r| {
            let pred = predict_indices(params, config, r.signal())?;
            Confusion::from_indices(NUM_STAGES, &r.label_indices(), &pred)
        })
        .collect();
    for c in per_record {
        confusion.merge(&c?)?;
    }
    confusion.kappa()
}

/// Trains from a fresh initialization, calling `on_epoch` after every
/// epoch, and returns the best-κ checkpoint with the full history.
pub fn train(
    train_set: &[Record],
    validation: &[Record],
    model: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return Err(Error::EmptySequence);
    }
    for r in train_set.iter().chain(validation) {
        if r.timing() != model.timing {
            return param_err(format!("record `{}` timing does not match the model", r.subject_id()));
        }
    }
    let alpha = if config.cost_sensitive {
        Some(class_prior(train_set.iter().flat_map(|r| r.labels()))?)
    } else {
        None
    };
    let root = SeedTree::new(config.seed);
    let mut params = model_init(model, config.seed)?;
    let mut adam = Adam::new(&params, config.learning_rate, config.betas, config.epsilon);
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names.iter().filter(|n| is_transition_param(n)) {
        adam.set_scale(name, config.transition_lr_scale);
    }
    let prox = model.kind.crf_order().is_some() && config.l1_lambda > 0.0;

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Params)> = None;
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut root.child(streams::SHUFFLE).child(epoch as u64).rng());
        let dropout = root.child(streams::DROPOUT).child(epoch as u64);

        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch).enumerate() {
            let results: Vec<(usize, Result<(f64, Params)>)> = chunk
                .par_iter()
                .enumerate()
                .map(|(i, &idx)| {
                    let slot = (b * config.batch + i) as u64;
                    let out = record_gradients(&params, model, &train_set[idx], alpha.as_ref(), dropout.child(slot));
                    (idx, out)
                })
                .collect();
            let mut total: Option<Params> = None;
            for (idx, res) in results {
                let (loss, grads) = res.map_err(|e| Error::TrainingAborted {
                    epoch,
                    record: train_set[idx].subject_id().to_string(),
                    message: e.to_string(),
                })?;
                loss_sum += loss;
                match total.as_mut() {
                    None => total = Some(grads),
                    Some(t) => {
                        for (name, g) in t.iter_mut() {
                            g.add_assign(grads.get(name)?);
                        }
                    }
                }
            }
            let mut grads = total.expect("non-empty batch");
            if chunk.len() > 1 {
                let s = 1.0 / chunk.len() as f64;
                for (_, g) in grads.iter_mut() {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
            clip_global_norm(&mut grads, config.clip_norm);
            adam.step(&mut params, &grads)?;
            if prox {
                l1_prox_by(&mut params, |name| config.l1_lambda * adam.step_size(name))?;
            }
        }

        let val_kappa = evaluate_kappa(&params, model, validation)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_kappa,
        };
        log::info!("epoch {epoch}: loss {:.4}, validation kappa {:.4}", stats.train_loss, val_kappa);
        on_epoch(&stats);
        history.push(stats);

        if best.as_ref().is_none_or(|(k, _, _)| val_kappa > *k) {
            best = Some((val_kappa, epoch, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    let (val_kappa, epoch, params) = best.expect("at least one epoch");
    let info: BTreeMap<String, String> = [
        ("train.seed", config.seed.to_string()),
        ("train.epoch", epoch.to_string()),
        ("train.val_kappa", val_kappa.to_string()),
        ("train.cost_sensitive", config.cost_sensitive.to_string()),
        ("train.l1_lambda", config.l1_lambda.to_string()),
        ("train.learning_rate", config.learning_rate.to_string()),
        ("train.transition_lr_scale", config.transition_lr_scale.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: model.clone(),
            params,
            info,
        },
        history,
    })
}
