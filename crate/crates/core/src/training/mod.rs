//! Mini-batch Adam training with a step schedule, evaluation and checkpoints.
//!
//! Per-sample gradients are computed in parallel on separate tapes and summed
//! in sample order, so results do not depend on the thread count.

pub mod checkpoint;
pub mod metrics;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_precision, config_diff, load_checkpoint, save_checkpoint, Checkpoint, Progress};
pub use metrics::{Metrics, Outcome, QtypeAccuracy};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::feature_store::{Sample, Split};
use crate::model::{ModelInput, PstpNet};
use crate::optim::{adam_step, AdamState};
use crate::tensor::{Scalar, Tensor};

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        epoch: usize,
        batch: usize,
        step: u64,
        lr: f64,
        loss: f64,
    },
    Epoch {
        epoch: usize,
        lr: f64,
        train_loss: f64,
        train: Option<Metrics>,
        val: Option<Metrics>,
        best_epoch: Option<usize>,
    },
}

/// Optimizer state and progress carried between epochs (and across resumes).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<S> {
    pub adam: AdamState<S>,
    pub progress: Progress,
}

impl<S: Scalar> TrainState<S> {
    pub fn fresh(net: &PstpNet<S>) -> Self {
        Self {
            adam: AdamState::new(&net.params.values()),
            progress: Progress { epochs_done: 0, step: 0, best_epoch: None, best_val_accuracy: None },
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<S>) -> Self {
        Self { adam: ckpt.adam.clone(), progress: ckpt.progress }
    }
}

/// Called after every epoch with the updated network and state.
pub struct EpochEvent<'a, S> {
    pub net: &'a PstpNet<S>,
    pub state: &'a TrainState<S>,
    pub record: &'a LogRecord,
    /// Whether this epoch set a new best validation accuracy.
    pub improved: bool,
}

#[derive(Default)]
pub struct TrainOptions<'a, S> {
    /// Evaluate the full training set after every epoch.
    pub eval_train: bool,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<u64>,
    pub log: Option<&'a mut dyn Write>,
    #[allow(clippy::type_complexity)]
    pub on_epoch: Option<&'a mut dyn FnMut(EpochEvent<'_, S>) -> Result<()>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub history: Vec<LogRecord>,
    /// Mean mini-batch loss of every step, in order.
    pub loss_curve: Vec<f64>,
    /// Parameters at the best validation epoch of this call, if any improved.
    pub best_params: Option<Vec<Tensor<S>>>,
    pub state: TrainState<S>,
}

fn refuse_test(samples: &[Sample]) -> Result<()> {
    match samples.iter().find(|s| s.split == Some(Split::Test)) {
        Some(s) => Err(Error::Data(format!("training refuses test-split sample {}", s.bundle.video_id))),
        None => Ok(()),
    }
}

fn check_samples<S: Scalar>(net: &PstpNet<S>, samples: &[Sample]) -> Result<Vec<ModelInput<S>>> {
    samples
        .iter()
        .map(|s| {
            s.bundle.check_config(&net.cfg)?;
            Ok(ModelInput::from_bundle(&s.bundle))
        })
        .collect()
}

/// Sample order for `epoch`: a shuffle seeded by the run seed and the epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn write_record(log: &mut Option<&mut dyn Write>, rec: &LogRecord) -> Result<()> {
    if let Some(w) = log {
        let line = serde_json::to_string(rec).expect("records serialise");
        writeln!(w, "{line}").map_err(|e| Error::io("metrics log", e))?;
    }
    Ok(())
}

/// Trains `net` from `state` until `cfg.epochs` epochs are done.
///
/// Never reads test-split samples; a non-finite loss or gradient aborts with
/// the offending epoch and batch.
pub fn train<S: Scalar>(
    net: &mut PstpNet<S>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut state: TrainState<S>,
    mut opts: TrainOptions<'_, S>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    refuse_test(train_set)?;
    refuse_test(val_set)?;
    let inputs = check_samples(net, train_set)?;
    check_samples(net, val_set)?;
    let adam_cfg = cfg.adam();
    let mut history = Vec::new();
    let mut loss_curve = Vec::new();
    let mut best_params = None;

    for epoch in state.progress.epochs_done..cfg.epochs {
        if opts.max_steps.is_some_and(|m| state.progress.step >= m) {
            break;
        }
        let lr = cfg.lr_at(epoch);
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            if opts.max_steps.is_some_and(|m| state.progress.step >= m) {
                break;
            }
            let results = idx
                .par_iter()
                .map(|&i| net.loss_and_grads(&inputs[i], train_set[i].bundle.answer))
                .collect::<Result<Vec<_>>>()?;
            let scale = S::from_f64(1.0 / idx.len() as f64);
            let mut grads: Vec<Tensor<S>> =
                net.params.params().iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
            let mut loss = 0.0;
            for r in &results {
                loss += r.loss;
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + x;
                    }
                }
            }
            loss /= idx.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x = *x * scale);
            }
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient in epoch {epoch} batch {batch} (step {})",
                    state.progress.step + 1
                )));
            }
            let mut params: Vec<&mut Tensor<S>> = net.params.params_mut().iter_mut().map(|p| &mut p.value).collect();
            adam_step(&mut params, &grads, &mut state.adam, lr, &adam_cfg)?;
            state.progress.step += 1;
            loss_curve.push(loss);
            epoch_loss += loss;
            batches += 1;
            let rec = LogRecord::Step { epoch, batch, step: state.progress.step, lr, loss };
            write_record(&mut opts.log, &rec)?;
        }

        let train_metrics = if opts.eval_train { Some(evaluate(net, train_set)?) } else { None };
        let val = if val_set.is_empty() { None } else { Some(evaluate(net, val_set)?) };
        let improved = match &val {
            Some(v) => state.progress.best_val_accuracy.is_none_or(|b| v.accuracy > b),
            None => false,
        };
        if improved {
            state.progress.best_epoch = Some(epoch);
            state.progress.best_val_accuracy = val.as_ref().map(|v| v.accuracy);
            best_params = Some(net.params.values());
        }
        state.progress.epochs_done = epoch + 1;
        let rec = LogRecord::Epoch {
            epoch,
            lr,
            train_loss: epoch_loss / batches.max(1) as f64,
            train: train_metrics,
            val,
            best_epoch: state.progress.best_epoch,
        };
        write_record(&mut opts.log, &rec)?;
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(EpochEvent { net, state: &state, record: &rec, improved })?;
        }
        history.push(rec);
    }
    Ok(TrainOutcome { history, loss_curve, best_params, state })
}

/// Per-sample outcomes of `net` on `samples`, in order.
pub fn evaluate_outcomes<S: Scalar>(net: &PstpNet<S>, samples: &[Sample]) -> Result<Vec<Outcome>> {
    samples
        .par_iter()
        .map(|s| {
            s.bundle.check_config(&net.cfg)?;
            let pred = net.predict(&ModelInput::from_bundle(&s.bundle))?;
            let top = pred.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = top + pred.logits.iter().map(|&l| (l - top).exp()).sum::<f64>().ln();
            let loss = lse - pred.logits[s.bundle.answer];
            Ok(Outcome::new(&s.bundle, pred.answer, loss, &pred.trace))
        })
        .collect()
}

/// Accuracy, loss and hit-rates on `samples`. Errors on an empty split.
pub fn evaluate<S: Scalar>(net: &PstpNet<S>, samples: &[Sample]) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    Ok(Metrics::from_outcomes(&evaluate_outcomes(net, samples)?))
}
