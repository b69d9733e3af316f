//! Epoch loop, training log and evaluation.

use std::fmt;

use rand::seq::SliceRandom;

use super::config::TrainConfig;
use super::data::Dataset;
use super::network::Network;
use super::state::TrainState;
use crate::error::{Result, SyqError};
use crate::inference::{Metrics, QuantizedModel};

pub const LOG_HEADER: &str = "step\tepoch\tlr\tloss\ttop1";

/// One training-log record, averaged over the steps since the previous one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLine {
    pub step: u64,
    pub epoch: u64,
    pub learning_rate: f64,
    pub loss: f64,
    pub top1: f64,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{:e}\t{:.6}\t{:.4}",
            self.step, self.epoch, self.learning_rate, self.loss, self.top1
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    /// 1-based index of the finished epoch.
    pub epoch: u64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub validation: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub final_top1: f64,
    pub best_top1: f64,
    pub steps: u64,
    pub epochs: Vec<EpochSummary>,
}

/// Callbacks from [`fit`].
pub trait FitObserver {
    fn on_log(&mut self, _line: &LogLine) -> Result<()> {
        Ok(())
    }

    /// Return `false` to stop after this epoch.
    fn on_epoch(&mut self, _summary: &EpochSummary, _state: &TrainState) -> Result<bool> {
        Ok(true)
    }
}

impl FitObserver for () {}

/// Top-1 and loss of the exported (quantized, 32-bit) model on `data`.
pub fn evaluate(network: &Network, state: &TrainState, data: &Dataset) -> Result<Metrics> {
    QuantizedModel::from_state(network, state)?.evaluate(data)
}

/// Trains until `state.epoch` reaches `cfg.epochs` (or the observer stops),
/// evaluating on `validation` after every epoch. Each epoch visits the
/// training set in a fresh permutation drawn from the state's RNG; a final
/// batch smaller than two samples is skipped.
pub fn fit(
    network: &Network,
    cfg: &TrainConfig,
    state: &mut TrainState,
    train: &Dataset,
    validation: &Dataset,
    observer: &mut dyn FitObserver,
) -> Result<FitSummary> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(SyqError::InvalidArgument(
            "training set needs at least two samples".into(),
        ));
    }
    let mut epochs = Vec::new();
    let mut best_top1: f64 = 0.0;
    let mut final_top1 = 0.0;
    while (state.epoch as usize) < cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut state.rng);
        let (mut epoch_loss, mut epoch_correct, mut epoch_seen) = (0.0, 0usize, 0usize);
        let (mut win_loss, mut win_correct, mut win_seen, mut win_steps) = (0.0, 0usize, 0usize, 0u64);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = train.batch(chunk)?;
            let stats = network.train_step(state, cfg, &x, &y)?;
            epoch_loss += stats.loss * stats.batch as f64;
            epoch_correct += stats.correct;
            epoch_seen += stats.batch;
            win_loss += stats.loss;
            win_correct += stats.correct;
            win_seen += stats.batch;
            win_steps += 1;
            if state.step.is_multiple_of(cfg.log_every) {
                observer.on_log(&LogLine {
                    step: state.step,
                    epoch: state.epoch + 1,
                    learning_rate: state.learning_rate,
                    loss: win_loss / win_steps as f64,
                    top1: win_correct as f64 / win_seen as f64,
                })?;
                (win_loss, win_correct, win_seen, win_steps) = (0.0, 0, 0, 0);
            }
        }
        state.epoch += 1;
        let validation = evaluate(network, state, validation)?;
        let summary = EpochSummary {
            epoch: state.epoch,
            train_loss: epoch_loss / epoch_seen.max(1) as f64,
            train_top1: epoch_correct as f64 / epoch_seen.max(1) as f64,
            validation,
        };
        final_top1 = validation.top1;
        best_top1 = best_top1.max(validation.top1);
        epochs.push(summary);
        if !observer.on_epoch(&summary, state)? {
            break;
        }
    }
    Ok(FitSummary {
        final_top1,
        best_top1,
        steps: state.step,
        epochs,
    })
}
