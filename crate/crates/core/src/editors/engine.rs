//! The optimization loop every editor shares: minibatch SGD with
//! momentum, per-epoch validation, early stopping, best-epoch snapshot
//! and the divergence guard.

use rand::seq::SliceRandom;

use super::trace::{EarlyStopping, EditTrace, EpochRecord, StopReason};
use super::EditConfig;
use crate::error::{Error, Result};
use crate::seeds;
use crate::tensorcore::{sgd_step, ParamGroup, Tape, Var};

/// Loss must stay below this multiple of the epoch-0 loss.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

pub(crate) trait Objective {
    fn train_len(&self) -> usize;

    /// Records the training loss over `batch` using the parameter variables `vars`.
    fn loss(&self, tape: &mut Tape, vars: &[Var], batch: &[usize]) -> Result<Var>;

    /// Editing validation accuracy with the given parameter values.
    fn val_accuracy(&mut self, params: &[ParamGroup]) -> Result<f64>;
}

fn batch_loss(obj: &dyn Objective, params: &mut [ParamGroup], batch: &[usize], backward: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
    let loss = obj.loss(&mut tape, &vars, batch)?;
    let value = tape.value(loss).item()?;
    if backward && value.is_finite() {
        tape.backward_params(loss, params)?;
    }
    Ok(value)
}

/// Optimizes `params` in place, returning the best-epoch values and the trace.
pub(crate) fn optimize(
    obj: &mut dyn Objective,
    mut params: Vec<ParamGroup>,
    cfg: &EditConfig,
) -> Result<(Vec<ParamGroup>, EditTrace)> {
    let n = obj.train_len();
    if n == 0 {
        return Err(Error::contract("editing training set is empty"));
    }
    let sgd = cfg.sgd();
    sgd.validate()?;
    let bs = cfg.effective_batch_size(n);
    let mut rng = seeds::child_rng(cfg.seed, "editor/shuffle");

    let all: Vec<usize> = (0..n).collect();
    let loss0 = total_loss(obj, &mut params, &all, bs)?;
    if !loss0.is_finite() {
        return Err(Error::Diverged { epoch: 0, loss: loss0 });
    }
    let acc0 = obj.val_accuracy(&params)?;
    let mut stopper = EarlyStopping::new(cfg.early_stop_ratio);
    stopper.observe(acc0);
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train_loss: loss0,
        val_acc: acc0,
    }];
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    let mut order = all;
    for epoch in 1..=cfg.max_epochs {
        if bs < n {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for batch in order.chunks(bs) {
            params.iter_mut().for_each(ParamGroup::zero_grad);
            let l = batch_loss(obj, &mut params, batch, true)?;
            if !l.is_finite() || (loss0 > 0.0 && l > DIVERGENCE_FACTOR * loss0) {
                return Err(Error::Diverged { epoch, loss: l });
            }
            sgd_step(&mut params, &sgd)?;
            total += l * batch.len() as f64;
        }
        if params.iter().any(|p| !p.tensor.all_finite()) {
            return Err(Error::Diverged {
                epoch,
                loss: f64::NAN,
            });
        }
        let acc = obj.val_accuracy(&params)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: total / n as f64,
            val_acc: acc,
        });
        let obs = stopper.observe(acc);
        if obs.improved {
            best.clone_from(&params);
            best_epoch = epoch;
        }
        if obs.stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let best_val_acc = epochs[best_epoch].val_acc;
    Ok((
        best,
        EditTrace {
            epochs,
            best_epoch,
            best_val_acc,
            stop_reason,
        },
    ))
}

fn total_loss(obj: &dyn Objective, params: &mut [ParamGroup], idx: &[usize], bs: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(bs) {
        total += batch_loss(obj, params, chunk, false)? * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}
