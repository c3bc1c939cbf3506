use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{accuracy, LabeledSet, Network, TapeBindings};
use crate::seeds;
use crate::tensorcore::{sgd_step, ParamGroup, SgdConfig, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Samples used to re-estimate normalization statistics each epoch.
    pub norm_samples: usize,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.02,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 1e-4,
            norm_samples: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

/// Cross-entropy SGD on every parameterized layer. Normalization
/// statistics are re-estimated from the first `norm_samples` training
/// images at the start of each epoch and are frozen afterwards.
pub fn train_base(net: &mut Network, train: &LabeledSet, val: &LabeledSet, cfg: &BaseTrainConfig, seed: u64) -> Result<Vec<BaseEpoch>> {
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(Error::contract("base training needs samples and a positive batch size"));
    }
    let sgd = SgdConfig {
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    sgd.validate()?;
    let keys = net.param_keys(0..net.depth());
    let mut params: Vec<ParamGroup> = keys
        .iter()
        .map(|&(l, s)| Ok(ParamGroup::new(format!("layers.{l}.{s}"), net.param(l, s)?.clone())))
        .collect::<Result<_>>()?;
    let calib_idx: Vec<usize> = (0..train.len().min(cfg.norm_samples.max(1))).collect();
    let calib = train.inputs.gather(&calib_idx)?;
    let mut rng = seeds::child_rng(seed, "harness/base_train/shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        net.calibrate_norms(&calib)?;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            params.iter_mut().for_each(ParamGroup::zero_grad);
            let mut tape = Tape::new();
            let mut bind = TapeBindings::new();
            for (i, (&(l, s), p)) in keys.iter().zip(&params).enumerate() {
                bind.bind(l, s, tape.param(i, p));
            }
            let x = tape.constant(train.inputs.gather(batch)?);
            let logits = net.forward_taped(&mut tape, x, 0, net.depth(), &bind)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let loss = tape.cross_entropy(logits, &labels)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            tape.backward_params(loss, &mut params)?;
            sgd_step(&mut params, &sgd)?;
            total += value * batch.len() as f64;
            for (&(l, s), p) in keys.iter().zip(&params) {
                let mut t = p.tensor.clone();
                t.zero_grad();
                net.set_param(l, s, t)?;
            }
        }
        let val_acc = accuracy(net, val)?;
        log::info!("base epoch {epoch}: loss {:.4}, val acc {:.4}", total / train.len() as f64, val_acc);
        history.push(BaseEpoch {
            epoch,
            train_loss: total / train.len() as f64,
            val_acc,
        });
    }
    Ok(history)
}
