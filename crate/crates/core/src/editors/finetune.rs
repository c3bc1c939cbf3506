use super::engine::{optimize, Objective};
use super::{EditConfig, EditData, EditTrace, SupervisedData};
use crate::error::{Error, Result};
use crate::network::{accuracy_from, Network, TapeBindings};
use crate::tensorcore::{ParamGroup, Tape, Tensor, Var};

enum Target {
    /// Collision MSE at the end of this prefix length.
    Collision(usize),
    CrossEntropy,
}

/// Plain parameter fine-tuning over a set of `(layer, slot)` keys, with
/// activations cached at `start` (everything before it is frozen).
struct FineTune<'a> {
    work: Network,
    keys: &'a [(usize, &'static str)],
    start: usize,
    target: Target,
    train_a: Tensor,
    train_b: Option<Tensor>,
    train_labels: Vec<usize>,
    val_features: Tensor,
    val_labels: Vec<usize>,
}

impl Objective for FineTune<'_> {
    fn train_len(&self) -> usize {
        self.train_labels.len()
    }

    fn loss(&self, tape: &mut Tape, vars: &[Var], batch: &[usize]) -> Result<Var> {
        let mut bind = TapeBindings::new();
        for (&(layer, slot), &v) in self.keys.iter().zip(vars) {
            bind.bind(layer, slot, v);
        }
        let a = tape.constant(self.train_a.gather(batch)?);
        match self.target {
            Target::Collision(end) => {
                let b = self.train_b.as_ref().expect("collision objective carries x′ features");
                let b = tape.constant(b.gather(batch)?);
                let fa = self.work.forward_taped(tape, a, self.start, end, &bind)?;
                let fb = self.work.forward_taped(tape, b, self.start, end, &bind)?;
                tape.mse(fa, fb)
            }
            Target::CrossEntropy => {
                let logits = self.work.forward_taped(tape, a, self.start, self.work.depth(), &bind)?;
                let labels: Vec<usize> = batch.iter().map(|&i| self.train_labels[i]).collect();
                tape.cross_entropy(logits, &labels)
            }
        }
    }

    fn val_accuracy(&mut self, params: &[ParamGroup]) -> Result<f64> {
        load(&mut self.work, self.keys, params)?;
        accuracy_from(&self.work, self.start, &self.val_features, &self.val_labels)
    }
}

fn load(net: &mut Network, keys: &[(usize, &'static str)], params: &[ParamGroup]) -> Result<()> {
    for (&(layer, slot), p) in keys.iter().zip(params) {
        let mut t = p.tensor.clone();
        t.zero_grad();
        net.set_param(layer, slot, t)?;
    }
    Ok(())
}

fn groups(net: &Network, keys: &[(usize, &'static str)]) -> Result<Vec<ParamGroup>> {
    keys.iter()
        .map(|&(layer, slot)| {
            net.param(layer, slot)
                .map(|t| ParamGroup::new(format!("layers.{layer}.{slot}"), t.clone()))
        })
        .collect()
}

fn run(
    net: &Network,
    keys: Vec<(usize, &'static str)>,
    start: usize,
    target: Target,
    train: (&Tensor, Option<&Tensor>, &[usize]),
    val: (&Tensor, &[usize]),
    cfg: &EditConfig,
) -> Result<(Network, EditTrace)> {
    if keys.is_empty() {
        return Err(Error::contract("no trainable parameters in the selected layers"));
    }
    let (x, x_prime, labels) = train;
    let train_a = net.forward_prefix(start, x)?;
    let train_b = x_prime.map(|xp| net.forward_prefix(start, xp)).transpose()?;
    let val_features = net.forward_prefix(start, val.0)?;
    let mut obj = FineTune {
        work: net.clone(),
        keys: &keys,
        start,
        target,
        train_a,
        train_b,
        train_labels: labels.to_vec(),
        val_features,
        val_labels: val.1.to_vec(),
    };
    let params = groups(net, &keys)?;
    let (best, trace) = optimize(&mut obj, params, cfg)?;
    let mut edited = net.clone();
    load(&mut edited, &keys, &best)?;
    Ok((edited, trace))
}

fn collision(net: &Network, data: &EditData, cfg: &EditConfig, keys: Vec<(usize, &'static str)>, start: usize) -> Result<(Network, EditTrace)> {
    net.require_editable(cfg.layer)?;
    data.validate()?;
    run(
        net,
        keys,
        start,
        Target::Collision(net.block_end(cfg.layer)),
        (&data.train.x, Some(&data.train.x_prime), &data.train.labels),
        (&data.val.inputs, &data.val.labels),
        cfg,
    )
}

/// Local fine-tuning for output collision: trains layer `l` only.
pub fn edit_local_ft_collision(net: &Network, data: &EditData, cfg: &EditConfig) -> Result<(Network, EditTrace)> {
    let l = cfg.layer;
    net.require_editable(l)?;
    collision(net, data, cfg, net.param_keys(l..l + 1), l)
}

/// Global fine-tuning for output collision: trains every parameterized layer up to `l`.
pub fn edit_global_ft_collision(net: &Network, data: &EditData, cfg: &EditConfig) -> Result<(Network, EditTrace)> {
    let l = cfg.layer;
    net.require_editable(l)?;
    let first = net.parameterized_indices()[0];
    collision(net, data, cfg, net.param_keys(0..l + 1), first.min(l))
}

fn output_classes(net: &Network) -> Result<usize> {
    let mut shape = vec![1];
    shape.extend_from_slice(net.input_shape());
    let y = net.forward(&Tensor::zeros(&shape))?;
    Ok(y.shape()[1])
}

fn supervised(net: &Network, data: &SupervisedData, cfg: &EditConfig, keys: Vec<(usize, &'static str)>, start: usize) -> Result<(Network, EditTrace)> {
    data.validate(output_classes(net)?)?;
    run(
        net,
        keys,
        start,
        Target::CrossEntropy,
        (&data.train.inputs, None, &data.train.labels),
        (&data.val.inputs, &data.val.labels),
        cfg,
    )
}

/// Local fine-tuning at layer `l` on `(x′, y)` with cross-entropy.
pub fn edit_local_ft_supervised(net: &Network, data: &SupervisedData, cfg: &EditConfig) -> Result<(Network, EditTrace)> {
    let l = cfg.layer;
    net.require_editable(l)?;
    supervised(net, data, cfg, net.param_keys(l..l + 1), l)
}

/// Global fine-tuning from layer `l` forward.
pub fn edit_global_ft_forward(net: &Network, data: &SupervisedData, cfg: &EditConfig) -> Result<(Network, EditTrace)> {
    let l = cfg.layer;
    net.require_editable(l)?;
    supervised(net, data, cfg, net.param_keys(l..net.depth()), l)
}

/// Fine-tunes every parameterized layer; `cfg.layer` is ignored.
pub fn edit_full_ft(net: &Network, data: &SupervisedData, cfg: &EditConfig) -> Result<(Network, EditTrace)> {
    let first = *net
        .parameterized_indices()
        .first()
        .ok_or_else(|| Error::contract("network has no parameters"))?;
    supervised(net, data, cfg, net.param_keys(0..net.depth()), first)
}
