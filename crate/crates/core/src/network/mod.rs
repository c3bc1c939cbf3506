//! Layered feed-forward models with prefix/suffix composition,
//! checkpoints and weight-space interpolation.
//!
//! Layer indices are positions in [`Network::layers`]. `forward_prefix(l, x)`
//! applies layers `0..l`, `forward_suffix(l, h)` applies `l..L`.

mod checkpoint;
mod data;
mod preset;

use std::collections::HashMap;

use rayon::prelude::*;

pub use checkpoint::{interpolate, read_sidecar, sidecar_path, Checkpoint, EntryKind, LayoutEntry, FORMAT_VERSION};
pub use data::{LabeledSet, PairSet};
pub use preset::{Architecture, Preset};

use crate::error::{Error, Result};
use crate::tensorcore::ops::{self, ConvGeom};
use crate::tensorcore::{Tape, Tensor, Var};

/// Fixed-statistics normalization. `mean` and `var` are never touched by
/// editing; only `scale` (γ) and `shift` (β) are trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenNorm {
    pub scale: Tensor,
    pub shift: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
    pub eps: f64,
}

impl FrozenNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: Tensor::full(&[channels], 1.0),
            shift: Tensor::zeros(&[channels]),
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0),
            eps: 1e-5,
        }
    }

    pub fn inv_std(&self) -> Vec<f64> {
        self.var.data().iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        pad: usize,
    },
    Relu,
    FrozenNorm(FrozenNorm),
    Flatten,
}

/// Trainable parameter slot names, in canonical order.
pub const PARAM_SLOTS: [&str; 2] = ["weight", "bias"];
/// Frozen buffer slot names of [`Layer::FrozenNorm`].
pub const BUFFER_SLOTS: [&str; 2] = ["running_mean", "running_var"];

impl Layer {
    pub fn dense(weight: Tensor, bias: Tensor) -> Result<Self> {
        ops::linear_dims(&[1, weight.shape().get(1).copied().unwrap_or(0)], weight.shape(), Some(bias.shape()))?;
        Ok(Layer::Dense { weight, bias })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::FrozenNorm(_) => "frozen_norm",
            Layer::Flatten => "flatten",
        }
    }

    /// Dense and conv layers are the edit targets.
    pub fn is_editable(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. } | Layer::FrozenNorm(_))
    }

    pub fn param(&self, slot: &str) -> Option<&Tensor> {
        match (self, slot) {
            (Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. }, "weight") => Some(weight),
            (Layer::Dense { bias, .. } | Layer::Conv2d { bias, .. }, "bias") => Some(bias),
            (Layer::FrozenNorm(n), "weight") => Some(&n.scale),
            (Layer::FrozenNorm(n), "bias") => Some(&n.shift),
            (Layer::FrozenNorm(n), "running_mean") => Some(&n.mean),
            (Layer::FrozenNorm(n), "running_var") => Some(&n.var),
            _ => None,
        }
    }

    fn param_mut(&mut self, slot: &str) -> Option<&mut Tensor> {
        match (self, slot) {
            (Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. }, "weight") => Some(weight),
            (Layer::Dense { bias, .. } | Layer::Conv2d { bias, .. }, "bias") => Some(bias),
            (Layer::FrozenNorm(n), "weight") => Some(&mut n.scale),
            (Layer::FrozenNorm(n), "bias") => Some(&mut n.shift),
            (Layer::FrozenNorm(n), "running_mean") => Some(&mut n.mean),
            (Layer::FrozenNorm(n), "running_var") => Some(&mut n.var),
            _ => None,
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense { weight, bias } => {
                let (n, din, dout) = ops::linear_dims(x.shape(), weight.shape(), Some(bias.shape()))?;
                let y = ops::linear_forward(x.data(), weight.data(), Some(bias.data()), n, din, dout);
                Tensor::new(vec![n, dout], y)
            }
            Layer::Conv2d {
                weight,
                bias,
                stride,
                pad,
            } => {
                let g = ConvGeom::infer(x.shape(), weight.shape(), *stride, *pad)?;
                let y = ops::conv2d_forward(x.data(), weight.data(), Some(bias.data()), &g);
                Tensor::new(g.out_shape(), y)
            }
            Layer::Relu => Tensor::new(x.shape().to_vec(), ops::relu_forward(x.data())),
            Layer::FrozenNorm(nrm) => {
                let (_, c, _) = ops::channel_dims(x.shape())?;
                if c != nrm.scale.len() {
                    return Err(Error::dim(
                        "frozen_norm",
                        "C",
                        format!("{c} channels vs {} statistics", nrm.scale.len()),
                    ));
                }
                let y = ops::channel_affine_forward(
                    x.data(),
                    x.shape(),
                    nrm.scale.data(),
                    nrm.shift.data(),
                    nrm.mean.data(),
                    &nrm.inv_std(),
                );
                Tensor::new(x.shape().to_vec(), y)
            }
            Layer::Flatten => {
                let n = x.batch_len();
                x.reshape(&[n, x.len() / n])
            }
        }
    }
}

/// Which tape variables stand in for network parameters during a taped forward.
#[derive(Debug, Default)]
pub struct TapeBindings {
    params: HashMap<(usize, &'static str), Var>,
    lowrank: Option<LowRankBinding>,
}

/// Factor variables of a low-rank perturbation added to one layer's
/// weight: `U: [n_out, r]`, `V: [n_in, r]`.
#[derive(Clone, Copy, Debug)]
pub struct LowRankBinding {
    pub layer: usize,
    pub u: Var,
    pub v: Var,
}

impl TapeBindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, layer: usize, slot: &'static str, v: Var) {
        self.params.insert((layer, slot), v);
    }

    pub fn with_lowrank(mut self, b: LowRankBinding) -> Self {
        self.lowrank = Some(b);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch_id: String,
    input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(arch_id: impl Into<String>, input_shape: Vec<usize>, layers: Vec<Layer>) -> Self {
        Self {
            arch_id: arch_id.into(),
            input_shape,
            layers,
        }
    }

    pub fn arch_id(&self) -> &str {
        &self.arch_id
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Layer count `L`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn editable_indices(&self) -> Vec<usize> {
        (0..self.depth()).filter(|&i| self.layers[i].is_editable()).collect()
    }

    pub fn parameterized_indices(&self) -> Vec<usize> {
        (0..self.depth()).filter(|&i| self.layers[i].is_parameterized()).collect()
    }

    pub fn require_editable(&self, l: usize) -> Result<()> {
        match self.layers.get(l) {
            Some(layer) if layer.is_editable() => Ok(()),
            Some(layer) => Err(Error::contract(format!(
                "layer {l} ({}) is not editable",
                layer.kind_name()
            ))),
            None => Err(Error::contract(format!("layer {l} out of range (L = {})", self.depth()))),
        }
    }

    /// End of the block that starts at editable layer `l`: the prefix
    /// length that includes `l` and the non-editable layers (norm,
    /// activation, flatten) up to the next editable layer.
    pub fn block_end(&self, l: usize) -> usize {
        (l + 1..self.depth())
            .find(|&j| self.layers[j].is_editable())
            .unwrap_or(self.depth())
    }

    pub fn param(&self, layer: usize, slot: &str) -> Result<&Tensor> {
        self.layers
            .get(layer)
            .and_then(|l| l.param(slot))
            .ok_or_else(|| Error::contract(format!("no parameter {slot} at layer {layer}")))
    }

    pub fn set_param(&mut self, layer: usize, slot: &str, value: Tensor) -> Result<()> {
        let p = self
            .layers
            .get_mut(layer)
            .and_then(|l| l.param_mut(slot))
            .ok_or_else(|| Error::contract(format!("no parameter {slot} at layer {layer}")))?;
        if p.shape() != value.shape() {
            return Err(Error::dim(
                "set_param",
                format!("layers.{layer}.{slot}"),
                format!("{:?} vs {:?}", p.shape(), value.shape()),
            ));
        }
        *p = value;
        Ok(())
    }

    /// Trainable `(layer, slot)` keys of the layers in `range`, canonical order.
    pub fn param_keys(&self, range: std::ops::Range<usize>) -> Vec<(usize, &'static str)> {
        range
            .filter(|&i| self.layers[i].is_parameterized())
            .flat_map(|i| PARAM_SLOTS.iter().map(move |&s| (i, s)))
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.sample_shape() != self.input_shape.as_slice() {
            return Err(Error::dim(
                "forward",
                "input",
                format!("sample shape {:?}, network expects {:?}", x.sample_shape(), self.input_shape),
            ));
        }
        Ok(())
    }

    /// Applies layers `from..to`.
    pub fn forward_range(&self, from: usize, to: usize, x: &Tensor) -> Result<Tensor> {
        if from > to || to > self.depth() {
            return Err(Error::contract(format!(
                "layer range {from}..{to} invalid for L = {}",
                self.depth()
            )));
        }
        let mut h = x.clone();
        for layer in &self.layers[from..to] {
            h = layer.apply(&h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_prefix(self.depth(), x)
    }

    /// `f≤l(x)`: the first `l` layers; `l = 0` is the identity.
    pub fn forward_prefix(&self, l: usize, x: &Tensor) -> Result<Tensor> {
        if l > self.depth() {
            return Err(Error::contract(format!("prefix length {l} > L = {}", self.depth())));
        }
        self.check_input(x)?;
        self.forward_range(0, l, x)
    }

    /// `f>l(h)`: the last `L - l` layers; `l = L` is the identity.
    pub fn forward_suffix(&self, l: usize, h: &Tensor) -> Result<Tensor> {
        if l > self.depth() {
            return Err(Error::contract(format!("suffix start {l} > L = {}", self.depth())));
        }
        self.forward_range(l, self.depth(), h)
    }

    /// Records layers `from..to` on `tape`. Parameters present in
    /// `bind` are used as given; all others enter as constants.
    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        x: Var,
        from: usize,
        to: usize,
        bind: &TapeBindings,
    ) -> Result<Var> {
        if from > to || to > self.depth() {
            return Err(Error::contract(format!("layer range {from}..{to} invalid")));
        }
        let mut h = x;
        for i in from..to {
            let layer = &self.layers[i];
            let get = |tape: &mut Tape, slot: &'static str| -> Var {
                match bind.params.get(&(i, slot)) {
                    Some(&v) => v,
                    None => tape.constant(layer.param(slot).expect("slot exists").clone()),
                }
            };
            h = match layer {
                Layer::Dense { .. } => {
                    let w = get(tape, "weight");
                    let b = get(tape, "bias");
                    let base = tape.linear(h, w, Some(b))?;
                    match bind.lowrank {
                        Some(lr) if lr.layer == i => {
                            let vt = tape.transpose(lr.v)?;
                            let t = tape.linear(h, vt, None)?;
                            let delta = tape.linear(t, lr.u, None)?;
                            tape.add(base, delta)?
                        }
                        _ => base,
                    }
                }
                Layer::Conv2d { weight, stride, pad, .. } => {
                    let w = get(tape, "weight");
                    let b = get(tape, "bias");
                    let base = tape.conv2d(h, w, Some(b), *stride, *pad)?;
                    match bind.lowrank {
                        Some(lr) if lr.layer == i => {
                            let delta = lowrank_conv_branch(tape, h, lr, weight.shape()[2], *stride, *pad)?;
                            tape.add(base, delta)?
                        }
                        _ => base,
                    }
                }
                Layer::Relu => tape.relu(h),
                Layer::FrozenNorm(n) => {
                    let s = get(tape, "weight");
                    let b = get(tape, "bias");
                    tape.channel_affine(h, s, b, n.mean.data(), &n.inv_std())?
                }
                Layer::Flatten => tape.flatten(h)?,
            };
        }
        Ok(h)
    }

    /// Logits for a batch, evaluated in shards.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.logits_from(0, x)
    }

    /// Suffix logits from cached layer-`from` features, evaluated in shards.
    pub fn logits_from(&self, from: usize, h: &Tensor) -> Result<Tensor> {
        let n = h.batch_len();
        let chunk = 128;
        let shards: Vec<Result<Tensor>> = (0..n.div_ceil(chunk))
            .into_par_iter()
            .map(|c| {
                let idx: Vec<usize> = (c * chunk..((c + 1) * chunk).min(n)).collect();
                self.forward_suffix(from, &h.gather(&idx)?)
            })
            .collect();
        let mut out: Option<Tensor> = None;
        for s in shards {
            let s = s?;
            out = Some(match out {
                None => s,
                Some(o) => Tensor::concat(&o, &s)?,
            });
        }
        out.ok_or_else(|| Error::contract("empty batch"))
    }

    /// Argmax predictions, ties resolved to the lowest class index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.check_input(x)?;
        self.predict_from(0, x)
    }

    pub fn predict_from(&self, from: usize, h: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits_from(from, h)?;
        Ok((0..logits.batch_len()).map(|i| ops::argmax(logits.sample(i))).collect())
    }

    /// Recomputes every [`FrozenNorm`]'s statistics from its input over `x`.
    /// Used only while training a base model; editing never calls it.
    pub fn calibrate_norms(&mut self, x: &Tensor) -> Result<()> {
        let mut h = x.clone();
        for i in 0..self.depth() {
            if let Layer::FrozenNorm(n) = &mut self.layers[i] {
                let (b, c, inner) = ops::channel_dims(h.shape())?;
                let count = (b * inner) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for s in 0..b {
                    for ch in 0..c {
                        let off = (s * c + ch) * inner;
                        mean[ch] += h.data()[off..off + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for s in 0..b {
                    for ch in 0..c {
                        let off = (s * c + ch) * inner;
                        var[ch] += h.data()[off..off + inner]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                n.mean = Tensor::new(vec![c], mean)?;
                n.var = Tensor::new(vec![c], var)?;
            }
            h = self.layers[i].apply(&h)?;
        }
        Ok(())
    }
}

/// The `U ∗ Vᵀ` branch of a low-rank conv update.
///
/// With stride 1 and same padding this is two 1×1 convolutions. Otherwise
/// `Vᵀ` is zero-padded into the centre tap of a `K×K` kernel so that it
/// samples exactly the positions the base convolution centres on.
fn lowrank_conv_branch(
    tape: &mut Tape,
    h: Var,
    lr: LowRankBinding,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let (c_out, r) = {
        let s = tape.value(lr.u).shape();
        (s[0], s[1])
    };
    let c_in = tape.value(lr.v).shape()[0];
    let vt = tape.transpose(lr.v)?;
    let vk = if stride == 1 && 2 * pad + 1 == k {
        let vk = tape.reshape(vt, &[r, c_in, 1, 1])?;
        tape.conv2d(h, vk, None, 1, 0)?
    } else {
        let kk = k * k;
        let centre = (k / 2) * k + k / 2;
        let embed = Tensor::from_fn(&[c_in, c_in * kk], |idx| {
            let (row, col) = (idx / (c_in * kk), idx % (c_in * kk));
            if col == row * kk + centre {
                1.0
            } else {
                0.0
            }
        });
        let e = tape.constant(embed);
        let padded = tape.matmul(vt, e)?;
        let vk = tape.reshape(padded, &[r, c_in, k, k])?;
        tape.conv2d(h, vk, None, stride, pad)?
    };
    let uk = tape.reshape(lr.u, &[c_out, r, 1, 1])?;
    tape.conv2d(vk, uk, None, 1, 0)
}

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy(net: &Network, data: &LabeledSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("accuracy on empty dataset"));
    }
    let pred = net.predict(&data.inputs)?;
    Ok(count_correct(&pred, &data.labels) as f64 / data.len() as f64)
}

/// Accuracy computed from features cached at layer `from`.
pub fn accuracy_from(net: &Network, from: usize, features: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::contract("accuracy on empty dataset"));
    }
    let pred = net.predict_from(from, features)?;
    Ok(count_correct(&pred, labels) as f64 / labels.len() as f64)
}

fn count_correct(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count()
}
