use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FrozenNorm, Layer, Network};
use crate::error::{Error, Result};
use crate::seeds;
use crate::tensorcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "mlp-small")]
    MlpSmall,
    #[serde(rename = "cnn-small")]
    CnnSmall,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::MlpSmall => "mlp-small",
            Preset::CnnSmall => "cnn-small",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-small" => Ok(Preset::MlpSmall),
            "cnn-small" => Ok(Preset::CnnSmall),
            _ => Err(Error::Config(format!("unknown architecture preset {s:?}"))),
        }
    }
}

/// Preset plus input geometry; its string form (`cnn-small:3x32x32:10`)
/// is the architecture id stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub preset: Preset,
    pub input_shape: [usize; 3],
    pub classes: usize,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input_shape;
        write!(f, "{}:{c}x{h}x{w}:{}", self.preset.name(), self.classes)
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("malformed architecture id {s:?}"));
        let mut parts = s.split(':');
        let preset: Preset = parts.next().ok_or_else(bad)?.parse()?;
        let dims: Vec<usize> = parts
            .next()
            .ok_or_else(bad)?
            .split('x')
            .map(|d| d.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let classes = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if dims.len() != 3 || parts.next().is_some() {
            return Err(bad());
        }
        Ok(Self {
            preset,
            input_shape: [dims[0], dims[1], dims[2]],
            classes,
        })
    }
}

fn he_weight(shape: &[usize], fan_in: usize, rng: &mut impl rand::Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

fn dense(din: usize, dout: usize, rng: &mut impl rand::Rng) -> Layer {
    Layer::Dense {
        weight: he_weight(&[dout, din], din, rng),
        bias: Tensor::zeros(&[dout]),
    }
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut impl rand::Rng) -> Layer {
    Layer::Conv2d {
        weight: he_weight(&[cout, cin, k, k], cin * k * k, rng),
        bias: Tensor::zeros(&[cout]),
        stride,
        pad,
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k || (padded - k) % stride != 0 {
        return Err(Error::Config(format!(
            "input extent {size} incompatible with conv k={k} stride={stride} pad={pad}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

impl Architecture {
    pub fn new(preset: Preset, input_shape: [usize; 3], classes: usize) -> Self {
        Self {
            preset,
            input_shape,
            classes,
        }
    }

    /// Freshly initialized network (He-normal weights, zero biases,
    /// identity normalization statistics).
    ///
    /// - `mlp-small`: flatten → 128 → 64 → classes, ReLU between.
    /// - `cnn-small`: two 3×3 conv blocks (conv, frozen norm, ReLU) with
    ///   8 and 16 channels, then a 32-unit dense head.
    pub fn build(&self, seed: u64) -> Result<Network> {
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mut rng = seeds::child_rng(seed, "network/init");
        let [c, h, w] = self.input_shape;
        let layers = match self.preset {
            Preset::MlpSmall => vec![
                Layer::Flatten,
                dense(c * h * w, 128, &mut rng),
                Layer::Relu,
                dense(128, 64, &mut rng),
                Layer::Relu,
                dense(64, self.classes, &mut rng),
            ],
            Preset::CnnSmall => {
                let (h1, w1) = (conv_out(h, 3, 3, 2)?, conv_out(w, 3, 3, 2)?);
                vec![
                    conv(c, 8, 3, 3, 2, &mut rng),
                    Layer::FrozenNorm(FrozenNorm::identity(8)),
                    Layer::Relu,
                    conv(8, 16, 3, 1, 1, &mut rng),
                    Layer::FrozenNorm(FrozenNorm::identity(16)),
                    Layer::Relu,
                    Layer::Flatten,
                    dense(16 * h1 * w1, 32, &mut rng),
                    Layer::Relu,
                    dense(32, self.classes, &mut rng),
                ]
            }
        };
        Ok(Network::new(self.to_string(), self.input_shape.to_vec(), layers))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_round_trip() {
        let a = Architecture::new(Preset::CnnSmall, [3, 32, 32], 10);
        assert_eq!(a.to_string(), "cnn-small:3x32x32:10");
        assert_eq!(a.to_string().parse::<Architecture>().unwrap(), a);
        assert!("cnn-small:3x32:10".parse::<Architecture>().is_err());
        assert!("resnet:3x32x32:10".parse::<Architecture>().is_err());
    }

    #[test]
    fn presets_produce_logits() {
        for p in [Preset::MlpSmall, Preset::CnnSmall] {
            let net = Architecture::new(p, [3, 32, 32], 7).build(1).unwrap();
            let x = Tensor::full(&[2, 3, 32, 32], 0.5);
            assert_eq!(net.forward(&x).unwrap().shape(), &[2, 7]);
        }
    }
}
