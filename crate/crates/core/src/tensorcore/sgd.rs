use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Whether weight decay applies to a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamClass {
    Weight,
    Bias,
}

impl ParamClass {
    /// Names containing `"weight"` are decayed; everything else is not.
    pub fn of(name: &str) -> Self {
        if name.contains("weight") {
            ParamClass::Weight
        } else {
            ParamClass::Bias
        }
    }
}

/// A trainable tensor together with its SGD momentum buffer.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub name: String,
    pub tensor: Tensor,
    momentum_buffer: Vec<f64>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let momentum_buffer = vec![0.0; tensor.len()];
        Self {
            name: name.into(),
            tensor,
            momentum_buffer,
        }
    }

    pub fn class(&self) -> ParamClass {
        ParamClass::of(&self.name)
    }

    pub fn momentum_buffer(&self) -> &[f64] {
        &self.momentum_buffer
    }

    pub fn zero_grad(&mut self) {
        self.tensor.zero_grad();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract(format!("learning rate {} invalid", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract(format!("momentum {} not in [0,1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::contract(format!("weight decay {} negative", self.weight_decay)));
        }
        Ok(())
    }
}

/// One SGD-with-momentum step:
/// `v ← momentum·v + g + decay·p` (decay for weight-class only), `p ← p − lr·v`.
///
/// Gradients are left in place; callers zero them before the next backward.
pub fn sgd_step(params: &mut [ParamGroup], cfg: &SgdConfig) -> Result<()> {
    cfg.validate()?;
    if let Some(p) = params.iter().find(|p| p.tensor.grad().is_none()) {
        return Err(Error::contract(format!("parameter {} has no gradient", p.name)));
    }
    for p in params.iter_mut() {
        let decay = match p.class() {
            ParamClass::Weight => cfg.weight_decay,
            ParamClass::Bias => 0.0,
        };
        let g = p.tensor.grad().expect("checked above").to_vec();
        let buf = &mut p.momentum_buffer;
        let data = p.tensor.data_mut();
        for i in 0..data.len() {
            let d = g[i] + decay * data[i];
            buf[i] = cfg.momentum * buf[i] + d;
            data[i] -= cfg.learning_rate * buf[i];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(name: &str, v: f64) -> ParamGroup {
        ParamGroup::new(name, Tensor::new(vec![1], vec![v]).unwrap())
    }

    #[test]
    fn defaults_follow_protocol() {
        let c = SgdConfig::default();
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 1e-4);
    }

    #[test]
    fn vanilla_step() {
        let mut p = vec![scalar_param("w.weight", 1.0)];
        p[0].tensor.accumulate_grad(&[2.0]).unwrap();
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_step(&mut p, &cfg).unwrap();
        assert!((p[0].tensor.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = vec![scalar_param("w.weight", 0.0)];
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        p[0].tensor.accumulate_grad(&[1.0]).unwrap();
        sgd_step(&mut p, &cfg).unwrap();
        assert!((p[0].tensor.data()[0] + 0.1).abs() < 1e-15);
        p[0].zero_grad();
        p[0].tensor.accumulate_grad(&[1.0]).unwrap();
        sgd_step(&mut p, &cfg).unwrap();
        assert!((p[0].momentum_buffer()[0] - 1.9).abs() < 1e-15);
        assert!((p[0].tensor.data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn bias_is_not_decayed() {
        let run = |decay: f64| {
            let mut p = vec![scalar_param("layer.bias", 0.7)];
            let cfg = SgdConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                weight_decay: decay,
            };
            for _ in 0..5 {
                p[0].zero_grad();
                p[0].tensor.accumulate_grad(&[0.3]).unwrap();
                sgd_step(&mut p, &cfg).unwrap();
            }
            p[0].tensor.data()[0]
        };
        assert_eq!(run(1e-4).to_bits(), run(0.0).to_bits());
    }

    #[test]
    fn weight_is_decayed() {
        let mut p = vec![scalar_param("layer.weight", 1.0)];
        p[0].tensor.accumulate_grad(&[0.0]).unwrap();
        let cfg = SgdConfig {
            learning_rate: 1.0,
            momentum: 0.0,
            weight_decay: 0.5,
        };
        sgd_step(&mut p, &cfg).unwrap();
        assert_eq!(p[0].tensor.data()[0], 0.5);
    }

    #[test]
    fn missing_grad_is_error() {
        let mut p = vec![scalar_param("w.weight", 1.0)];
        assert!(matches!(
            sgd_step(&mut p, &SgdConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = vec![scalar_param("a.weight", 0.3), scalar_param("a.bias", -0.2)];
            for step in 0..4 {
                for q in p.iter_mut() {
                    q.zero_grad();
                    q.tensor.accumulate_grad(&[0.1 * step as f64 - 0.15]).unwrap();
                }
                sgd_step(&mut p, &SgdConfig::with_lr(0.2)).unwrap();
            }
            p.iter().map(|q| q.tensor.data()[0].to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
