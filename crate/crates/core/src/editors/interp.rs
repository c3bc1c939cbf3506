//! Weight-space linear interpolation between an original and an edited
//! checkpoint, evaluated along an α grid.

use std::fmt::Write as _;

use super::{edit_local_ft_supervised, EditConfig, EditTrace, SupervisedData};
use crate::error::{Error, Result};
use crate::network::{accuracy, interpolate, Checkpoint, LabeledSet, Network};

/// `{0.0, 0.1, …, 1.0}`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub alpha: f64,
    pub eval: String,
    pub accuracy: f64,
}

/// Rows keyed by `(α, eval name)`, α-major in grid order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CurveTable {
    pub rows: Vec<CurveRow>,
}

impl CurveTable {
    pub fn alphas(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.rows {
            if out.last() != Some(&r.alpha) {
                out.push(r.alpha);
            }
        }
        out
    }

    pub fn evals(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.eval) {
                out.push(r.eval.clone());
            }
        }
        out
    }

    /// `(α, accuracy)` pairs for one eval set.
    pub fn series(&self, eval: &str) -> Vec<(f64, f64)> {
        self.rows.iter().filter(|r| r.eval == eval).map(|r| (r.alpha, r.accuracy)).collect()
    }

    pub fn accuracy_at(&self, eval: &str, alpha: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.eval == eval && r.alpha == alpha).map(|r| r.accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,eval,accuracy\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.alpha, r.eval, r.accuracy);
        }
        s
    }
}

fn check_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.iter().any(|a| !a.is_finite()) || alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("alpha grid must be finite and strictly increasing"));
    }
    if !alphas.contains(&0.0) || !alphas.contains(&1.0) {
        return Err(Error::contract("alpha grid must include 0 and 1"));
    }
    Ok(())
}

/// Accuracy of `(1−α)·orig + α·edited` on every eval set, for each α.
pub fn interpolation_sweep(
    template: &Network,
    orig: &Checkpoint,
    edited: &Checkpoint,
    alphas: &[f64],
    evals: &[(String, &LabeledSet)],
) -> Result<CurveTable> {
    check_alphas(alphas)?;
    if !orig.same_layout(edited) {
        return Err(Error::contract("interpolation endpoints have different layouts"));
    }
    let mut rows = Vec::with_capacity(alphas.len() * evals.len());
    for &alpha in alphas {
        let net = interpolate(orig, edited, alpha)?.instantiate(template)?;
        for (name, data) in evals {
            rows.push(CurveRow { alpha, eval: name.clone(), accuracy: accuracy(&net, data)? });
        }
    }
    Ok(CurveTable { rows })
}

#[derive(Clone, Debug)]
pub struct OneLayerInterpolation {
    pub curve: CurveTable,
    pub trace: EditTrace,
    pub edited: Network,
}

/// Local supervised fine-tuning of layer `cfg.layer` followed by an
/// interpolation sweep between the original and edited weights.
pub fn one_layer_interpolation(
    net: &Network,
    data: &SupervisedData,
    cfg: &EditConfig,
    alphas: &[f64],
    evals: &[(String, &LabeledSet)],
) -> Result<OneLayerInterpolation> {
    check_alphas(alphas)?;
    let (edited, trace) = edit_local_ft_supervised(net, data, cfg)?;
    let curve = interpolation_sweep(net, &Checkpoint::capture(net), &Checkpoint::capture(&edited), alphas, evals)?;
    Ok(OneLayerInterpolation { curve, trace, edited })
}
