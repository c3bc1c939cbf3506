//! OOD penalties and robustness-curve data.
//!
//! Penalties are raw accuracy differences in `[-1, 1]`:
//!
//! - original task: `Acc(f_edited, D̃_orig) − Acc(f_orig, D̃_orig)`
//! - editing task: `Acc(f_edited, D̃_edit) − Acc(f_edited, D_edit)`
//!
//! where `D̃` is a shifted copy of the clean validation set `D`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::editors::CurveTable;
use crate::error::{Error, Result};
use crate::network::{accuracy, LabeledSet, Network};
use crate::shiftlab::{Family, ShiftSpec};

pub fn orig_task_ood_penalty(f_edited: &Network, f_orig: &Network, shifted_orig_val: &LabeledSet) -> Result<f64> {
    Ok(accuracy(f_edited, shifted_orig_val)? - accuracy(f_orig, shifted_orig_val)?)
}

pub fn edit_task_ood_penalty(f_edited: &Network, shifted_edit_val: &LabeledSet, clean_edit_val: &LabeledSet) -> Result<f64> {
    Ok(accuracy(f_edited, shifted_edit_val)? - accuracy(f_edited, clean_edit_val)?)
}

/// One penalty measurement; the two penalties are recomputed from the
/// stored accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyReport {
    pub method: String,
    pub layer: usize,
    pub seed: u64,
    pub shift_family: Family,
    pub severity: u8,
    /// `Acc(f_edited, D_orig)`
    pub acc_orig_clean: f64,
    /// `Acc(f_orig, D̃_orig)`
    pub acc_orig_shift_origmodel: f64,
    /// `Acc(f_edited, D̃_orig)`
    pub acc_orig_shift_edited: f64,
    /// `Acc(f_edited, D_edit)`
    pub acc_edit_clean: f64,
    /// `Acc(f_edited, D̃_edit)`
    pub acc_edit_shift: f64,
    pub orig_penalty: f64,
    pub edit_penalty: f64,
}

/// The clean and shifted validation sets a report is measured on.
pub struct PenaltyInputs<'a> {
    pub orig_clean: &'a LabeledSet,
    pub orig_shifted: &'a LabeledSet,
    pub edit_clean: &'a LabeledSet,
    pub edit_shifted: &'a LabeledSet,
}

impl PenaltyReport {
    pub fn shift(&self) -> ShiftSpec {
        ShiftSpec {
            family: self.shift_family,
            severity: self.severity,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_components(
        method: impl Into<String>,
        layer: usize,
        seed: u64,
        shift: ShiftSpec,
        acc_orig_clean: f64,
        acc_orig_shift_origmodel: f64,
        acc_orig_shift_edited: f64,
        acc_edit_clean: f64,
        acc_edit_shift: f64,
    ) -> Self {
        Self {
            method: method.into(),
            layer,
            seed,
            shift_family: shift.family,
            severity: shift.severity,
            acc_orig_clean,
            acc_orig_shift_origmodel,
            acc_orig_shift_edited,
            acc_edit_clean,
            acc_edit_shift,
            orig_penalty: acc_orig_shift_edited - acc_orig_shift_origmodel,
            edit_penalty: acc_edit_shift - acc_edit_clean,
        }
    }

    pub fn measure(
        method: impl Into<String>,
        layer: usize,
        seed: u64,
        shift: ShiftSpec,
        f_orig: &Network,
        f_edited: &Network,
        sets: &PenaltyInputs<'_>,
    ) -> Result<Self> {
        Ok(Self::from_components(
            method,
            layer,
            seed,
            shift,
            accuracy(f_edited, sets.orig_clean)?,
            accuracy(f_orig, sets.orig_shifted)?,
            accuracy(f_edited, sets.orig_shifted)?,
            accuracy(f_edited, sets.edit_clean)?,
            accuracy(f_edited, sets.edit_shifted)?,
        ))
    }

    /// Stored penalties agree with the stored components.
    pub fn is_consistent(&self, tol: f64) -> bool {
        (self.orig_penalty - (self.acc_orig_shift_edited - self.acc_orig_shift_origmodel)).abs() <= tol
            && (self.edit_penalty - (self.acc_edit_shift - self.acc_edit_clean)).abs() <= tol
    }
}

pub fn write_penalties_csv(path: &Path, rows: &[PenaltyReport]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(PENALTY_COLUMNS).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_penalties_csv(path: &Path) -> Result<Vec<PenaltyReport>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub const PENALTY_COLUMNS: [&str; 12] = [
    "method",
    "layer",
    "seed",
    "shift_family",
    "severity",
    "acc_orig_clean",
    "acc_orig_shift_origmodel",
    "acc_orig_shift_edited",
    "acc_edit_clean",
    "acc_edit_shift",
    "orig_penalty",
    "edit_penalty",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustnessPoint {
    /// In-distribution accuracy.
    pub x: f64,
    /// Out-of-distribution accuracy.
    pub y: f64,
    pub alpha: f64,
}

/// `(ID accuracy, OOD accuracy)` pairs along a sweep, ordered by α.
pub fn robustness_curve(sweep: &CurveTable, id_eval: &str, ood_eval: &str) -> Result<Vec<RobustnessPoint>> {
    sweep
        .alphas()
        .into_iter()
        .map(|alpha| {
            let get = |name: &str| {
                sweep
                    .accuracy_at(name, alpha)
                    .ok_or_else(|| Error::contract(format!("eval {name:?} missing at alpha {alpha}")))
            };
            Ok(RobustnessPoint {
                x: get(id_eval)?,
                y: get(ood_eval)?,
                alpha,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeveritySummary {
    pub severity: u8,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

/// Mean ± population std of `value` over reports, per severity (ascending).
pub fn aggregate_by_severity(reports: &[PenaltyReport], value: impl Fn(&PenaltyReport) -> f64) -> Vec<SeveritySummary> {
    (1..=5u8)
        .filter_map(|severity| {
            let v: Vec<f64> = reports.iter().filter(|r| r.severity == severity).map(&value).collect();
            if v.is_empty() {
                return None;
            }
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            Some(SeveritySummary {
                severity,
                mean,
                std,
                count: v.len(),
            })
        })
        .collect()
}
