//! Editing algorithms. Each takes a trained [`Network`] and an editing
//! dataset and returns an edited copy plus an [`EditTrace`]; the input
//! network is never mutated.
//!
//! Output-collision editors minimize `(1/n_l)·‖f≤l(x) − f≤l(x′)‖²` at the
//! end of layer `l`'s block (after its normalization and activation).
//! Supervised editors minimize cross-entropy of `f(x′)` against `y`.
//!
//! | editor | trained layers |
//! |---|---|
//! | [`edit_local_ft_collision`] | `l` |
//! | [`edit_global_ft_collision`] | all parameterized layers `≤ l` |
//! | [`edit_rewrite`] | rank-r `U` on `l`, `V` fixed from feature statistics |
//! | [`edit_direct_lowrank`] | rank-r `U`, `V` on `l` |
//! | [`edit_local_ft_supervised`] | `l` |
//! | [`edit_global_ft_forward`] | all parameterized layers `≥ l` |
//! | [`edit_full_ft`] | every parameterized layer |

mod engine;
mod finetune;
mod interp;
mod lowrank;
mod trace;

use serde::{Deserialize, Serialize};

pub use engine::DIVERGENCE_FACTOR;
pub use finetune::{
    edit_full_ft, edit_global_ft_collision, edit_global_ft_forward, edit_local_ft_collision,
    edit_local_ft_supervised,
};
pub use interp::{default_alpha_grid, interpolation_sweep, one_layer_interpolation, CurveRow, CurveTable, OneLayerInterpolation};
pub use lowrank::{
    edit_direct_lowrank, edit_rewrite, key_vectors, lowrank_collision_grads, numerical_rank, rewrite_key_directions,
    second_moment, LowRankUpdate,
};
pub use trace::{first_stop_index, EarlyStopping, EditTrace, EpochRecord, Observation, StopReason};

use crate::error::{Error, Result};
use crate::network::{LabeledSet, PairSet};
use crate::tensorcore::SgdConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    /// Index of the edited layer in `Network::layers`.
    pub layer: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_ratio: f64,
    pub rank: usize,
    pub seed: u64,
    /// `None`: full batch up to 256 samples, else 64.
    pub batch_size: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rewriting only: use the covariance instead of the second moment.
    pub center_features: bool,
    /// Standard deviation of the Gaussian low-rank factor initialization.
    pub init_scale: f64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            layer: 0,
            learning_rate: 0.01,
            max_epochs: 10_000,
            early_stop_ratio: 0.5,
            rank: 1,
            seed: 0,
            batch_size: None,
            momentum: 0.9,
            weight_decay: 1e-4,
            center_features: false,
            init_scale: 1e-3,
        }
    }
}

impl EditConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn effective_batch_size(&self, n: usize) -> usize {
        match self.batch_size {
            Some(b) => b.clamp(1, n.max(1)),
            None if n <= 256 => n,
            None => 64,
        }
    }
}

/// Collision-style editing data: training pairs and `(x′, y)` validation.
#[derive(Clone, Debug)]
pub struct EditData {
    pub train: PairSet,
    pub val: LabeledSet,
}

/// Supervised editing data: `(x′, y)` for both training and validation.
#[derive(Clone, Debug)]
pub struct SupervisedData {
    pub train: LabeledSet,
    pub val: LabeledSet,
}

impl EditData {
    pub fn supervised(&self) -> SupervisedData {
        SupervisedData {
            train: self.train.primed(),
            val: self.val.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::contract("no editing training pairs"));
        }
        if self.val.is_empty() {
            return Err(Error::contract("no editing validation samples"));
        }
        Ok(())
    }
}

impl SupervisedData {
    fn validate(&self, classes: usize) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::contract("no editing training samples"));
        }
        if self.val.is_empty() {
            return Err(Error::contract("no editing validation samples"));
        }
        if let Some(&y) = self.train.labels.iter().chain(&self.val.labels).find(|&&y| y >= classes) {
            return Err(Error::contract(format!("label {y} out of range for {classes} classes")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
