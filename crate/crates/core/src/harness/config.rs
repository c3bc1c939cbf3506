use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::BaseTrainConfig;
use crate::editors::default_alpha_grid;
use crate::error::{Error, Result};
use crate::network::Preset;
use crate::shiftlab::{Family, Region, ShiftSpec, SplitPolicy, Style};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    LocalFtCollision,
    GlobalFtCollision,
    Rewrite,
    DirectLowRank,
    LocalFtSupervised,
    GlobalFtForward,
    FullFt,
    OneLayerInterpolation,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::LocalFtCollision,
        Method::GlobalFtCollision,
        Method::Rewrite,
        Method::DirectLowRank,
        Method::LocalFtSupervised,
        Method::GlobalFtForward,
        Method::FullFt,
        Method::OneLayerInterpolation,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::LocalFtCollision => "local_ft_collision",
            Method::GlobalFtCollision => "global_ft_collision",
            Method::Rewrite => "rewrite",
            Method::DirectLowRank => "direct_lowrank",
            Method::LocalFtSupervised => "local_ft_supervised",
            Method::GlobalFtForward => "global_ft_forward",
            Method::FullFt => "full_ft",
            Method::OneLayerInterpolation => "one_layer_interp",
        }
    }

    pub fn is_low_rank(&self) -> bool {
        matches!(self, Method::Rewrite | Method::DirectLowRank)
    }

    pub fn default_lr_grid(&self) -> Vec<f64> {
        match self {
            Method::LocalFtCollision | Method::GlobalFtCollision => vec![1e-3, 1e-2, 1e-1],
            Method::Rewrite | Method::DirectLowRank => vec![1e-2, 1e-1, 1.0, 10.0, 100.0],
            _ => vec![1e-4, 1e-3, 1e-2],
        }
    }

    pub fn default_restarts(&self) -> usize {
        if self.is_low_rank() {
            10
        } else {
            1
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown edit method {s:?}")))
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(Method);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Size of the held-out pool editing triples are drawn from.
    pub edit_pool_per_class: usize,
    pub region: Region,
    pub style: Style,
    /// Blend factor of the style texture inside the region, in `(0, 1]`.
    pub style_strength: f64,
    pub style_variants: usize,
    pub split: SplitPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 150,
            val_per_class: 50,
            edit_pool_per_class: 20,
            region: Region::Object,
            style: Style::Snow,
            style_strength: 0.8,
            style_variants: 2,
            split: SplitPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSection {
    pub method: Method,
    pub layers: Vec<usize>,
    /// Empty: the method's default grid.
    pub lr_grid: Vec<f64>,
    /// `None`: 10 for low-rank methods, 1 otherwise.
    pub restarts: Option<usize>,
    pub rank: usize,
    pub max_epochs: usize,
    pub early_stop_ratio: f64,
    pub batch_size: Option<usize>,
    pub center_features: bool,
    pub init_scale: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for EditSection {
    fn default() -> Self {
        let e = crate::editors::EditConfig::default();
        Self {
            method: Method::FullFt,
            layers: vec![3],
            lr_grid: Vec::new(),
            restarts: None,
            rank: e.rank,
            max_epochs: 2000,
            early_stop_ratio: e.early_stop_ratio,
            batch_size: e.batch_size,
            center_features: e.center_features,
            init_scale: e.init_scale,
            momentum: e.momentum,
            weight_decay: e.weight_decay,
        }
    }
}

impl EditSection {
    pub fn lr_grid(&self) -> Vec<f64> {
        if self.lr_grid.is_empty() {
            self.method.default_lr_grid()
        } else {
            self.lr_grid.clone()
        }
    }

    pub fn restarts(&self) -> usize {
        self.restarts.unwrap_or_else(|| self.method.default_restarts())
    }
}

/// One JSON document describing a full experiment; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of the seed-derivation tree.
    pub seed: u64,
    pub preset: Preset,
    pub data: DataConfig,
    pub base: BaseTrainConfig,
    pub edit: EditSection,
    pub alphas: Vec<f64>,
    /// Shifts for the penalty tables.
    pub shifts: Vec<ShiftSpec>,
    /// Shifts added as eval sets to every interpolation sweep.
    pub sweep_shifts: Vec<ShiftSpec>,
    pub out_dir: PathBuf,
    /// Render SVG plots next to the plot-data files.
    pub svg: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: Preset::CnnSmall,
            data: DataConfig::default(),
            base: BaseTrainConfig::default(),
            edit: EditSection::default(),
            alphas: default_alpha_grid(),
            shifts: ShiftSpec::grid(),
            sweep_shifts: Family::ALL.iter().map(|&family| ShiftSpec { family, severity: 3 }).collect(),
            out_dir: PathBuf::from("runs/default"),
            svg: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.data;
        if d.classes < 2 || d.train_per_class == 0 || d.val_per_class == 0 || d.edit_pool_per_class == 0 {
            return bad("data: need ≥ 2 classes and positive per-class sizes".into());
        }
        if d.style_variants == 0 || !(d.style_strength > 0.0 && d.style_strength <= 1.0) {
            return bad("data: style_variants positive and style_strength in (0, 1]".into());
        }
        if d.split.n_train == 0 || d.split.s_train == 0 || !(d.split.min_train_ratio > 0.0 && d.split.min_train_ratio <= 1.0) {
            return bad("data.split: n_train, s_train positive and min_train_ratio in (0, 1]".into());
        }
        if d.split.s_train > d.style_variants {
            return bad("data.split.s_train exceeds style_variants".into());
        }
        let b = &self.base;
        if b.epochs == 0 || b.batch_size == 0 || !(b.learning_rate > 0.0) {
            return bad("base: epochs, batch_size and learning_rate must be positive".into());
        }
        let e = &self.edit;
        if e.layers.is_empty() {
            return bad("edit.layers is empty".into());
        }
        if e.lr_grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return bad("edit.lr_grid: learning rates must be positive".into());
        }
        if e.restarts == Some(0) || e.rank == 0 || e.max_epochs == 0 {
            return bad("edit: restarts, rank and max_epochs must be positive".into());
        }
        if e.batch_size == Some(0) || !(e.init_scale > 0.0) {
            return bad("edit: batch_size and init_scale must be positive".into());
        }
        if !(0.0..=1.0).contains(&e.early_stop_ratio) || !(0.0..1.0).contains(&e.momentum) || e.weight_decay < 0.0 {
            return bad("edit: early_stop_ratio in [0, 1], momentum in [0, 1), weight_decay ≥ 0".into());
        }
        if self.alphas.is_empty()
            || self.alphas.windows(2).any(|w| !(w[0] < w[1]))
            || !self.alphas.contains(&0.0)
            || !self.alphas.contains(&1.0)
        {
            return bad("alphas must be strictly increasing and contain 0 and 1".into());
        }
        // layer indices checked against the built architecture
        let net = crate::network::Architecture::new(self.preset, crate::shiftlab::IMAGE_SHAPE, d.classes).build(0)?;
        for &l in &e.layers {
            net.require_editable(l).map_err(|err| Error::Config(format!("edit.layers: {err}")))?;
        }
        Ok(())
    }
}
