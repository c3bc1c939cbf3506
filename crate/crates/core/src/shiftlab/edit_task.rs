use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::base::{object_mask, BaseDataset, IMAGE_SHAPE};
use crate::editors::EditData;
use crate::error::{Error, Result};
use crate::network::{LabeledSet, PairSet};
use crate::seeds;
use crate::tensorcore::Tensor;

/// Where the style texture is painted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Object,
    Background,
    /// Fixed rectangle `[top, top+height) × [left, left+width)`.
    Box { top: usize, left: usize, height: usize, width: usize },
}

impl Region {
    fn mask(&self, base: &BaseDataset, i: usize) -> Vec<bool> {
        let [_, h, w] = IMAGE_SHAPE;
        match *self {
            Region::Object => object_mask(&base.meta[i]),
            Region::Background => object_mask(&base.meta[i]).into_iter().map(|m| !m).collect(),
            Region::Box { top, left, height, width } => (0..h * w)
                .map(|p| {
                    let (y, x) = (p / w, p % w);
                    y >= top && y < top + height && x >= left && x < left + width
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    /// Near-white with bluish flakes.
    Snow,
    /// Two-tone checkerboard.
    Checker,
    /// Coarse brown noise.
    Grain,
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Style::Snow => "snow",
            Style::Checker => "checker",
            Style::Grain => "grain",
        })
    }
}

impl FromStr for Style {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snow" => Ok(Style::Snow),
            "checker" => Ok(Style::Checker),
            "grain" => Ok(Style::Grain),
            _ => Err(Error::Config(format!("unknown style {s:?}"))),
        }
    }
}

impl Style {
    /// A full `[C, H, W]` texture image.
    fn texture(&self, rng: &mut impl Rng) -> Vec<f64> {
        let [c, h, w] = IMAGE_SHAPE;
        let mut out = vec![0.0; c * h * w];
        match self {
            Style::Snow => {
                let base: f64 = rng.random_range(0.82..0.92);
                for p in 0..h * w {
                    let flake = rng.random_bool(0.15);
                    let v = base + rng.random_range(-0.05..0.05);
                    for ch in 0..c {
                        let tint = if flake { [0.05, 0.08, 0.1][ch] } else { [-0.04, 0.0, 0.06][ch] };
                        out[ch * h * w + p] = (v + tint).clamp(0.0, 1.0);
                    }
                }
            }
            Style::Checker => {
                let cell = rng.random_range(2..=4);
                let (a, b) = (rng.random_range(0.05..0.25), rng.random_range(0.7..0.9));
                let (oy, ox) = (rng.random_range(0..cell), rng.random_range(0..cell));
                for p in 0..h * w {
                    let on = ((p / w + oy) / cell + (p % w + ox) / cell) % 2 == 0;
                    for ch in 0..c {
                        out[ch * h * w + p] = if on { a } else { b };
                    }
                }
            }
            Style::Grain => {
                for p in 0..h * w {
                    let v = rng.random_range(0.2..0.6);
                    for (ch, k) in [1.0, 0.7, 0.4].iter().enumerate() {
                        out[ch * h * w + p] = v * k;
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditTriple {
    /// Index of the source image in the base pool.
    pub image_id: usize,
    pub style_variant: usize,
    pub y: usize,
    pub x: Tensor,
    pub x_prime: Tensor,
    /// Row-major `H×W` region mask.
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct EditTask {
    pub triples: Vec<EditTriple>,
    /// Images whose region mask was empty.
    pub skipped: usize,
}

/// One triple per (image, style variant); pixels outside the region equal `x`.
pub fn generate_edit_task(base: &BaseDataset, region: Region, style: Style, style_variants: usize) -> Result<EditTask> {
    generate_blended_edit_task(base, region, style, style_variants, 1.0)
}

/// As [`generate_edit_task`], with region pixels set to
/// `x + strength·(texture − x)` so some of the original content shows through.
pub fn generate_blended_edit_task(
    base: &BaseDataset,
    region: Region,
    style: Style,
    style_variants: usize,
    strength: f64,
) -> Result<EditTask> {
    if style_variants == 0 {
        return Err(Error::contract("style_variants must be positive"));
    }
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(Error::contract("style strength must lie in (0, 1]"));
    }
    let [c, h, w] = IMAGE_SHAPE;
    let mut triples = Vec::new();
    let mut skipped = 0;
    for i in 0..base.len() {
        let mask = region.mask(base, i);
        if !mask.iter().any(|&m| m) {
            skipped += 1;
            continue;
        }
        let x = Tensor::new(IMAGE_SHAPE.to_vec(), base.image(i).to_vec())?;
        for v in 0..style_variants {
            let mut rng = seeds::child_rng(base.seed, &format!("shiftlab/style/{style}/{i}/{v}"));
            let tex = style.texture(&mut rng);
            let mut xp = x.data().to_vec();
            for ch in 0..c {
                for p in (0..h * w).filter(|&p| mask[p]) {
                    let k = ch * h * w + p;
                    xp[k] = if strength == 1.0 { tex[k] } else { xp[k] + strength * (tex[k] - xp[k]) };
                }
            }
            triples.push(EditTriple {
                image_id: i,
                style_variant: v,
                y: base.data.labels[i],
                x: x.clone(),
                x_prime: Tensor::new(IMAGE_SHAPE.to_vec(), xp)?,
                mask: mask.clone(),
            });
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} images skipped: empty region mask");
    }
    if triples.is_empty() {
        return Err(Error::contract("region mask empty for every image"));
    }
    Ok(EditTask { triples, skipped })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitPolicy {
    pub n_train: usize,
    /// Minimum training ratio ρ.
    pub min_train_ratio: f64,
    pub s_train: usize,
    pub seed: u64,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        Self {
            n_train: 10,
            min_train_ratio: 0.5,
            s_train: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EditSplit {
    pub train: Vec<EditTriple>,
    pub val: Vec<EditTriple>,
    pub eligible_classes: Vec<usize>,
    pub excluded_classes: Vec<usize>,
}

fn stack(triples: &[EditTriple], pick: impl Fn(&EditTriple) -> &Tensor) -> Result<Tensor> {
    let rows: Vec<&[f64]> = triples.iter().map(|t| pick(t).data()).collect();
    Tensor::stack(&IMAGE_SHAPE, &rows)
}

impl EditSplit {
    /// Training pairs and the `(x′, y)` validation set.
    pub fn edit_data(&self) -> Result<EditData> {
        Ok(EditData {
            train: PairSet::new(stack(&self.train, |t| &t.x)?, stack(&self.train, |t| &t.x_prime)?, labels(&self.train))?,
            val: self.val_primed()?,
        })
    }

    pub fn val_primed(&self) -> Result<LabeledSet> {
        LabeledSet::new(stack(&self.val, |t| &t.x_prime)?, labels(&self.val))
    }

    pub fn val_originals(&self) -> Result<LabeledSet> {
        LabeledSet::new(stack(&self.val, |t| &t.x)?, labels(&self.val))
    }
}

fn labels(t: &[EditTriple]) -> Vec<usize> {
    t.iter().map(|t| t.y).collect()
}

/// Per class: eligible when it has at least `n_train/ρ` triples and at
/// least `n_train` images with `s_train` variants each. For each eligible
/// class `n_train` images are drawn and `s_train` of each image's variants
/// go to training; every other triple of an eligible class is validation.
pub fn split_edit_dataset(triples: &[EditTriple], policy: &SplitPolicy) -> Result<EditSplit> {
    if policy.n_train == 0 || policy.s_train == 0 {
        return Err(Error::Config("n_train and s_train must be positive".into()));
    }
    if !(policy.min_train_ratio > 0.0 && policy.min_train_ratio <= 1.0) {
        return Err(Error::Config("min_train_ratio must lie in (0, 1]".into()));
    }
    let threshold = policy.n_train as f64 / policy.min_train_ratio;
    // class -> image -> triple indices
    let mut by_class: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for (k, t) in triples.iter().enumerate() {
        if !seen.insert((t.image_id, t.style_variant)) {
            return Err(Error::contract(format!("duplicate triple key ({}, {})", t.image_id, t.style_variant)));
        }
        by_class.entry(t.y).or_default().entry(t.image_id).or_default().push(k);
    }
    let mut rng = seeds::child_rng(policy.seed, "shiftlab/split");
    let (mut train, mut val) = (Vec::new(), Vec::new());
    let (mut eligible, mut excluded) = (Vec::new(), Vec::new());
    for (class, images) in by_class {
        let count: usize = images.values().map(Vec::len).sum();
        let mut candidates: Vec<usize> = images
            .iter()
            .filter(|(_, v)| v.len() >= policy.s_train)
            .map(|(&id, _)| id)
            .collect();
        if (count as f64) < threshold || candidates.len() < policy.n_train {
            excluded.push(class);
            continue;
        }
        eligible.push(class);
        candidates.shuffle(&mut rng);
        let chosen: HashSet<usize> = candidates[..policy.n_train].iter().copied().collect();
        for (id, mut ks) in images {
            if chosen.contains(&id) {
                ks.shuffle(&mut rng);
                let (tr, va) = ks.split_at(policy.s_train);
                train.extend(tr.iter().map(|&k| triples[k].clone()));
                val.extend(va.iter().map(|&k| triples[k].clone()));
            } else {
                val.extend(ks.iter().map(|&k| triples[k].clone()));
            }
        }
    }
    if eligible.is_empty() {
        return Err(Error::contract("no class has enough editing triples"));
    }
    if val.is_empty() {
        return Err(Error::contract("split leaves no validation triples"));
    }
    Ok(EditSplit {
        train,
        val,
        eligible_classes: eligible,
        excluded_classes: excluded,
    })
}
