use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::LabeledSet;
use crate::seeds;
use crate::tensorcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GaussianNoise,
    ImpulseNoise,
    GaussianBlur,
    Contrast,
    Brightness,
    Pixelate,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::GaussianNoise,
        Family::ImpulseNoise,
        Family::GaussianBlur,
        Family::Contrast,
        Family::Brightness,
        Family::Pixelate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Family::GaussianNoise => "gaussian_noise",
            Family::ImpulseNoise => "impulse_noise",
            Family::GaussianBlur => "gaussian_blur",
            Family::Contrast => "contrast",
            Family::Brightness => "brightness",
            Family::Pixelate => "pixelate",
        }
    }

    fn table(&self) -> [f64; 5] {
        match self {
            Family::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            Family::ImpulseNoise => [0.01, 0.03, 0.06, 0.10, 0.17],
            Family::GaussianBlur => [0.4, 0.6, 0.9, 1.3, 1.8],
            Family::Contrast => [0.75, 0.6, 0.45, 0.3, 0.2],
            Family::Brightness => [0.08, 0.16, 0.24, 0.32, 0.40],
            Family::Pixelate => [0.8, 0.65, 0.5, 0.4, 0.3],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption family {s:?}")))
    }
}

/// A corruption family at severity 1..=5, written `family:severity`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ShiftSpec {
    pub family: Family,
    pub severity: u8,
}

impl ShiftSpec {
    pub fn new(family: Family, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::contract(format!("severity {severity} outside 1..=5")));
        }
        Ok(Self { family, severity })
    }

    /// Every family at every severity.
    pub fn grid() -> Vec<ShiftSpec> {
        Family::ALL
            .into_iter()
            .flat_map(|family| (1..=5).map(move |severity| ShiftSpec { family, severity }))
            .collect()
    }
}

impl fmt::Display for ShiftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.family, self.severity)
    }
}

impl FromStr for ShiftSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (fam, sev) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("shift spec {s:?} is not family:severity")))?;
        let severity = sev
            .parse()
            .map_err(|_| Error::Config(format!("bad severity in {s:?}")))?;
        ShiftSpec::new(fam.parse()?, severity).map_err(|_| Error::Config(format!("severity out of range in {s:?}")))
    }
}

impl Serialize for ShiftSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ShiftSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The table value for `spec` (noise std, flip fraction, blur σ, contrast
/// scale, brightness shift or downscale factor).
pub fn severity_parameter(spec: ShiftSpec) -> Result<f64> {
    if !(1..=5).contains(&spec.severity) {
        return Err(Error::contract(format!("severity {} outside 1..=5", spec.severity)));
    }
    Ok(spec.family.table()[spec.severity as usize - 1])
}

fn chw(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::dim("corrupt", "ndim", format!("expected [C, H, W], got {s:?}"))),
    }
}

fn blur(data: &[f64], c: usize, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; data.len()];
    let mut out = vec![0.0; data.len()];
    for ch in 0..c {
        let plane = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[plane + y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * data[plane + y * w + clamp(x as isize + k as isize - radius, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[plane + y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[plane + clamp(y as isize + k as isize - radius, h) * w + x])
                    .sum();
            }
        }
    }
    out
}

/// Averages over the cells of a `⌊factor·H⌋ × ⌊factor·W⌋` grid and
/// paints each cell back at full resolution.
fn pixelate(data: &[f64], c: usize, h: usize, w: usize, factor: f64) -> Vec<f64> {
    let (sh, sw) = (((h as f64 * factor) as usize).max(1), ((w as f64 * factor) as usize).max(1));
    let cell_y: Vec<usize> = (0..h).map(|y| y * sh / h).collect();
    let cell_x: Vec<usize> = (0..w).map(|x| x * sw / w).collect();
    let mut out = vec![0.0; data.len()];
    for ch in 0..c {
        let plane = ch * h * w;
        let mut sum = vec![0.0; sh * sw];
        let mut count = vec![0usize; sh * sw];
        for y in 0..h {
            for x in 0..w {
                let cell = cell_y[y] * sw + cell_x[x];
                sum[cell] += data[plane + y * w + x];
                count[cell] += 1;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let cell = cell_y[y] * sw + cell_x[x];
                out[plane + y * w + x] = sum[cell] / count[cell] as f64;
            }
        }
    }
    out
}

/// Applies `spec` to one `[C, H, W]` image in `[0, 1]`; the stochastic
/// families draw from `seed`. Output is clipped to `[0, 1]`.
pub fn corrupt(img: &Tensor, spec: ShiftSpec, seed: u64) -> Result<Tensor> {
    let p = severity_parameter(spec)?;
    let (c, h, w) = chw(img)?;
    let data = img.data();
    let mut rng = seeds::child_rng(seed, &format!("shiftlab/corrupt/{}", spec.family));
    let out: Vec<f64> = match spec.family {
        Family::GaussianNoise => {
            let normal = Normal::new(0.0, p).expect("positive std");
            data.iter().map(|v| v + normal.sample(&mut rng)).collect()
        }
        Family::ImpulseNoise => data
            .iter()
            .map(|&v| {
                if rng.random_bool(p) {
                    if rng.random_bool(0.5) {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            })
            .collect(),
        Family::GaussianBlur => blur(data, c, h, w, p),
        Family::Contrast => {
            let mut out = data.to_vec();
            for plane in out.chunks_mut(h * w) {
                let first = plane[0];
                let mean = if plane.iter().all(|&v| v == first) {
                    first
                } else {
                    plane.iter().sum::<f64>() / plane.len() as f64
                };
                plane.iter_mut().for_each(|v| *v = mean + p * (*v - mean));
            }
            out
        }
        Family::Brightness => data.iter().map(|v| v + p).collect(),
        Family::Pixelate => pixelate(data, c, h, w, p),
    };
    Tensor::new(img.shape().to_vec(), out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Corrupts every sample with its own seed derived from `seed`; labels are kept.
pub fn corrupt_dataset(data: &LabeledSet, spec: ShiftSpec, seed: u64) -> Result<LabeledSet> {
    let shape = data.inputs.sample_shape().to_vec();
    let images: Vec<Vec<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let img = Tensor::new(shape.clone(), data.inputs.sample(i).to_vec())?;
            let s = seeds::derive_seed(seed, &format!("sample/{i}"));
            Ok(corrupt(&img, spec, s)?.into_data())
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
    LabeledSet::new(Tensor::stack(&shape, &refs)?, data.labels.clone())
}
