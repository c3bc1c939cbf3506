use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::LabeledSet;
use crate::seeds;
use crate::tensorcore::Tensor;

pub const IMAGE_SHAPE: [usize; 3] = [3, 32, 32];

const PALETTE: [[f64; 3]; 5] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.3],
    [0.2, 0.3, 0.9],
    [0.9, 0.8, 0.2],
    [0.8, 0.3, 0.8],
];

const STRIPE_PERIOD: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
}

impl Shape {
    fn of_class(c: usize) -> Self {
        [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Ring][c % 4]
    }

    fn contains(self, dy: f64, dx: f64, size: f64) -> bool {
        match self {
            Shape::Disk => dy * dy + dx * dx <= size * size,
            Shape::Square => dy.abs().max(dx.abs()) <= 0.85 * size,
            Shape::Triangle => {
                let t = (dy + size) / (2.0 * size);
                (0.0..=1.0).contains(&t) && dx.abs() <= size * t
            }
            Shape::Ring => {
                let r = (dy * dy + dx * dx).sqrt();
                r >= 0.55 * size && r <= size
            }
        }
    }
}

/// Geometry of the object drawn in one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMeta {
    pub class: usize,
    pub shape: Shape,
    pub center: (f64, f64),
    pub size: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseDataset {
    pub data: LabeledSet,
    pub meta: Vec<SampleMeta>,
    pub class_count: usize,
    pub seed: u64,
}

impl BaseDataset {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.data.inputs.sample(i)
    }
}

/// `true` where the object covers the pixel, row-major `H×W`.
pub fn object_mask(meta: &SampleMeta) -> Vec<bool> {
    let [_, h, w] = IMAGE_SHAPE;
    (0..h * w)
        .map(|p| {
            let dy = (p / w) as f64 + 0.5 - meta.center.0;
            let dx = (p % w) as f64 + 0.5 - meta.center.1;
            meta.shape.contains(dy, dx, meta.size)
        })
        .collect()
}

fn stripe_coord(orientation: usize, y: f64, x: f64) -> f64 {
    match orientation {
        0 => y,
        1 => x,
        _ => (x + y) / std::f64::consts::SQRT_2,
    }
}

fn render(class: usize, rng: &mut impl Rng) -> (Vec<f64>, SampleMeta) {
    let [c, h, w] = IMAGE_SHAPE;
    let meta = SampleMeta {
        class,
        shape: Shape::of_class(class),
        center: (16.0 + rng.random_range(-4.0..4.0), 16.0 + rng.random_range(-4.0..4.0)),
        size: rng.random_range(7.0..10.0),
    };
    let orientation = (class / 4) % 3;
    let phase = rng.random_range(0.0..STRIPE_PERIOD);
    let gain = rng.random_range(0.85..1.0);
    let mut color = PALETTE[class % 5];
    color.iter_mut().for_each(|v| *v = (*v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0));
    let bg = rng.random_range(0.25..0.45);
    let tint: Vec<f64> = (0..c).map(|_| rng.random_range(-0.03..0.03)).collect();
    let mask = object_mask(&meta);

    let mut img = vec![0.0; c * h * w];
    for p in 0..h * w {
        let (y, x) = ((p / w) as f64, (p % w) as f64);
        let stripe = if mask[p] {
            let u = stripe_coord(orientation, y, x) + phase;
            if ((u / (STRIPE_PERIOD / 2.0)).floor() as i64).rem_euclid(2) == 0 {
                1.0
            } else {
                0.45
            }
        } else {
            0.0
        };
        for ch in 0..c {
            let noise = rng.random_range(-0.03..0.03);
            let v = if mask[p] { color[ch] * stripe * gain } else { bg + tint[ch] };
            img[ch * h * w + p] = (v + noise).clamp(0.0, 1.0);
        }
    }
    (img, meta)
}

/// `class_count × samples_per_class` images, labels `i mod class_count`.
pub fn generate_base(seed: u64, class_count: usize, samples_per_class: usize) -> Result<BaseDataset> {
    if class_count < 2 {
        return Err(Error::contract("need at least two classes"));
    }
    if samples_per_class == 0 {
        return Err(Error::contract("samples_per_class must be positive"));
    }
    let n = class_count * samples_per_class;
    let rendered: Vec<(Vec<f64>, SampleMeta)> = (0..n)
        .into_par_iter()
        .map(|i| render(i % class_count, &mut seeds::child_rng(seed, &format!("shiftlab/base/{i}"))))
        .collect();
    let labels = (0..n).map(|i| i % class_count).collect();
    let (images, meta): (Vec<Vec<f64>>, Vec<SampleMeta>) = rendered.into_iter().unzip();
    let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
    let inputs = Tensor::stack(&IMAGE_SHAPE, &refs)?;
    Ok(BaseDataset {
        data: LabeledSet::new(inputs, labels)?,
        meta,
        class_count,
        seed,
    })
}
