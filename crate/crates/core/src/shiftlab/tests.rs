use proptest::prelude::*;

use super::*;
use crate::tensorcore::Tensor;

fn synthetic_triples(per_class: &[(usize, usize)], variants: usize) -> Vec<EditTriple> {
    // (class, image count)
    let mut out = Vec::new();
    let mut id = 0;
    for &(class, images) in per_class {
        for _ in 0..images {
            for v in 0..variants {
                out.push(EditTriple {
                    image_id: id,
                    style_variant: v,
                    y: class,
                    x: Tensor::scalar(id as f64),
                    x_prime: Tensor::scalar(v as f64),
                    mask: vec![true],
                });
            }
            id += 1;
        }
    }
    out
}

#[test]
fn base_generation_is_deterministic_and_balanced() {
    let a = generate_base(7, 10, 20).unwrap();
    let b = generate_base(7, 10, 20).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 200);
    for c in 0..10 {
        assert_eq!(a.data.labels.iter().filter(|&&y| y == c).count(), 20);
    }
    assert!(a.data.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_ne!(generate_base(8, 10, 20).unwrap().data, a.data);
    assert!(generate_base(7, 1, 5).is_err());
}

#[test]
fn edit_triples_differ_only_inside_mask() {
    let base = generate_base(3, 4, 3).unwrap();
    for region in [Region::Object, Region::Background, Region::Box { top: 4, left: 6, height: 10, width: 8 }] {
        for style in [Style::Snow, Style::Checker, Style::Grain] {
            let task = generate_edit_task(&base, region, style, 2).unwrap();
            assert_eq!(task.triples.len(), 24);
            for t in &task.triples {
                let hw = 32 * 32;
                let mut inside_diff = false;
                for (k, (a, b)) in t.x.data().iter().zip(t.x_prime.data()).enumerate() {
                    if t.mask[k % hw] {
                        inside_diff |= a != b;
                    } else {
                        assert_eq!(a.to_bits(), b.to_bits());
                    }
                }
                assert!(inside_diff);
                assert_eq!(t.y, base.data.labels[t.image_id]);
            }
        }
    }
    let again = generate_edit_task(&base, Region::Object, Style::Snow, 2).unwrap();
    assert_eq!(again.triples, generate_edit_task(&base, Region::Object, Style::Snow, 2).unwrap().triples);
}

#[test]
fn empty_region_is_a_contract_error() {
    let base = generate_base(3, 2, 2).unwrap();
    let r = generate_edit_task(&base, Region::Box { top: 0, left: 0, height: 0, width: 5 }, Style::Snow, 1);
    assert!(matches!(r, Err(crate::Error::Contract(_))));
}

#[test]
fn split_excludes_small_classes_and_sizes_train_exactly() {
    // class 0: 19 triples (excluded), classes 1..=4: 20+ triples
    let mut triples = synthetic_triples(&[(0, 19)], 1);
    let rest = synthetic_triples(&[(1, 20), (2, 25), (3, 12), (4, 30)], 2);
    let offset = 1000;
    triples.extend(rest.into_iter().map(|mut t| {
        t.image_id += offset;
        t
    }));
    let split = split_edit_dataset(&triples, &SplitPolicy::default()).unwrap();
    assert_eq!(split.excluded_classes, vec![0]);
    assert_eq!(split.eligible_classes, vec![1, 2, 3, 4]);
    assert_eq!(split.train.len(), 40);
    let key = |t: &EditTriple| (t.image_id, t.style_variant);
    let train: std::collections::HashSet<_> = split.train.iter().map(key).collect();
    assert!(split.val.iter().all(|t| !train.contains(&key(t))));
    assert_eq!(split.train.len() + split.val.len(), triples.len() - 19);
    for c in 1..=4 {
        assert_eq!(split.train.iter().filter(|t| t.y == c).count(), 10);
    }
    let again = split_edit_dataset(&triples, &SplitPolicy::default()).unwrap();
    assert_eq!(again.train, split.train);
    let only_small = synthetic_triples(&[(0, 19)], 1);
    assert!(split_edit_dataset(&only_small, &SplitPolicy::default()).is_err());
}

#[test]
fn split_rejects_duplicate_keys() {
    let mut t = synthetic_triples(&[(0, 20)], 1);
    t.push(t[0].clone());
    assert!(split_edit_dataset(&t, &SplitPolicy::default()).is_err());
}

fn batch() -> Vec<Tensor> {
    let base = generate_base(11, 5, 2).unwrap();
    (0..base.len())
        .map(|i| Tensor::new(IMAGE_SHAPE.to_vec(), base.image(i).to_vec()).unwrap())
        .collect()
}

#[test]
fn gaussian_noise_std_matches_table() {
    let img = Tensor::full(&[3, 32, 32], 0.5);
    for severity in 1..=5u8 {
        let spec = ShiftSpec::new(Family::GaussianNoise, severity).unwrap();
        let out = corrupt(&img, spec, 5).unwrap();
        let n = out.len() as f64;
        let mean = out.data().iter().sum::<f64>() / n;
        let std = (out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = severity_parameter(spec).unwrap();
        assert!((std - target).abs() < 0.1 * target, "severity {severity}: {std} vs {target}");
    }
}

#[test]
fn impulse_fraction_matches_table() {
    let img = Tensor::full(&[3, 32, 32], 0.5);
    for severity in 1..=5u8 {
        let spec = ShiftSpec::new(Family::ImpulseNoise, severity).unwrap();
        let out = corrupt(&img, spec, 9).unwrap();
        let frac = out.data().iter().filter(|&&v| v != 0.5).count() as f64 / out.len() as f64;
        let target = severity_parameter(spec).unwrap();
        assert!((frac - target).abs() < 0.1 * target + 0.005, "severity {severity}: {frac}");
    }
}

#[test]
fn contrast_fixes_constant_images() {
    for v in [0.5, 0.3, 0.77] {
        let img = Tensor::full(&[3, 32, 32], v);
        for severity in 1..=5 {
            let out = corrupt(&img, ShiftSpec::new(Family::Contrast, severity).unwrap(), 0).unwrap();
            assert_eq!(out, img);
        }
    }
}

#[test]
fn distortion_strictly_increases_with_severity() {
    let imgs = batch();
    for family in Family::ALL {
        let mut prev = 0.0;
        for severity in 1..=5 {
            let spec = ShiftSpec::new(family, severity).unwrap();
            let msd: f64 = imgs
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let y = corrupt(x, spec, i as u64).unwrap();
                    x.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                })
                .sum();
            assert!(msd > prev, "{spec}: {msd} <= {prev}");
            prev = msd;
        }
    }
}

#[test]
fn corruption_output_is_clipped_and_deterministic() {
    let imgs = batch();
    for spec in ShiftSpec::grid() {
        let a = corrupt(&imgs[0], spec, 3).unwrap();
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, corrupt(&imgs[0], spec, 3).unwrap());
    }
    assert_eq!(ShiftSpec::grid().len(), 30);
}

#[test]
fn shift_spec_strings() {
    let s: ShiftSpec = "gaussian_blur:3".parse().unwrap();
    assert_eq!(s, ShiftSpec::new(Family::GaussianBlur, 3).unwrap());
    assert_eq!(s.to_string(), "gaussian_blur:3");
    assert!("gaussian_blur:0".parse::<ShiftSpec>().is_err());
    assert!("gaussian_blur:6".parse::<ShiftSpec>().is_err());
    assert!("fog:2".parse::<ShiftSpec>().is_err());
    assert!(ShiftSpec::new(Family::Contrast, 6).is_err());
    assert!(severity_parameter(ShiftSpec { family: Family::Contrast, severity: 0 }).is_err());
    let json = serde_json::to_string(&s).unwrap();
    assert_eq!(json, "\"gaussian_blur:3\"");
    assert_eq!(serde_json::from_str::<ShiftSpec>(&json).unwrap(), s);
}

#[test]
fn corrupt_dataset_keeps_labels_and_count() {
    let base = generate_base(2, 3, 4).unwrap();
    let spec = ShiftSpec::new(Family::GaussianNoise, 2).unwrap();
    let a = corrupt_dataset(&base.data, spec, 1).unwrap();
    assert_eq!(a.labels, base.data.labels);
    assert_eq!(a.len(), base.len());
    assert_eq!(a, corrupt_dataset(&base.data, spec, 1).unwrap());
    assert_ne!(a, corrupt_dataset(&base.data, spec, 2).unwrap());
    // samples get distinct noise
    assert_ne!(
        a.inputs.sample(0).iter().zip(base.data.inputs.sample(0)).map(|(x, y)| x - y).collect::<Vec<_>>(),
        a.inputs.sample(3).iter().zip(base.data.inputs.sample(3)).map(|(x, y)| x - y).collect::<Vec<_>>()
    );
}

#[test]
fn dataset_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let base = generate_base(4, 2, 3).unwrap();
    let small = base.data.subset(&[0, 2]).unwrap();
    let manifest = vec![("seed".to_string(), "4".to_string())];
    export_dataset(dir.path(), &[("train", &base.data), ("small", &small)], &manifest).unwrap();
    let (sets, m) = import_dataset(dir.path()).unwrap();
    assert_eq!(sets["train"], base.data);
    assert_eq!(sets["small"], small);
    assert!(m.contains(&("seed".to_string(), "4".to_string())));
    assert!(m.contains(&("set.small.count".to_string(), "2".to_string())));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn corruptions_stay_in_unit_range(seed in 0u64..1000, idx in 0usize..30) {
        let img = Tensor::from_fn(&[3, 8, 8], |i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 999.0);
        let out = corrupt(&img, ShiftSpec::grid()[idx], seed).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(out.shape(), img.shape());
    }
}
