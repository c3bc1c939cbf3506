use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::network::{accuracy, Architecture, Checkpoint, EntryKind, Layer, Network, Preset};
use crate::seeds;
use crate::tensorcore::Tensor;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

fn cnn(seed: u64) -> Network {
    let mut net = Architecture::new(Preset::CnnSmall, [3, 8, 8], 4).build(seed).unwrap();
    let mut rng = seeds::rng(seed ^ 0xabc);
    net.calibrate_norms(&randn(&mut rng, &[16, 3, 8, 8]).reshape(&[16, 3, 8, 8]).unwrap())
        .unwrap();
    net
}

fn mlp(seed: u64) -> Network {
    Architecture::new(Preset::MlpSmall, [1, 4, 4], 3).build(seed).unwrap()
}

fn edit_data(net: &Network, seed: u64, n: usize, n_val: usize) -> EditData {
    let mut rng = seeds::rng(seed);
    let mut shape = vec![n];
    shape.extend_from_slice(net.input_shape());
    let x = randn(&mut rng, &shape);
    let xp = randn(&mut rng, &shape);
    let classes = net.forward(&x).unwrap().shape()[1];
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    shape[0] = n_val;
    let val_x = randn(&mut rng, &shape);
    let val_labels: Vec<usize> = (0..n_val).map(|i| i % classes).collect();
    EditData {
        train: PairSet::new(x, xp, labels).unwrap(),
        val: LabeledSet::new(val_x, val_labels).unwrap(),
    }
}

fn cfg(layer: usize, lr: f64, epochs: usize) -> EditConfig {
    EditConfig {
        layer,
        learning_rate: lr,
        max_epochs: epochs,
        seed: 11,
        ..EditConfig::default()
    }
}

fn changed_layers(a: &Network, b: &Network) -> Vec<usize> {
    Checkpoint::capture(a).differing_layers(&Checkpoint::capture(b)).unwrap()
}

fn buffers_identical(a: &Network, b: &Network) -> bool {
    let (ca, cb) = (Checkpoint::capture(a), Checkpoint::capture(b));
    ca.layout.iter().filter(|e| e.kind == EntryKind::Buffer).all(|e| {
        let r = e.offset..e.offset + e.len();
        ca.flat[r.clone()].iter().zip(&cb.flat[r]).all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

fn subset(v: &[usize], allowed: &[usize]) -> bool {
    v.iter().all(|l| allowed.contains(l))
}

#[test]
fn fine_tuning_variants_respect_locality() {
    let net = cnn(1);
    let data = edit_data(&net, 2, 6, 8);
    let sup = data.supervised();
    let params = net.parameterized_indices();
    for &l in &net.editable_indices() {
        let c = cfg(l, 0.05, 3);
        let (e, _) = edit_local_ft_collision(&net, &data, &c).unwrap();
        assert!(subset(&changed_layers(&net, &e), &[l]));
        let (e, _) = edit_global_ft_collision(&net, &data, &c).unwrap();
        let below: Vec<usize> = params.iter().copied().filter(|&p| p <= l).collect();
        assert!(subset(&changed_layers(&net, &e), &below));
        let (e, _) = edit_local_ft_supervised(&net, &sup, &c).unwrap();
        assert!(subset(&changed_layers(&net, &e), &[l]));
        let (e, _) = edit_global_ft_forward(&net, &sup, &c).unwrap();
        let above: Vec<usize> = params.iter().copied().filter(|&p| p >= l).collect();
        assert!(subset(&changed_layers(&net, &e), &above));
        assert!(buffers_identical(&net, &e));
    }
    let (e, _) = edit_full_ft(&net, &sup, &cfg(0, 0.05, 3)).unwrap();
    assert!(buffers_identical(&net, &e));
    assert!(changed_layers(&net, &e).len() > 1);
}

#[test]
fn global_collision_at_first_layer_equals_local() {
    let net = cnn(3);
    let data = edit_data(&net, 4, 5, 6);
    let c = cfg(0, 0.05, 4);
    let (a, ta) = edit_local_ft_collision(&net, &data, &c).unwrap();
    let (b, tb) = edit_global_ft_collision(&net, &data, &c).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
}

#[test]
fn full_ft_equals_global_forward_from_first_layer() {
    for net in [cnn(5), mlp(5)] {
        let data = edit_data(&net, 6, 6, 6).supervised();
        let first = net.parameterized_indices()[0];
        let (a, ta) = edit_full_ft(&net, &data, &cfg(first, 0.01, 3)).unwrap();
        let (b, tb) = edit_global_ft_forward(&net, &data, &cfg(first, 0.01, 3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }
}

#[test]
fn identical_pairs_give_zero_collision_loss() {
    let net = mlp(7);
    let mut data = edit_data(&net, 8, 4, 4);
    data.train.x_prime = data.train.x.clone();
    let l = net.editable_indices()[1];
    let (e, trace) = edit_local_ft_collision(&net, &data, &cfg(l, 0.1, 5)).unwrap();
    assert!(trace.epochs.iter().all(|r| r.train_loss == 0.0));
    // zero gradient: only weight decay acts, and biases are not decayed
    let b0 = net.param(l, "bias").unwrap();
    let b1 = e.param(l, "bias").unwrap();
    assert_eq!(b0, b1);
}

#[test]
fn last_layer_supervised_edit_fits_training_set() {
    let net = mlp(9);
    let data = edit_data(&net, 10, 6, 6);
    let sup = SupervisedData {
        train: data.train.primed(),
        val: data.train.primed(),
    };
    let last = *net.editable_indices().last().unwrap();
    let (e, trace) = edit_local_ft_supervised(&net, &sup, &cfg(last, 0.1, 400)).unwrap();
    assert_eq!(accuracy(&e, &sup.train).unwrap(), 1.0);
    assert_eq!(trace.best_val_acc, 1.0);
    let (g, _) = edit_global_ft_forward(&net, &sup, &cfg(last, 0.1, 400)).unwrap();
    assert_eq!(e, g);
}

#[test]
fn zero_learning_rate_and_no_decay_leave_weights_unchanged() {
    let net = cnn(12);
    let data = edit_data(&net, 13, 4, 4);
    let mut c = cfg(3, 0.0, 3);
    c.weight_decay = 0.0;
    let (e, _) = edit_local_ft_collision(&net, &data, &c).unwrap();
    assert_eq!(e, net);
    let (e, _) = edit_full_ft(&net, &data.supervised(), &c).unwrap();
    assert_eq!(e, net);
}

#[test]
fn editors_are_deterministic() {
    let net = cnn(14);
    let data = edit_data(&net, 15, 70, 6);
    let mut c = cfg(3, 0.05, 3);
    c.batch_size = Some(16);
    let a = edit_global_ft_collision(&net, &data, &c).unwrap();
    let b = edit_global_ft_collision(&net, &data, &c).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    let a = edit_direct_lowrank(&net, &data, &c).unwrap();
    let b = edit_direct_lowrank(&net, &data, &c).unwrap();
    assert_eq!(a.2, b.2);
    c.seed = 16;
    let d = edit_direct_lowrank(&net, &data, &c).unwrap();
    assert_ne!(a.2, d.2);
}

#[test]
fn returned_network_is_best_epoch_snapshot() {
    let net = mlp(17);
    let data = edit_data(&net, 18, 8, 12);
    let l = net.editable_indices()[1];
    let (e, trace) = edit_local_ft_collision(&net, &data, &cfg(l, 0.5, 30)).unwrap();
    assert_eq!(trace.best_val_acc, trace.epochs[trace.best_epoch].val_acc);
    assert!(trace.epochs.iter().all(|r| r.val_acc <= trace.best_val_acc));
    assert_eq!(accuracy(&e, &data.val).unwrap(), trace.best_val_acc);
}

#[test]
fn early_stop_ends_trace_at_first_drop() {
    let accs: Vec<f64> = vec![0.5, 0.9, 0.6, 0.44];
    assert_eq!(first_stop_index(&accs, 0.5), Some(3));
    let net = mlp(19);
    let data = edit_data(&net, 20, 6, 9);
    let l = net.editable_indices()[0];
    let (_, trace) = edit_local_ft_collision(&net, &data, &cfg(l, 0.3, 50)).unwrap();
    let seq: Vec<f64> = trace.epochs.iter().map(|r| r.val_acc).collect();
    match trace.stop_reason {
        StopReason::EarlyStop => assert_eq!(first_stop_index(&seq, 0.5), Some(seq.len() - 1)),
        StopReason::MaxEpochs => {
            assert_eq!(first_stop_index(&seq, 0.5), None);
            assert_eq!(seq.len(), 51);
        }
    }
}

#[test]
fn exploding_learning_rate_is_reported_as_divergence() {
    let net = mlp(21);
    let data = edit_data(&net, 22, 6, 6);
    let mut c = cfg(net.editable_indices()[0], 1e6, 50);
    c.early_stop_ratio = 0.0;
    match edit_local_ft_collision(&net, &data, &c) {
        Err(Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn rejects_bad_layers_and_ranks() {
    let net = cnn(23);
    let data = edit_data(&net, 24, 4, 4);
    assert!(edit_local_ft_collision(&net, &data, &cfg(1, 0.1, 1)).is_err());
    assert!(edit_local_ft_collision(&net, &data, &cfg(99, 0.1, 1)).is_err());
    let mut c = cfg(0, 0.1, 1);
    c.rank = 4; // conv 3→8 allows at most 3
    assert!(matches!(edit_direct_lowrank(&net, &data, &c), Err(Error::Contract(_))));
    c.rank = 0;
    assert!(edit_direct_lowrank(&net, &data, &c).is_err());
}

/// Rank-r minimum of `‖(W + UVᵀ)D‖²` when `D` has full column rank:
/// Eckart–Young on `A = WD`, i.e. the energy outside the top r singular values.
fn rank_r_minimum(w: &Tensor, d: &Tensor, r: usize) -> f64 {
    let a = nalgebra::DMatrix::from_row_slice(w.shape()[0], w.shape()[1], w.data())
        * nalgebra::DMatrix::from_row_slice(d.shape()[0], d.shape()[1], d.data());
    let mut s: Vec<f64> = a.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.iter().skip(r).map(|v| v * v).sum()
}

#[test]
fn direct_lowrank_reaches_closed_form_minimum_on_linear_layer() {
    let (din, dout, n) = (6, 4, 3);
    let mut rng = seeds::rng(25);
    let net = Network::new(
        "linear",
        vec![din],
        vec![Layer::dense(randn(&mut rng, &[dout, din]), randn(&mut rng, &[dout])).unwrap()],
    );
    let x = randn(&mut rng, &[n, din]);
    let xp = randn(&mut rng, &[n, din]);
    let d = Tensor::from_fn(&[din, n], |i| {
        let (r, c) = (i / n, i % n);
        x.data()[c * din + r] - xp.data()[c * din + r]
    });
    let target = rank_r_minimum(net.param(0, "weight").unwrap(), &d, 1) / (n * dout) as f64;
    let data = EditData {
        train: PairSet::new(x, xp, vec![0; n]).unwrap(),
        val: LabeledSet::new(randn(&mut rng, &[2, din]), vec![0, 1]).unwrap(),
    };
    let mut c = cfg(0, 0.05, 5000);
    c.early_stop_ratio = 0.0;
    let (_, trace, upd) = edit_direct_lowrank(&net, &data, &c).unwrap();
    let last = trace.last().train_loss;
    assert!((last - target).abs() < 1e-6, "loss {last} vs minimum {target}");
    assert!(upd.numerical_rank() <= 1);
}

#[test]
fn lowrank_branch_matches_materialized_weights() {
    let net = cnn(26);
    let mut rng = seeds::rng(27);
    let x = randn(&mut rng, &[3, 3, 8, 8]);
    for &l in &net.editable_indices() {
        let (n_out, n_in) = {
            let s = net.param(l, "weight").unwrap().shape();
            (s[0], s[1])
        };
        let upd = LowRankUpdate {
            layer: l,
            u: randn(&mut rng, &[n_out, 2]),
            v: randn(&mut rng, &[n_in, 2]),
        };
        let h = net.forward_prefix(l, &x).unwrap();
        let end = net.block_end(l);
        let mut tape = crate::tensorcore::Tape::new();
        let u = tape.constant(upd.u.clone());
        let v = tape.constant(upd.v.clone());
        let hv = tape.constant(h.clone());
        let bind = crate::network::TapeBindings::new()
            .with_lowrank(crate::network::LowRankBinding { layer: l, u, v });
        let out = net.forward_taped(&mut tape, hv, l, end, &bind).unwrap();
        let direct = upd.applied(&net).unwrap().forward_range(l, end, &h).unwrap();
        let diff = tape.value(out).max_abs_diff(&direct);
        assert!(diff <= 1e-10, "layer {l}: {diff}");
    }
}

#[test]
fn cached_and_full_graph_lowrank_gradients_agree() {
    let net = cnn(28);
    let data = edit_data(&net, 29, 4, 2);
    let mut rng = seeds::rng(30);
    for &l in &net.editable_indices() {
        let s = net.param(l, "weight").unwrap().shape().to_vec();
        let upd = LowRankUpdate {
            layer: l,
            u: randn(&mut rng, &[s[0], 1]),
            v: randn(&mut rng, &[s[1], 1]),
        };
        let (la, ua, va) = lowrank_collision_grads(&net, &upd, &data.train.x, &data.train.x_prime, false).unwrap();
        let (lb, ub, vb) = lowrank_collision_grads(&net, &upd, &data.train.x, &data.train.x_prime, true).unwrap();
        assert!((la - lb).abs() <= 1e-10);
        assert!(ua.max_abs_diff(&ub) <= 1e-10 && va.max_abs_diff(&vb) <= 1e-10);
    }
}

#[test]
fn lowrank_methods_touch_only_the_edited_weight() {
    let net = cnn(31);
    let data = edit_data(&net, 32, 6, 6);
    let mut rng = seeds::rng(33);
    let source = randn(&mut rng, &[10, 3, 8, 8]);
    for &l in &net.editable_indices() {
        for rank in [1, 2] {
            let mut c = cfg(l, 1.0, 3);
            c.rank = rank;
            let results = [
                edit_direct_lowrank(&net, &data, &c).unwrap(),
                edit_rewrite(&net, &data, &source, &c).unwrap(),
            ];
            for (e, _, upd) in results {
                assert!(upd.numerical_rank() <= rank);
                assert!(subset(&changed_layers(&net, &e), &[l]));
                assert_eq!(e.param(l, "bias").unwrap(), net.param(l, "bias").unwrap());
                assert_eq!(upd.applied(&net).unwrap(), e);
            }
        }
    }
}

#[test]
fn rewrite_direction_with_identity_moment_is_normalized_key() {
    let sigma = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let k = vec![3.0, 0.0, 4.0];
    let v = rewrite_key_directions(&sigma, &[k]).unwrap();
    assert!(v.max_abs_diff(&Tensor::new(vec![3, 1], vec![0.6, 0.0, 0.8]).unwrap()) < 1e-14);
    assert!(rewrite_key_directions(&sigma, &[vec![0.0; 3]]).is_err());
}

#[test]
fn rewrite_directions_solve_moment_system_and_are_orthonormal() {
    let mut rng = seeds::rng(34);
    let keys = randn(&mut rng, &[40, 5]);
    let sigma = second_moment(&keys, false);
    let dirs = vec![vec![1.0, 2.0, 0.0, -1.0, 0.5], vec![0.0, 1.0, 1.0, 0.0, 0.0]];
    let v = rewrite_key_directions(&sigma, &dirs).unwrap();
    let vm = nalgebra::DMatrix::from_row_slice(5, 2, v.data());
    let gram = vm.transpose() * &vm;
    assert!((gram - nalgebra::DMatrix::<f64>::identity(2, 2)).abs().max() < 1e-12);
    // first column is parallel to Σ⁻¹d₁
    let s = nalgebra::DMatrix::from_row_slice(5, 5, sigma.data());
    let sv = &s * vm.column(0);
    let d1 = nalgebra::DVector::from_vec(dirs[0].clone());
    let cos = sv.dot(&d1) / (sv.norm() * d1.norm());
    assert!((cos - 1.0).abs() < 1e-12);
}

#[test]
fn key_vectors_put_channels_last() {
    let f = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64);
    let k = key_vectors(&f).unwrap();
    assert_eq!(k.shape(), &[8, 3]);
    assert_eq!(&k.data()[..3], &[0.0, 4.0, 8.0]);
    assert_eq!(&k.data()[21..24], &[15.0, 19.0, 23.0]);
    let m = second_moment(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 2.0]).unwrap(), true);
    assert_eq!(m.data(), &[0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn lowrank_checkpoint_round_trip() {
    let mut rng = seeds::rng(35);
    let upd = LowRankUpdate {
        layer: 3,
        u: randn(&mut rng, &[16, 2]),
        v: randn(&mut rng, &[8, 2]),
    };
    let c = upd.to_checkpoint("cnn-small:3x8x8:4");
    assert_eq!(LowRankUpdate::from_checkpoint(&c).unwrap(), upd);
    assert_eq!(numerical_rank(&upd.delta(), 1e-10), 2);
}

#[test]
fn sweep_endpoints_match_direct_evaluation() {
    let net = cnn(36);
    let data = edit_data(&net, 37, 6, 10);
    let (edited, _) = edit_full_ft(&net, &data.supervised(), &cfg(0, 0.05, 5)).unwrap();
    let (a, b) = (Checkpoint::capture(&net), Checkpoint::capture(&edited));
    let evals = [("val".to_string(), &data.val), ("orig".to_string(), &data.train.originals())];
    let evals: Vec<(String, &LabeledSet)> = evals.iter().map(|(n, d)| (n.clone(), *d)).collect();
    let table = interpolation_sweep(&net, &a, &b, &default_alpha_grid(), &evals).unwrap();
    assert_eq!(table.rows.len(), 22);
    assert_eq!(table.series("val").len(), 11);
    for (alpha, reference) in [(0.0, &net), (1.0, &edited)] {
        let inst = crate::network::interpolate(&a, &b, alpha).unwrap().instantiate(&net).unwrap();
        let diff = inst.logits(&data.val.inputs).unwrap().max_abs_diff(&reference.logits(&data.val.inputs).unwrap());
        assert!(diff <= 1e-12);
        for (name, d) in &evals {
            assert_eq!(table.accuracy_at(name, alpha).unwrap(), accuracy(reference, d).unwrap());
        }
    }
    assert!(interpolation_sweep(&net, &a, &b, &[0.0, 0.5], &evals).is_err());
    assert!(interpolation_sweep(&net, &a, &b, &[1.0, 0.0], &evals).is_err());
    let other = Checkpoint::capture(&mlp(1));
    assert!(interpolation_sweep(&net, &a, &other, &[0.0, 1.0], &evals).is_err());
}

#[test]
fn one_layer_interpolation_is_local_and_consistent() {
    let net = cnn(38);
    let pairs = edit_data(&net, 39, 6, 10);
    let data = SupervisedData {
        train: pairs.train.primed(),
        val: pairs.train.primed(),
    };
    let l = 3;
    let evals = vec![("edit".to_string(), &data.val)];
    let out = one_layer_interpolation(&net, &data, &cfg(l, 0.05, 10), &default_alpha_grid(), &evals).unwrap();
    let expected: Vec<usize> = if out.trace.best_epoch > 0 { vec![l] } else { vec![] };
    assert_eq!(changed_layers(&net, &out.edited), expected);
    assert_eq!(out.curve.accuracy_at("edit", 1.0).unwrap(), out.trace.best_val_acc);
    let (a, b) = (Checkpoint::capture(&net), Checkpoint::capture(&out.edited));
    for alpha in default_alpha_grid() {
        let mid = crate::network::interpolate(&a, &b, alpha).unwrap();
        assert!(subset(&a.differing_layers(&mid).unwrap(), &[l]));
    }
}
