use std::fs;

use super::*;
use crate::network::Preset;
use crate::shiftlab::{Family, ShiftSpec};

fn tiny(out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 5,
        preset: Preset::MlpSmall,
        out_dir: out.to_path_buf(),
        svg: true,
        ..ExperimentConfig::default()
    };
    cfg.data.classes = 3;
    cfg.data.train_per_class = 10;
    cfg.data.val_per_class = 5;
    cfg.data.edit_pool_per_class = 10;
    cfg.base.epochs = 1;
    cfg.edit.method = Method::LocalFtSupervised;
    cfg.edit.layers = vec![3, 5];
    cfg.edit.lr_grid = vec![1e-3, 1e-2, 1e-1];
    cfg.edit.max_epochs = 3;
    cfg.alphas = vec![0.0, 0.5, 1.0];
    cfg.shifts = vec![ShiftSpec::new(Family::Contrast, 3).unwrap()];
    cfg.sweep_shifts = vec![ShiftSpec::new(Family::GaussianNoise, 2).unwrap()];
    cfg
}

#[test]
fn defaults_round_trip_through_json() {
    let d = ExperimentConfig::default();
    assert_eq!(ExperimentConfig::from_json(&d.to_json()).unwrap(), d);
    assert_eq!(ExperimentConfig::from_json("{}").unwrap(), d);
    assert_eq!(d.edit.max_epochs, 2000);
    assert_eq!(d.alphas.len(), 11);
    assert_eq!(d.hash(), ExperimentConfig::default().hash());
}

#[test]
fn method_defaults() {
    assert_eq!(Method::Rewrite.default_restarts(), 10);
    assert_eq!(Method::DirectLowRank.default_restarts(), 10);
    assert_eq!(Method::FullFt.default_restarts(), 1);
    assert_eq!(Method::GlobalFtCollision.default_lr_grid(), vec![1e-3, 1e-2, 1e-1]);
    assert_eq!(Method::LocalFtSupervised.default_lr_grid(), vec![1e-4, 1e-3, 1e-2]);
    assert_eq!(Method::DirectLowRank.default_lr_grid(), vec![1e-2, 1e-1, 1.0, 10.0, 100.0]);
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
    }
}

#[test]
fn invalid_configs_are_rejected_before_compute() {
    for bad in [
        r#"{"edit": {"method": "nope"}}"#,
        r#"{"edit": {"layers": []}}"#,
        r#"{"edit": {"layers": [1]}}"#,
        r#"{"edit": {"lr_grid": [0.1, -1.0]}}"#,
        r#"{"edit": {"restarts": 0}}"#,
        r#"{"alphas": [0.0, 0.5]}"#,
        r#"{"alphas": [0.0, 1.0, 0.5]}"#,
        r#"{"shifts": ["contrast:9"]}"#,
        r#"{"data": {"classes": 1}}"#,
        r#"{"preset": "resnet"}"#,
        r#"{"unknown_key": 1}"#,
    ] {
        assert!(matches!(ExperimentConfig::from_json(bad), Err(crate::Error::Config(_))), "{bad}");
    }
}

#[test]
fn grid_counts_runs_and_winner_rule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let result = run_experiment(&cfg).unwrap();
    assert_eq!(result.runs.len(), 6);
    assert_eq!(result.winners.len(), 2);
    for w in &result.winners {
        let same_layer: Vec<&RunRecord> = result.runs.iter().filter(|r| r.layer == w.layer).collect();
        let best = same_layer.iter().filter_map(|r| r.best_val_acc()).fold(f64::MIN, f64::max);
        assert_eq!(w.trace.best_val_acc, best);
        let first = same_layer.iter().find(|r| r.best_val_acc() == Some(best)).unwrap();
        assert_eq!((w.lr, w.restart), (first.lr, first.restart));
        assert_eq!(w.curve.rows.len(), 3 * 5);
        assert_eq!(w.penalties.len(), 1);
    }
    let runs_csv = fs::read_to_string(dir.path().join("runs.csv")).unwrap();
    assert_eq!(runs_csv.lines().count(), 7);
    for f in ["config.json", "curves.csv", "penalties.csv", "base_history.csv", "provenance.txt", "checkpoints/orig.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn winner_selection_breaks_ties_by_lr_then_restart() {
    let rec = |lr: f64, restart: usize, acc: Option<f64>| RunRecord {
        method: Method::FullFt,
        layer: 0,
        lr,
        restart,
        seed: 0,
        status: if acc.is_some() { RunStatus::Ok } else { RunStatus::Diverged { epoch: 1 } },
        trace: acc.map(|a| crate::editors::EditTrace {
            epochs: vec![crate::editors::EpochRecord { epoch: 0, train_loss: 0.0, val_acc: a }],
            best_epoch: 0,
            best_val_acc: a,
            stop_reason: crate::editors::StopReason::MaxEpochs,
        }),
    };
    let runs = [rec(0.1, 1, Some(0.5)), rec(0.1, 0, Some(0.5)), rec(0.01, 2, Some(0.5)), rec(1.0, 0, None), rec(0.01, 3, Some(0.4))];
    let refs: Vec<&RunRecord> = runs.iter().collect();
    assert_eq!(select_winner(&refs), Some(2));
    let all_div = [rec(1.0, 0, None)];
    assert_eq!(select_winner(&all_div.iter().collect::<Vec<_>>()), None);
}

#[test]
fn divergent_runs_are_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.edit.layers = vec![5];
    cfg.edit.lr_grid = vec![1e-2];
    cfg.edit.early_stop_ratio = 0.0;
    let data = prepare_data(&cfg).unwrap();
    let (net, _) = base_model(&cfg, &data).unwrap();
    let (clean, _) = edit_grid(&cfg, &net, &data).unwrap();
    cfg.edit.lr_grid = vec![1e-2, 1e7];
    cfg.edit.max_epochs = 3;
    let (mixed, winners) = edit_grid(&cfg, &net, &data).unwrap();
    assert_eq!(mixed.len(), 2);
    assert!(matches!(mixed[1].status, RunStatus::Diverged { .. }));
    assert_eq!(mixed[0], clean[0]);
    assert_eq!(winners.len(), 1);
}

#[test]
fn report_regenerates_identically_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run_experiment(&cfg).unwrap();
    let plots = dir.path().join("plots");
    let read = |f: &str| fs::read(plots.join(f)).unwrap();
    let before: Vec<Vec<u8>> = ["accuracy_vs_alpha.tsv", "ood_accuracy_vs_alpha.tsv", "ood_vs_id.tsv"].iter().map(|f| read(f)).collect();
    fs::remove_dir_all(&plots).unwrap();
    report_from_dir(dir.path()).unwrap();
    let after: Vec<Vec<u8>> = ["accuracy_vs_alpha.tsv", "ood_accuracy_vs_alpha.tsv", "ood_vs_id.tsv"].iter().map(|f| read(f)).collect();
    assert_eq!(before, after);
    assert!(plots.join("ood_vs_id.svg").exists());
    // every series has one row per alpha
    let text = String::from_utf8(before[0].clone()).unwrap();
    let mut counts = std::collections::BTreeMap::new();
    for line in text.lines().skip(1) {
        *counts.entry(line.split('\t').next().unwrap().to_string()).or_insert(0) += 1;
    }
    assert!(!counts.is_empty());
    assert!(counts.values().all(|&c| c == 3));
}

#[test]
fn empty_shift_lists_omit_scatter_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.edit.layers = vec![5];
    cfg.edit.lr_grid = vec![1e-2];
    cfg.shifts.clear();
    cfg.sweep_shifts.clear();
    run_experiment(&cfg).unwrap();
    let plots = dir.path().join("plots");
    assert!(plots.join("accuracy_vs_alpha.tsv").exists());
    assert!(!plots.join("ood_vs_id.tsv").exists());
    assert!(!plots.join("ood_accuracy_vs_alpha.tsv").exists());
    let penalties = fs::read_to_string(dir.path().join("penalties.csv")).unwrap();
    assert_eq!(penalties.lines().count(), 1);
}

#[test]
fn checkpoints_reload_into_the_configured_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.edit.layers = vec![5];
    cfg.edit.lr_grid = vec![1e-2];
    let result = run_experiment(&cfg).unwrap();
    let orig = load_checkpoint(&cfg, &dir.path().join("checkpoints/orig.ckpt")).unwrap();
    assert_eq!(orig, result.original);
    let edited = load_checkpoint(&cfg, &dir.path().join("checkpoints/local_ft_supervised_l5.ckpt")).unwrap();
    assert_eq!(edited, result.winners[0].edited);
    let mut other = cfg.clone();
    other.data.classes = 4;
    assert!(load_checkpoint(&other, &dir.path().join("checkpoints/orig.ckpt")).is_err());
}
