use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use editlab::harness::ExperimentConfig;

fn editlab_jobs(jobs: usize, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_editlab"))
        .args(["--quiet", "--jobs", &jobs.to_string()])
        .args(args)
        .output()
        .expect("binary runs")
}

fn editlab(args: &[&str]) -> Output {
    editlab_jobs(1, args)
}

fn smoke_config(out_dir: &Path) -> PathBuf {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json");
    let mut cfg = ExperimentConfig::load(&src).unwrap();
    cfg.out_dir = out_dir.join("run");
    let path = out_dir.join("smoke.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn defaults_print_valid_config() {
    let out = editlab(&["config", "--defaults"]);
    assert!(out.status.success());
    let cfg = ExperimentConfig::from_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn bad_config_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"edit": {"layers": [2]}}"#).unwrap();
    let out = editlab(&["sweep", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("edit.layers"));
    std::fs::write(&path, r#"{"unknown_field": 1}"#).unwrap();
    assert!(!editlab(&["sweep", "--config", path.to_str().unwrap()]).status.success());
}

#[test]
fn gen_exports_named_sets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let out_dir = dir.path().join("data");
    let out = editlab(&["gen", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (sets, manifest) = editlab::shiftlab::import_dataset(&out_dir).unwrap();
    assert_eq!(sets["base_train"].len(), 60);
    assert_eq!(sets["edit_train_x"].len(), 30);
    assert_eq!(sets["edit_train_x"].labels, sets["edit_train_x_prime"].labels);
    assert!(manifest.iter().any(|(k, v)| k == "seed" && v == "7"));
}

#[test]
fn train_edit_sweep_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let run = dir.path().join("run");

    assert!(editlab(&["train-base", "--config", cfg]).status.success());
    assert!(run.join("checkpoints/orig.ckpt").exists());

    let out = editlab(&["edit", "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs = std::fs::read_to_string(run.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 2 * 2);

    let out = editlab(&["sweep", "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("local_ft_collision layer 3") && stdout.contains("local_ft_collision layer 5"));
    for f in ["config.json", "curves.csv", "penalties.csv", "provenance.txt", "plots/ood_vs_id.tsv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let penalties = std::fs::read_to_string(run.join("penalties.csv")).unwrap();
    assert_eq!(penalties.lines().count(), 1 + 2 * 2);

    let before = std::fs::read(run.join("plots/accuracy_vs_alpha.tsv")).unwrap();
    std::fs::remove_dir_all(run.join("plots")).unwrap();
    assert!(editlab(&["report", "--in", run.to_str().unwrap()]).status.success());
    assert_eq!(std::fs::read(run.join("plots/accuracy_vs_alpha.tsv")).unwrap(), before);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let mut outputs = Vec::new();
    for jobs in [1, 3] {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = smoke_config(dir.path());
        let out = editlab_jobs(jobs, &["sweep", "--config", cfg_path.to_str().unwrap()]);
        assert!(out.status.success());
        let run = dir.path().join("run");
        let files: Vec<Vec<u8>> = ["runs.csv", "curves.csv", "penalties.csv", "base_history.csv", "checkpoints/orig.ckpt"]
            .iter()
            .map(|f| std::fs::read(run.join(f)).unwrap())
            .collect();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
}
