use std::path::Path;

use rayon::prelude::*;

use super::config::{ExperimentConfig, Method};
use super::report;
use super::train::{train_base, BaseEpoch};
use crate::editors::{self, CurveTable, EditConfig, EditData, EditTrace};
use crate::error::{Error, Result};
use crate::metrics::{PenaltyInputs, PenaltyReport};
use crate::network::{accuracy, Architecture, Checkpoint, LabeledSet, Network};
use crate::seeds::derive_seed;
use crate::shiftlab::{self, corrupt_dataset, ShiftSpec, IMAGE_SHAPE};

/// Feature-statistics sample size for rewriting.
const REWRITE_SOURCE_SAMPLES: usize = 512;

/// Every dataset an experiment uses, generated from the config seeds.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub base_train: LabeledSet,
    pub base_val: LabeledSet,
    pub edit: EditData,
    /// Validation triples' unedited images `(x, y)`.
    pub edit_val_originals: LabeledSet,
    pub eligible_classes: Vec<usize>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared> {
    let d = &cfg.data;
    let s = cfg.seed;
    let train = shiftlab::generate_base(derive_seed(s, "data/base_train"), d.classes, d.train_per_class)?;
    let val = shiftlab::generate_base(derive_seed(s, "data/base_val"), d.classes, d.val_per_class)?;
    let pool = shiftlab::generate_base(derive_seed(s, "data/edit_pool"), d.classes, d.edit_pool_per_class)?;
    let task = shiftlab::generate_blended_edit_task(&pool, d.region, d.style, d.style_variants, d.style_strength)?;
    let mut policy = d.split.clone();
    policy.seed = derive_seed(s, "data/split");
    let split = shiftlab::split_edit_dataset(&task.triples, &policy)?;
    Ok(Prepared {
        base_train: train.data,
        base_val: val.data,
        edit: split.edit_data()?,
        edit_val_originals: split.val_originals()?,
        eligible_classes: split.eligible_classes,
    })
}

pub fn architecture(cfg: &ExperimentConfig) -> Architecture {
    Architecture::new(cfg.preset, IMAGE_SHAPE, cfg.data.classes)
}

pub fn base_model(cfg: &ExperimentConfig, data: &Prepared) -> Result<(Network, Vec<BaseEpoch>)> {
    let mut net = architecture(cfg).build(derive_seed(cfg.seed, "model/init"))?;
    let history = train_base(&mut net, &data.base_train, &data.base_val, &cfg.base, derive_seed(cfg.seed, "model/train"))?;
    Ok((net, history))
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Ok,
    Diverged { epoch: usize },
}

/// One `(method, layer, lr, restart)` editor call.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub method: Method,
    pub layer: usize,
    pub lr: f64,
    pub restart: usize,
    pub seed: u64,
    pub status: RunStatus,
    /// `None` for divergent runs.
    pub trace: Option<EditTrace>,
}

impl RunRecord {
    pub fn best_val_acc(&self) -> Option<f64> {
        self.trace.as_ref().map(|t| t.best_val_acc)
    }
}

/// Best configuration for one layer and everything measured on it.
#[derive(Clone, Debug)]
pub struct Winner {
    pub method: Method,
    pub layer: usize,
    pub lr: f64,
    pub restart: usize,
    pub seed: u64,
    pub trace: EditTrace,
    pub edited: Network,
    pub lowrank: Option<editors::LowRankUpdate>,
    pub curve: CurveTable,
    pub penalties: Vec<PenaltyReport>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub base_history: Vec<BaseEpoch>,
    pub original: Network,
    pub runs: Vec<RunRecord>,
    pub winners: Vec<Winner>,
}

pub fn edit_seed(cfg: &ExperimentConfig, layer: usize, restart: usize) -> u64 {
    derive_seed(cfg.seed, &format!("edit/{}/layer{layer}/restart{restart}", cfg.edit.method))
}

pub fn edit_config(cfg: &ExperimentConfig, layer: usize, lr: f64, restart: usize) -> EditConfig {
    let e = &cfg.edit;
    EditConfig {
        layer,
        learning_rate: lr,
        max_epochs: e.max_epochs,
        early_stop_ratio: e.early_stop_ratio,
        rank: e.rank,
        seed: edit_seed(cfg, layer, restart),
        batch_size: e.batch_size,
        momentum: e.momentum,
        weight_decay: e.weight_decay,
        center_features: e.center_features,
        init_scale: e.init_scale,
    }
}

type EditOutput = (Network, EditTrace, Option<editors::LowRankUpdate>);

/// Runs one editor call.
pub fn run_editor(method: Method, net: &Network, data: &Prepared, ecfg: &EditConfig) -> Result<EditOutput> {
    let sup = || data.edit.supervised();
    let plain = |r: Result<(Network, EditTrace)>| r.map(|(n, t)| (n, t, None));
    match method {
        Method::LocalFtCollision => plain(editors::edit_local_ft_collision(net, &data.edit, ecfg)),
        Method::GlobalFtCollision => plain(editors::edit_global_ft_collision(net, &data.edit, ecfg)),
        Method::LocalFtSupervised | Method::OneLayerInterpolation => {
            plain(editors::edit_local_ft_supervised(net, &sup(), ecfg))
        }
        Method::GlobalFtForward => plain(editors::edit_global_ft_forward(net, &sup(), ecfg)),
        Method::FullFt => plain(editors::edit_full_ft(net, &sup(), ecfg)),
        Method::DirectLowRank => {
            editors::edit_direct_lowrank(net, &data.edit, ecfg).map(|(n, t, u)| (n, t, Some(u)))
        }
        Method::Rewrite => {
            let k = data.base_train.len().min(REWRITE_SOURCE_SAMPLES);
            let idx: Vec<usize> = (0..k).collect();
            let source = data.base_train.inputs.gather(&idx)?;
            editors::edit_rewrite(net, &data.edit, &source, ecfg).map(|(n, t, u)| (n, t, Some(u)))
        }
    }
}

/// Index of the winning run among `runs`: highest best-val accuracy,
/// ties to the lower learning rate, then the lower restart.
pub fn select_winner(runs: &[&RunRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in runs.iter().enumerate() {
        let Some(acc) = r.best_val_acc() else { continue };
        let better = match best {
            None => true,
            Some(b) => {
                let rb = runs[b];
                let bacc = rb.best_val_acc().expect("winner has a trace");
                acc > bacc || (acc == bacc && (r.lr, r.restart) < (rb.lr, rb.restart))
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// The grid of editor calls, each in isolation. Divergent runs are
/// recorded and excluded; any other error aborts.
pub fn edit_grid(cfg: &ExperimentConfig, net: &Network, data: &Prepared) -> Result<(Vec<RunRecord>, Vec<(usize, EditOutput)>)> {
    let method = cfg.edit.method;
    let mut jobs = Vec::new();
    for &layer in &cfg.edit.layers {
        for lr in cfg.edit.lr_grid() {
            for restart in 0..cfg.edit.restarts() {
                jobs.push((layer, lr, restart));
            }
        }
    }
    let outcomes: Vec<(RunRecord, Option<EditOutput>)> = jobs
        .par_iter()
        .map(|&(layer, lr, restart)| {
            let ecfg = edit_config(cfg, layer, lr, restart);
            let mut rec = RunRecord {
                method,
                layer,
                lr,
                restart,
                seed: ecfg.seed,
                status: RunStatus::Ok,
                trace: None,
            };
            match run_editor(method, net, data, &ecfg) {
                Ok(out) => {
                    log::info!(
                        "{method} layer {layer} lr {lr} restart {restart}: best val acc {:.4} at epoch {}",
                        out.1.best_val_acc,
                        out.1.best_epoch
                    );
                    rec.trace = Some(out.1.clone());
                    Ok((rec, Some(out)))
                }
                Err(Error::Diverged { epoch, loss }) => {
                    log::warn!("{method} layer {layer} lr {lr} restart {restart}: diverged at epoch {epoch} (loss {loss})");
                    rec.status = RunStatus::Diverged { epoch };
                    Ok((rec, None))
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let runs: Vec<RunRecord> = outcomes.iter().map(|(r, _)| r.clone()).collect();
    let mut winners = Vec::new();
    for &layer in &cfg.edit.layers {
        let idx: Vec<usize> = (0..runs.len()).filter(|&i| runs[i].layer == layer).collect();
        let refs: Vec<&RunRecord> = idx.iter().map(|&i| &runs[i]).collect();
        match select_winner(&refs) {
            Some(w) => {
                let out = outcomes[idx[w]].1.clone().expect("winner succeeded");
                winners.push((idx[w], out));
            }
            None => log::warn!("{method} layer {layer}: every run diverged"),
        }
    }
    Ok((runs, winners))
}

/// Shifted copies of the original and editing validation sets.
pub struct ShiftedSets {
    pub spec: ShiftSpec,
    pub orig: LabeledSet,
    pub edit: LabeledSet,
}

pub fn shifted_sets(cfg: &ExperimentConfig, data: &Prepared, specs: &[ShiftSpec]) -> Result<Vec<ShiftedSets>> {
    specs
        .iter()
        .map(|&spec| {
            Ok(ShiftedSets {
                spec,
                orig: corrupt_dataset(&data.base_val, spec, derive_seed(cfg.seed, &format!("shift/orig/{spec}")))?,
                edit: corrupt_dataset(&data.edit.val, spec, derive_seed(cfg.seed, &format!("shift/edit/{spec}")))?,
            })
        })
        .collect()
}

/// Eval-set names used in sweeps.
pub const EVAL_ORIG: &str = "orig_val";
pub const EVAL_EDIT: &str = "edit_val";
pub const EVAL_EDIT_ORIGINALS: &str = "edit_val_x";

pub fn shifted_name(base: &str, spec: ShiftSpec) -> String {
    format!("{base}@{spec}")
}

#[allow(clippy::too_many_arguments)]
fn evaluate_winner(
    cfg: &ExperimentConfig,
    original: &Network,
    data: &Prepared,
    sweep_sets: &[ShiftedSets],
    penalty_sets: &[ShiftedSets],
    record: &RunRecord,
    out: EditOutput,
) -> Result<Winner> {
    let (edited, trace, lowrank) = out;
    let mut evals: Vec<(String, &LabeledSet)> = vec![
        (EVAL_ORIG.to_string(), &data.base_val),
        (EVAL_EDIT.to_string(), &data.edit.val),
        (EVAL_EDIT_ORIGINALS.to_string(), &data.edit_val_originals),
    ];
    for s in sweep_sets {
        evals.push((shifted_name(EVAL_ORIG, s.spec), &s.orig));
        evals.push((shifted_name(EVAL_EDIT, s.spec), &s.edit));
    }
    let curve = editors::interpolation_sweep(
        original,
        &Checkpoint::capture(original),
        &Checkpoint::capture(&edited),
        &cfg.alphas,
        &evals,
    )?;
    let penalties = penalty_sets
        .iter()
        .map(|s| {
            let sets = PenaltyInputs {
                orig_clean: &data.base_val,
                orig_shifted: &s.orig,
                edit_clean: &data.edit.val,
                edit_shifted: &s.edit,
            };
            PenaltyReport::measure(record.method.name(), record.layer, record.seed, s.spec, original, &edited, &sets)
        })
        .collect::<Result<_>>()?;
    Ok(Winner {
        method: record.method,
        layer: record.layer,
        lr: record.lr,
        restart: record.restart,
        seed: record.seed,
        trace,
        edited,
        lowrank,
        curve,
        penalties,
    })
}

/// Sweeps and penalties for each layer's winning run.
pub fn evaluate_winners(
    cfg: &ExperimentConfig,
    original: &Network,
    data: &Prepared,
    runs: &[RunRecord],
    winners: Vec<(usize, EditOutput)>,
) -> Result<Vec<Winner>> {
    let sweep_sets = shifted_sets(cfg, data, &cfg.sweep_shifts)?;
    let penalty_sets = shifted_sets(cfg, data, &cfg.shifts)?;
    winners
        .into_par_iter()
        .map(|(i, out)| evaluate_winner(cfg, original, data, &sweep_sets, &penalty_sets, &runs[i], out))
        .collect()
}

/// Full pipeline: data, base model, edit grid, sweeps, penalties, and
/// every output file under `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let started = report::timestamp();
    let data = prepare_data(cfg)?;
    log::info!(
        "data: {} base train, {} base val, {} edit train, {} edit val ({} eligible classes)",
        data.base_train.len(),
        data.base_val.len(),
        data.edit.train.len(),
        data.edit.val.len(),
        data.eligible_classes.len()
    );
    let (original, base_history) = base_model(cfg, &data)?;
    let (runs, winners) = edit_grid(cfg, &original, &data)?;
    let winners = evaluate_winners(cfg, &original, &data, &runs, winners)?;
    let result = RunResult {
        config: cfg.clone(),
        base_history,
        original,
        runs,
        winners,
    };
    report::write_result(&result, &cfg.out_dir)?;
    report::emit_report(&result.curve_rows(), cfg.svg, &cfg.out_dir)?;
    report::write_provenance(cfg, &cfg.out_dir, &started)?;
    Ok(result)
}

impl RunResult {
    /// Flattened `(method, layer, row)` curve entries over all winners.
    pub fn curve_rows(&self) -> Vec<report::CurveRecord> {
        self.winners
            .iter()
            .flat_map(|w| {
                w.curve.rows.iter().map(move |r| report::CurveRecord {
                    method: w.method.name().to_string(),
                    layer: w.layer,
                    alpha: r.alpha,
                    eval: r.eval.clone(),
                    accuracy: r.accuracy,
                })
            })
            .collect()
    }
}

/// Accuracy of `net` on `x` and on `x′` of the editing validation set.
pub fn edit_difficulty(net: &Network, data: &Prepared) -> Result<(f64, f64)> {
    Ok((accuracy(net, &data.edit_val_originals)?, accuracy(net, &data.edit.val)?))
}

pub fn save_checkpoint(net: &Network, path: &Path, meta: &[(String, String)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Checkpoint::capture(net).write(path, meta)
}

pub fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<Network> {
    let ckpt = Checkpoint::read(path)?;
    let template = architecture(cfg).build(0)?;
    if ckpt.arch_id != template.arch_id() {
        return Err(Error::Config(format!(
            "checkpoint {} is for {}, config wants {}",
            path.display(),
            ckpt.arch_id,
            template.arch_id()
        )));
    }
    ckpt.instantiate(&template)
}

