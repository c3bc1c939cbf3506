use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{save_checkpoint, RunResult, RunStatus, EVAL_ORIG};
use crate::error::{Error, Result};
use crate::metrics::write_penalties_csv;
use crate::seeds::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub method: String,
    pub layer: usize,
    pub alpha: f64,
    pub eval: String,
    pub accuracy: f64,
}

#[derive(Serialize)]
struct RunRow<'a> {
    method: &'a str,
    layer: usize,
    lr: f64,
    restart: usize,
    seed: u64,
    status: &'a str,
    best_epoch: Option<usize>,
    best_val_acc: Option<f64>,
    epochs_run: Option<usize>,
    stop_reason: Option<&'a str>,
    diverged_epoch: Option<usize>,
}

pub(crate) fn timestamp() -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    format!("unix:{secs}")
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(header).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curves_csv(path: &Path) -> Result<Vec<CurveRecord>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub(crate) fn write_runs_csv(path: &Path, result: &RunResult) -> Result<()> {
    let rows: Vec<RunRow> = result
        .runs
        .iter()
        .map(|r| RunRow {
            method: r.method.name(),
            layer: r.layer,
            lr: r.lr,
            restart: r.restart,
            seed: r.seed,
            status: match r.status {
                RunStatus::Ok => "ok",
                RunStatus::Diverged { .. } => "diverged",
            },
            best_epoch: r.trace.as_ref().map(|t| t.best_epoch),
            best_val_acc: r.trace.as_ref().map(|t| t.best_val_acc),
            epochs_run: r.trace.as_ref().map(|t| t.last().epoch),
            stop_reason: r.trace.as_ref().map(|t| t.stop_reason.as_str()),
            diverged_epoch: match r.status {
                RunStatus::Diverged { epoch } => Some(epoch),
                RunStatus::Ok => None,
            },
        })
        .collect();
    write_csv(path, &rows, &["method", "layer", "lr", "restart", "seed", "status", "best_epoch", "best_val_acc", "epochs_run", "stop_reason", "diverged_epoch"])
}

/// CSV tables, traces and checkpoints of a finished run.
pub fn write_result(result: &RunResult, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    write_text(&dir.join("config.json"), &(result.config.to_json() + "\n"))?;
    write_csv(&dir.join("base_history.csv"), &result.base_history, &["epoch", "train_loss", "val_acc"])?;
    write_runs_csv(&dir.join("runs.csv"), result)?;
    write_csv(&dir.join("curves.csv"), &result.curve_rows(), &["method", "layer", "alpha", "eval", "accuracy"])?;
    let penalties: Vec<_> = result.winners.iter().flat_map(|w| w.penalties.iter().cloned()).collect();
    write_penalties_csv(&dir.join("penalties.csv"), &penalties)?;
    let traces = dir.join("traces");
    mkdir(&traces)?;
    let ckpts = dir.join("checkpoints");
    let seed = result.config.seed.to_string();
    save_checkpoint(&result.original, &ckpts.join("orig.ckpt"), &[("role".into(), "original".into()), ("seed".into(), seed)])?;
    for w in &result.winners {
        let stem = format!("{}_l{}", w.method, w.layer);
        w.trace.write_csv(&traces.join(format!("{stem}.csv")))?;
        let meta = [
            ("role".to_string(), "edited".to_string()),
            ("method".to_string(), w.method.to_string()),
            ("layer".to_string(), w.layer.to_string()),
            ("lr".to_string(), w.lr.to_string()),
            ("restart".to_string(), w.restart.to_string()),
            ("seed".to_string(), w.seed.to_string()),
            ("best_epoch".to_string(), w.trace.best_epoch.to_string()),
        ];
        save_checkpoint(&w.edited, &ckpts.join(format!("{stem}.ckpt")), &meta)?;
        if let Some(u) = &w.lowrank {
            u.to_checkpoint(w.edited.arch_id()).write(&ckpts.join(format!("{stem}.lowrank.ckpt")), &meta)?;
        }
    }
    Ok(())
}

/// Config hash and seed tree. The only output carrying wall-clock time.
pub fn write_provenance(cfg: &ExperimentConfig, dir: &Path, started: &str) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "config_sha256={}", cfg.hash());
    let _ = writeln!(s, "package_version={}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "seed={}", cfg.seed);
    for path in ["data/base_train", "data/base_val", "data/edit_pool", "data/split", "model/init", "model/train"] {
        let _ = writeln!(s, "seed[{path}]={}", derive_seed(cfg.seed, path));
    }
    let _ = writeln!(s, "started={started}");
    let _ = writeln!(s, "finished={}", timestamp());
    write_text(&dir.join("provenance.txt"), &s)
}

type Series = BTreeMap<String, Vec<(f64, f64)>>;

fn series_key(r: &CurveRecord, eval: &str) -> String {
    format!("{}/l{}/{}", r.method, r.layer, eval)
}

fn tsv(series: &Series) -> String {
    let mut s = String::from("series\tx\ty\n");
    for (name, pts) in series {
        for (x, y) in pts {
            let _ = writeln!(s, "{name}\t{x}\t{y}");
        }
    }
    s
}

const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// A unit-square line or scatter plot with a legend.
fn svg(title: &str, xlabel: &str, ylabel: &str, series: &Series, scatter: bool) -> String {
    let (w, h, m) = (640.0, 480.0, 60.0);
    let px = |x: f64| m + x * (w - 2.0 * m);
    let py = |y: f64| h - m - y * (h - 2.0 * m);
    let legend_h = 16.0 * series.len() as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"12\">\n",
        h + legend_h
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>", w / 2.0);
    let _ = writeln!(s, "<rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>", w - 2.0 * m, h - 2.0 * m);
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{t:.1}</text>", px(t), h - m + 16.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{t:.1}</text>", m - 6.0, py(t) + 4.0);
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{xlabel}</text>", w / 2.0, h - m + 36.0);
    let _ = writeln!(s, "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{ylabel}</text>", h / 2.0, h / 2.0);
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        if scatter {
            for (x, y) in pts {
                let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{c}\"/>", px(*x), py(*y));
            }
        } else {
            let p: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
            let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\"/>", p.join(" "));
        }
        let ly = h + 16.0 * i as f64;
        let _ = writeln!(s, "<rect x=\"{m}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{c}\"/>", ly - 9.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{ly}\">{name}</text>", m + 16.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Plot-data (and optionally SVG) files under `dir/plots`, derived only
/// from curve records. The OOD files are omitted when no eval is shifted.
pub fn emit_report(curves: &[CurveRecord], svg_output: bool, dir: &Path) -> Result<()> {
    let plots = dir.join("plots");
    mkdir(&plots)?;
    let mut clean = Series::new();
    let mut ood = Series::new();
    let mut scatter = Series::new();
    let mut id_acc: BTreeMap<(String, usize, u64), f64> = BTreeMap::new();
    for r in curves.iter().filter(|r| r.eval == EVAL_ORIG) {
        id_acc.insert((r.method.clone(), r.layer, r.alpha.to_bits()), r.accuracy);
    }
    for r in curves {
        let target = if r.eval.contains('@') { &mut ood } else { &mut clean };
        target.entry(series_key(r, &r.eval)).or_default().push((r.alpha, r.accuracy));
        if r.eval.starts_with(&format!("{EVAL_ORIG}@")) {
            if let Some(&x) = id_acc.get(&(r.method.clone(), r.layer, r.alpha.to_bits())) {
                scatter.entry(series_key(r, &r.eval)).or_default().push((x, r.accuracy));
            }
        }
    }
    let files: [(&str, &Series, &str, &str, bool); 3] = [
        ("accuracy_vs_alpha", &clean, "alpha", "accuracy", false),
        ("ood_accuracy_vs_alpha", &ood, "alpha", "shifted accuracy", false),
        ("ood_vs_id", &scatter, "original-task accuracy", "shifted original-task accuracy", true),
    ];
    for (stem, series, xl, yl, is_scatter) in files {
        let tsv_path = plots.join(format!("{stem}.tsv"));
        let svg_path = plots.join(format!("{stem}.svg"));
        if series.is_empty() {
            for p in [&tsv_path, &svg_path] {
                if p.exists() {
                    fs::remove_file(p).map_err(|e| Error::io(p, e))?;
                }
            }
            continue;
        }
        write_text(&tsv_path, &tsv(series))?;
        if svg_output {
            write_text(&svg_path, &svg(stem, xl, yl, series, is_scatter))?;
        }
    }
    Ok(())
}

/// Regenerates plot files from `dir/curves.csv`.
pub fn report_from_dir(dir: &Path) -> Result<()> {
    let curves = read_curves_csv(&dir.join("curves.csv"))?;
    let svg_output = match fs::read_to_string(dir.join("config.json")) {
        Ok(text) => ExperimentConfig::from_json(&text).map(|c| c.svg).unwrap_or(true),
        Err(_) => true,
    };
    emit_report(&curves, svg_output, dir)
}
