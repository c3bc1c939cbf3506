use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use editlab::editors::CurveTable;
use editlab::harness::{self, ExperimentConfig, RunResult, Winner};
use editlab::shiftlab::export_dataset;
use editlab::Result;

#[derive(Parser)]
#[command(name = "editlab", version, about = "Model editing and distribution-shift experiments")]
struct Cli {
    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the datasets of an experiment and export them.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base model and save `checkpoints/orig.ckpt`.
    TrainBase {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the edit grid (layers × learning rates × restarts).
    Edit {
        #[arg(long)]
        config: PathBuf,
    },
    /// Full experiment: edit grid, interpolation sweeps, penalties, report.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Regenerate plot data from a finished run directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Print configuration.
    Config {
        /// Print the default configuration as JSON.
        #[arg(long)]
        defaults: bool,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn original(cfg: &ExperimentConfig, data: &harness::Prepared) -> Result<(editlab::network::Network, Vec<harness::BaseEpoch>)> {
    let path = cfg.out_dir.join("checkpoints/orig.ckpt");
    if path.exists() {
        log::info!("loading base model from {}", path.display());
        Ok((harness::load_checkpoint(cfg, &path)?, Vec::new()))
    } else {
        harness::base_model(cfg, data)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Config { defaults } => {
            if !defaults {
                eprintln!("nothing to do; pass --defaults");
            }
            println!("{}", ExperimentConfig::default().to_json());
        }
        Cmd::Gen { config, out } => {
            let cfg = load(&config, cli.seed)?;
            let data = harness::prepare_data(&cfg)?;
            let manifest = vec![
                ("seed".to_string(), cfg.seed.to_string()),
                ("classes".to_string(), cfg.data.classes.to_string()),
                ("eligible_classes".to_string(), format!("{:?}", data.eligible_classes)),
                ("n_train".to_string(), cfg.data.split.n_train.to_string()),
                ("min_train_ratio".to_string(), cfg.data.split.min_train_ratio.to_string()),
                ("s_train".to_string(), cfg.data.split.s_train.to_string()),
                ("config_sha256".to_string(), cfg.hash()),
            ];
            let x = data.edit.train.originals();
            let xp = data.edit.train.primed();
            export_dataset(
                &out,
                &[
                    ("base_train", &data.base_train),
                    ("base_val", &data.base_val),
                    ("edit_train_x", &x),
                    ("edit_train_x_prime", &xp),
                    ("edit_val_x", &data.edit_val_originals),
                    ("edit_val_x_prime", &data.edit.val),
                ],
                &manifest,
            )?;
            println!("wrote {}", out.display());
        }
        Cmd::TrainBase { config } => {
            let cfg = load(&config, cli.seed)?;
            let data = harness::prepare_data(&cfg)?;
            let (net, history) = harness::base_model(&cfg, &data)?;
            let path = cfg.out_dir.join("checkpoints/orig.ckpt");
            harness::save_checkpoint(&net, &path, &[("role".into(), "original".into()), ("seed".into(), cfg.seed.to_string())])?;
            let last = history.last().expect("at least one epoch");
            println!("base val accuracy {:.4} after {} epochs; saved {}", last.val_acc, last.epoch, path.display());
        }
        Cmd::Edit { config } => {
            let cfg = load(&config, cli.seed)?;
            let data = harness::prepare_data(&cfg)?;
            let (net, base_history) = original(&cfg, &data)?;
            let (runs, winners) = harness::edit_grid(&cfg, &net, &data)?;
            let winners: Vec<Winner> = winners
                .into_iter()
                .map(|(i, (edited, trace, lowrank))| {
                    let r = &runs[i];
                    Winner {
                        method: r.method,
                        layer: r.layer,
                        lr: r.lr,
                        restart: r.restart,
                        seed: r.seed,
                        trace,
                        edited,
                        lowrank,
                        curve: CurveTable::default(),
                        penalties: Vec::new(),
                    }
                })
                .collect();
            for w in &winners {
                println!("{} layer {}: lr {} restart {} best val acc {:.4}", w.method, w.layer, w.lr, w.restart, w.trace.best_val_acc);
            }
            let result = RunResult { config: cfg.clone(), base_history, original: net, runs, winners };
            harness::write_result(&result, &cfg.out_dir)?;
        }
        Cmd::Sweep { config } => {
            let cfg = load(&config, cli.seed)?;
            let result = harness::run_experiment(&cfg)?;
            for w in &result.winners {
                let at = |eval: &str, a: f64| w.curve.accuracy_at(eval, a).unwrap_or(f64::NAN);
                println!(
                    "{} layer {}: lr {} edit val {:.3} -> {:.3}, orig val {:.3} -> {:.3}",
                    w.method,
                    w.layer,
                    w.lr,
                    at(harness::EVAL_EDIT, 0.0),
                    at(harness::EVAL_EDIT, 1.0),
                    at(harness::EVAL_ORIG, 0.0),
                    at(harness::EVAL_ORIG, 1.0)
                );
            }
            println!("results in {}", cfg.out_dir.display());
        }
        Cmd::Report { input } => {
            harness::report_from_dir(&input)?;
            println!("plots in {}", input.join("plots").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
