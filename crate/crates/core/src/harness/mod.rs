//! Experiment orchestration: config, base training, the edit grid with
//! learning-rate search and restarts, interpolation sweeps, penalty
//! tables and report files.
//!
//! Every random choice draws from a seed derived from the config's
//! global seed and a fixed path string via [`crate::seeds::derive_seed`]:
//!
//! | path | used for |
//! |---|---|
//! | `data/base_train`, `data/base_val`, `data/edit_pool` | procedural datasets |
//! | `data/split` | editing train/val split |
//! | `model/init`, `model/train` | base network init and minibatch order |
//! | `edit/{method}/layer{l}/restart{r}` | one editor call |
//! | `shift/orig/{spec}`, `shift/edit/{spec}` | corrupted validation sets |

mod config;
mod report;
mod run;
mod train;

pub use config::{DataConfig, EditSection, ExperimentConfig, Method};
pub use report::{emit_report, read_curves_csv, report_from_dir, write_provenance, write_result, CurveRecord};
pub use run::{
    architecture, base_model, edit_config, edit_difficulty, edit_grid, edit_seed, evaluate_winners, load_checkpoint,
    prepare_data, run_editor, run_experiment, save_checkpoint, select_winner, shifted_name, shifted_sets, Prepared,
    RunRecord, RunResult, RunStatus, ShiftedSets, Winner, EVAL_EDIT, EVAL_EDIT_ORIGINALS, EVAL_ORIG,
};
pub use train::{train_base, BaseEpoch, BaseTrainConfig};

#[cfg(test)]
mod tests;
