//! Procedural datasets and distribution shifts.
//!
//! - [`generate_base`]: a 32×32 RGB classification task. Each class is a
//!   shape drawn with an oriented stripe texture in a fixed palette colour.
//! - [`generate_edit_task`]: `(x, x′, y)` triples where a region of `x` is
//!   repainted with a style texture.
//! - [`split_edit_dataset`]: train/val split of triples by class.
//! - [`corrupt`]: six corruption families at five severities.

mod base;
mod corrupt;
mod edit_task;
mod io;

pub use base::{generate_base, object_mask, BaseDataset, SampleMeta, Shape, IMAGE_SHAPE};
pub use corrupt::{corrupt, corrupt_dataset, severity_parameter, Family, ShiftSpec};
pub use edit_task::{generate_blended_edit_task, generate_edit_task, split_edit_dataset, EditSplit, EditTask, EditTriple, Region, SplitPolicy, Style};
pub use io::{export_dataset, import_dataset};

#[cfg(test)]
mod tests;
