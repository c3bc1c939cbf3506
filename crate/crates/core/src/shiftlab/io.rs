use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Checkpoint, EntryKind, LabeledSet};
use crate::tensorcore::Tensor;

const MANIFEST: &str = "manifest.txt";
const TENSORS: &str = "tensors.bin";

/// Writes named datasets to `dir`: `manifest.txt` (`key=value` lines) and
/// `tensors.bin` in the checkpoint format.
pub fn export_dataset(dir: &Path, sets: &[(&str, &LabeledSet)], manifest: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    let mut text = String::new();
    for (k, v) in manifest {
        text.push_str(&format!("{k}={v}\n"));
    }
    for (i, (name, set)) in sets.iter().enumerate() {
        text.push_str(&format!("set.{name}.count={}\n", set.len()));
        let labels = Tensor::new(vec![set.len()], set.labels.iter().map(|&y| y as f64).collect())?;
        entries.push((i, format!("{name}.inputs"), EntryKind::Buffer, set.inputs.clone()));
        entries.push((i, format!("{name}.labels"), EntryKind::Buffer, labels));
    }
    let manifest_path = dir.join(MANIFEST);
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    let tensors_path = dir.join(TENSORS);
    let bytes = Checkpoint::from_entries("dataset", entries).to_bytes();
    fs::write(&tensors_path, bytes).map_err(|e| Error::io(&tensors_path, e))
}

/// Reads a directory written by [`export_dataset`].
pub fn import_dataset(dir: &Path) -> Result<(BTreeMap<String, LabeledSet>, Vec<(String, String)>)> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Vec<(String, String)> = text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let ckpt = Checkpoint::read(&dir.join(TENSORS))?;
    let mut sets = BTreeMap::new();
    for e in &ckpt.layout {
        let Some(name) = e.name.strip_suffix(".inputs") else { continue };
        let inputs = ckpt.entry(&e.name).expect("entry listed in layout");
        let labels = ckpt
            .entry(&format!("{name}.labels"))
            .ok_or_else(|| Error::Format(format!("dataset {name} has no labels")))?;
        let labels = labels
            .data()
            .iter()
            .map(|&y| {
                if y >= 0.0 && y.fract() == 0.0 {
                    Ok(y as usize)
                } else {
                    Err(Error::Format(format!("non-integral label {y} in {name}")))
                }
            })
            .collect::<Result<_>>()?;
        sets.insert(name.to_string(), LabeledSet::new(inputs, labels)?);
    }
    Ok((sets, manifest))
}
