use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::EarlyStop => "early_stop",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

/// Per-epoch optimization history. Epoch 0 is the unedited starting point.
#[derive(Clone, Debug, PartialEq)]
pub struct EditTrace {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub stop_reason: StopReason,
}

impl EditTrace {
    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("trace always holds epoch 0")
    }

    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "train_loss", "val_acc"]).expect("in-memory write");
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), e.train_loss.to_string(), e.val_acc.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Stops once validation accuracy falls below `ratio × best-so-far`.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    ratio: f64,
    best: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(ratio: f64) -> Self {
        Self { ratio, best: None }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, acc: f64) -> Observation {
        match self.best {
            None => {
                self.best = Some(acc);
                Observation {
                    improved: true,
                    stop: false,
                }
            }
            Some(b) => {
                let stop = acc < self.ratio * b;
                let improved = acc > b;
                if improved {
                    self.best = Some(acc);
                }
                Observation { improved, stop }
            }
        }
    }
}

/// Index of the first element at which [`EarlyStopping`] fires.
pub fn first_stop_index(accs: &[f64], ratio: f64) -> Option<usize> {
    let mut es = EarlyStopping::new(ratio);
    accs.iter().position(|&a| es.observe(a).stop)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn never_fires_on_first_observation() {
        assert_eq!(first_stop_index(&[0.0], 0.5), None);
        assert_eq!(first_stop_index(&[0.9, 0.5, 0.44], 0.5), Some(2));
        assert_eq!(first_stop_index(&[0.2, 0.8, 0.41, 0.39], 0.5), Some(3));
        assert_eq!(first_stop_index(&[0.0, 0.0, 0.0], 0.5), None);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let t = EditTrace {
            epochs: vec![
                EpochRecord {
                    epoch: 0,
                    train_loss: 1.5,
                    val_acc: 0.25,
                },
                EpochRecord {
                    epoch: 1,
                    train_loss: 0.5,
                    val_acc: 0.75,
                },
            ],
            best_epoch: 1,
            best_val_acc: 0.75,
            stop_reason: StopReason::MaxEpochs,
        };
        assert_eq!(t.to_csv(), "epoch,train_loss,val_acc\n0,1.5,0.25\n1,0.5,0.75\n");
    }
}
