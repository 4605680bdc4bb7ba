//! Metric records and the JSON-lines writer.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One pretraining step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub kind: String,
    pub epoch: usize,
    pub step: usize,
    pub l_total: f64,
    pub l_vp: f64,
    pub l_bfr: f64,
    pub r_mae: f64,
    pub theta_mae: f64,
    pub phi_mae: f64,
    pub voxel_mae: f64,
    pub boundary_mae: f64,
    /// Zero in deterministic mode so reruns are byte-identical.
    pub wall_s: f64,
}

/// One fine-tuning epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub kind: String,
    pub run_seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice_mean: f64,
    pub val_dice_per_class: Vec<Option<f64>>,
    pub best_so_far: f64,
    /// Zero in deterministic mode so reruns are byte-identical.
    pub wall_s: f64,
}

/// Append-only JSON-lines metrics file.
pub struct JsonlWriter {
    writer: BufWriter<File>,
    path: std::path::PathBuf,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            writer: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::format(&self.path, format!("serialize: {e}")))?;
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.write_all(b"\n"))
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for JsonlWriter {
    fn drop(&mut self) {
        let _ = self.writer.flush();
    }
}
