//! Checkpoint directories: `config.json`, `weights.bin`, `history.csv`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorVariant, EpochRecord, TrainConfig};
use crate::detector::{DetectorConfig, DetectorModel};
use crate::error::{Error, Result};

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_acc,lr";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant_id: String,
    pub config_hash: String,
    pub data_hash: String,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub best_epoch: usize,
    pub source_test_accuracy: f64,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.train_accuracy, r.val_accuracy, r.lr
        ));
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::format(path, "missing history header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::format(path, format!("malformed row {}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: num(f[1])?,
                train_accuracy: num(f[2])?,
                val_accuracy: num(f[3])?,
                lr: num(f[4])?,
            })
        })
        .collect()
}

pub fn save_checkpoint(
    dir: &Path,
    variant: &DetectorVariant,
    config_hash: &str,
    data_hash: &str,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    variant.model.save_weights(&dir.join("weights.bin"))?;
    write_history(&dir.join("history.csv"), &variant.history)?;
    let meta = CheckpointMeta {
        variant_id: variant.variant_id.clone(),
        config_hash: config_hash.to_string(),
        data_hash: data_hash.to_string(),
        detector: variant.detector_config.clone(),
        train: variant.train_config.clone(),
        best_epoch: variant.best_epoch,
        source_test_accuracy: variant.source_test_accuracy,
    };
    write_atomic(
        &dir.join("config.json"),
        serde_json::to_string_pretty(&meta)?.as_bytes(),
    )
}

/// Loads a checkpoint, re-checking the constrained-layer invariant.
pub fn load_checkpoint(dir: &Path) -> Result<(DetectorVariant, CheckpointMeta)> {
    let meta_path = dir.join("config.json");
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&meta_path)?)
        .map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let model = DetectorModel::load(&meta.detector, &dir.join("weights.bin"))?;
    let history = read_history(&dir.join("history.csv"))?;
    if history.is_empty() {
        return Err(Error::format(dir.join("history.csv"), "empty history"));
    }
    let variant = DetectorVariant {
        variant_id: meta.variant_id.clone(),
        detector_config: meta.detector.clone(),
        train_config: meta.train.clone(),
        model,
        history,
        best_epoch: meta.best_epoch,
        source_test_accuracy: meta.source_test_accuracy,
    };
    Ok((variant, meta))
}
