//! Multi-variant training over a hyperparameter grid, checkpointed and
//! resumable.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{load_checkpoint, save_checkpoint, train_detector, DetectorVariant, TrainConfig};
use crate::data::DomainDataset;
use crate::detector::{DetectorConfig, Normalization, Pooling};
use crate::error::{Error, Result};
use crate::hash::config_hash;

pub const SWEEP_INDEX: &str = "sweep.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub batch_sizes: Vec<usize>,
    pub poolings: Vec<Pooling>,
    pub normalizations: Vec<Normalization>,
    pub dropout_rates: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub replicate_seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![22]
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            batch_sizes: vec![32, 64, 128],
            poolings: vec![Pooling::Max, Pooling::Average],
            normalizations: vec![Normalization::None, Normalization::BatchNorm],
            dropout_rates: vec![0.0, 0.3],
            replicate_seeds: default_seeds(),
        }
    }
}

/// One grid point ready to train.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub variant_id: String,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
}

impl SweepGrid {
    pub fn len(&self) -> usize {
        self.batch_sizes.len()
            * self.poolings.len()
            * self.normalizations.len()
            * self.dropout_rates.len()
            * self.replicate_seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::param(
                "sweep",
                "every grid axis needs at least one value",
            ));
        }
        if self.batch_sizes.iter().any(|&b| b < 2) {
            return Err(Error::param("batch_sizes", "must be at least 2"));
        }
        if self.dropout_rates.iter().any(|d| !(0.0..1.0).contains(d)) {
            return Err(Error::param("dropout_rates", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Cartesian product in axis order (batch size outermost). A replicate
    /// seed sets both the initialization and the data-order seed.
    pub fn points(
        &self,
        base_detector: &DetectorConfig,
        base_train: &TrainConfig,
    ) -> Vec<SweepPoint> {
        let mut out = Vec::with_capacity(self.len());
        for &batch_size in &self.batch_sizes {
            for &pooling in &self.poolings {
                for &normalization in &self.normalizations {
                    for &dropout_rate in &self.dropout_rates {
                        for &seed in &self.replicate_seeds {
                            out.push(SweepPoint {
                                variant_id: format!(
                                    "b{batch_size}-{}-{}-d{dropout_rate:.2}-s{seed}",
                                    pooling.short(),
                                    normalization.short()
                                ),
                                detector: DetectorConfig {
                                    pooling,
                                    normalization,
                                    dropout_rate,
                                    rng_seed: seed,
                                    ..base_detector.clone()
                                },
                                train: TrainConfig {
                                    batch_size,
                                    rng_seed: seed,
                                    ..base_train.clone()
                                },
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepStatus {
    Ok,
    Failed,
}

/// One line of `sweep.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub variant_id: String,
    pub config_hash: String,
    pub status: SweepStatus,
    pub source_test_accuracy: Option<f64>,
    /// Relative to the sweep directory.
    pub checkpoint: String,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct SweepOutcome {
    /// Successful variants in grid order.
    pub variants: Vec<DetectorVariant>,
    /// Final record of every grid point, in grid order.
    pub records: Vec<SweepRecord>,
    pub trained: usize,
    pub reused: usize,
}

/// Config hash under which a grid point is checkpointed.
pub fn point_hash(point: &SweepPoint, data_hash: &str) -> Result<String> {
    config_hash(&serde_json::json!({
        "detector": point.detector,
        "train": point.train,
        "data": data_hash,
    }))
}

/// Latest record per variant id.
pub fn read_sweep_index(dir: &Path) -> Result<HashMap<String, SweepRecord>> {
    let path = dir.join(SWEEP_INDEX);
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    for (i, line) in fs::read_to_string(&path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SweepRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(&path, format!("line {}: {e}", i + 1)))?;
        out.insert(record.variant_id.clone(), record);
    }
    Ok(out)
}

fn append_record(dir: &Path, record: &SweepRecord) -> Result<()> {
    let path = dir.join(SWEEP_INDEX);
    let mut content = if path.exists() {
        fs::read(&path)?
    } else {
        Vec::new()
    };
    content.extend_from_slice(serde_json::to_string(record)?.as_bytes());
    content.push(b'\n');
    let tmp = dir.join(format!("{SWEEP_INDEX}.tmp"));
    fs::write(&tmp, &content)?;
    fs::rename(&tmp, &path)?;
    Ok(())
}

enum PointResult {
    Trained(Box<DetectorVariant>, SweepRecord),
    Reused(Box<DetectorVariant>, SweepRecord),
    Failed(SweepRecord, bool),
}

fn run_point(
    point: &SweepPoint,
    hash: &str,
    source: &DomainDataset,
    data_hash: &str,
    dir: &Path,
    prior: Option<&SweepRecord>,
    index_lock: &Mutex<()>,
) -> Result<PointResult> {
    let ckpt = dir.join(&point.variant_id);
    if let Some(rec) = prior.filter(|r| r.config_hash == hash) {
        match rec.status {
            SweepStatus::Ok => match load_checkpoint(&ckpt) {
                Ok((variant, meta)) if meta.config_hash == hash => {
                    return Ok(PointResult::Reused(Box::new(variant), rec.clone()));
                }
                Ok(_) => log::warn!(
                    "{}: checkpoint hash differs from index, retraining",
                    point.variant_id
                ),
                Err(e) => log::warn!(
                    "{}: checkpoint unreadable ({e}), retraining",
                    point.variant_id
                ),
            },
            SweepStatus::Failed => return Ok(PointResult::Failed(rec.clone(), false)),
        }
    }
    log::info!("training {}", point.variant_id);
    let (result, record) =
        match train_detector(&point.variant_id, &point.detector, &point.train, source) {
            Ok(variant) => {
                save_checkpoint(&ckpt, &variant, hash, data_hash)?;
                let record = SweepRecord {
                    variant_id: point.variant_id.clone(),
                    config_hash: hash.to_string(),
                    status: SweepStatus::Ok,
                    source_test_accuracy: Some(variant.source_test_accuracy),
                    checkpoint: point.variant_id.clone(),
                    error: None,
                };
                log::info!(
                    "{}: source test accuracy {:.4}",
                    point.variant_id,
                    variant.source_test_accuracy
                );
                (
                    PointResult::Trained(Box::new(variant), record.clone()),
                    record,
                )
            }
            Err(e @ (Error::TrainingFailure { .. } | Error::Computation(_))) => {
                log::warn!("{}: {e}", point.variant_id);
                let record = SweepRecord {
                    variant_id: point.variant_id.clone(),
                    config_hash: hash.to_string(),
                    status: SweepStatus::Failed,
                    source_test_accuracy: None,
                    checkpoint: point.variant_id.clone(),
                    error: Some(e.to_string()),
                };
                (PointResult::Failed(record.clone(), true), record)
            }
            Err(e) => return Err(e),
        };
    let _guard = index_lock.lock().unwrap_or_else(|p| p.into_inner());
    append_record(dir, &record)?;
    Ok(result)
}

/// Trains every grid point not already checkpointed under the same config
/// hash. Training failures are recorded and do not stop the sweep; other
/// errors (I/O, invalid configs) abort it.
pub fn run_sweep(
    grid: &SweepGrid,
    base_detector: &DetectorConfig,
    base_train: &TrainConfig,
    source: &DomainDataset,
    data_hash: &str,
    dir: &Path,
    jobs: usize,
) -> Result<SweepOutcome> {
    grid.validate()?;
    base_detector.validate()?;
    base_train.validate()?;
    fs::create_dir_all(dir)?;
    let points = grid.points(base_detector, base_train);
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = points.iter().find(|p| !seen.insert(p.variant_id.clone())) {
        return Err(Error::InvalidConfig(format!(
            "duplicate variant id {}",
            dup.variant_id
        )));
    }
    let prior = read_sweep_index(dir)?;
    let hashes = points
        .iter()
        .map(|p| point_hash(p, data_hash))
        .collect::<Result<Vec<_>>>()?;
    let lock = Mutex::new(());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start {jobs} workers: {e}")))?;
    let results: Vec<Result<PointResult>> = pool.install(|| {
        points
            .par_iter()
            .zip(&hashes)
            .map(|(p, h)| {
                run_point(
                    p,
                    h,
                    source,
                    data_hash,
                    dir,
                    prior.get(&p.variant_id),
                    &lock,
                )
            })
            .collect()
    });

    let mut outcome = SweepOutcome {
        variants: Vec::new(),
        records: Vec::new(),
        trained: 0,
        reused: 0,
    };
    for r in results {
        match r? {
            PointResult::Trained(v, rec) => {
                outcome.trained += 1;
                outcome.variants.push(*v);
                outcome.records.push(rec);
            }
            PointResult::Reused(v, rec) => {
                outcome.reused += 1;
                outcome.variants.push(*v);
                outcome.records.push(rec);
            }
            PointResult::Failed(rec, fresh) => {
                if fresh {
                    outcome.trained += 1;
                } else {
                    outcome.reused += 1;
                }
                outcome.records.push(rec);
            }
        }
    }
    Ok(outcome)
}

/// Keeps variants whose source test accuracy reaches `min_source_accuracy`,
/// preserving order.
pub fn filter_variants(
    variants: &[DetectorVariant],
    min_source_accuracy: f64,
) -> Vec<&DetectorVariant> {
    variants
        .iter()
        .filter(|v| v.source_test_accuracy >= min_source_accuracy)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_24_unique_points() {
        let grid = SweepGrid::default();
        let points = grid.points(&DetectorConfig::default(), &TrainConfig::default());
        assert_eq!(points.len(), 24);
        let ids: std::collections::HashSet<_> = points.iter().map(|p| &p.variant_id).collect();
        assert_eq!(ids.len(), 24);
        assert_eq!(points[0].variant_id, "b32-max-nonorm-d0.00-s22");
        assert_eq!(points[23].variant_id, "b128-avg-bn-d0.30-s22");
        assert_eq!(points[23].train.batch_size, 128);
        assert_eq!(points[23].detector.normalization, Normalization::BatchNorm);
    }

    #[test]
    fn small_grid_product() {
        let grid = SweepGrid {
            batch_sizes: vec![16, 32],
            poolings: vec![Pooling::Max, Pooling::Average],
            normalizations: vec![Normalization::None],
            dropout_rates: vec![0.0],
            replicate_seeds: vec![1],
        };
        assert_eq!(
            grid.points(&DetectorConfig::default(), &TrainConfig::default())
                .len(),
            4
        );
        let empty = SweepGrid {
            poolings: vec![],
            ..grid
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn point_hash_depends_on_data() {
        let p =
            &SweepGrid::default().points(&DetectorConfig::default(), &TrainConfig::default())[0];
        assert_ne!(point_hash(p, "a").unwrap(), point_hash(p, "b").unwrap());
        assert_eq!(point_hash(p, "a").unwrap(), point_hash(p, "a").unwrap());
    }
}
