//! Experiment configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use forge_core::data::{PatchConfig, SynthConfig};
use forge_core::evaluation::CurveConfig;
use forge_core::hash::config_hash;
use forge_core::margins::{LayerSet, MetricConfig, SummaryBounds};
use forge_core::pipelines::{make_target_grid, GridLevels, PipelineGrid, PipelineParams};
use forge_core::seed;
use forge_core::{DetectorConfig, SweepGrid, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Number of synthetic scenes.
    pub scenes: usize,
    pub synth: SynthConfig,
    pub patches: PatchConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 200,
            synth: SynthConfig::default(),
            patches: PatchConfig::default(),
        }
    }
}

/// Target domains: either an explicit list or a denoise x sharpen grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub n_denoise: usize,
    pub n_sharpen: usize,
    pub jpeg_quality: u8,
    pub levels: GridLevels,
    pub pipelines: Option<Vec<PipelineParams>>,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            n_denoise: 4,
            n_sharpen: 5,
            jpeg_quality: 70,
            levels: GridLevels::default(),
            pipelines: None,
        }
    }
}

impl TargetConfig {
    pub fn resolve(&self) -> forge_core::Result<Vec<PipelineParams>> {
        let pipelines = match &self.pipelines {
            Some(p) => p.clone(),
            None => make_target_grid(self.n_denoise, self.n_sharpen, self.jpeg_quality, &self.levels)?,
        };
        PipelineGrid {
            pipelines: pipelines.clone(),
        }
        .validate()?;
        Ok(pipelines)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginsConfig {
    /// Largest number of source training patches probed per variant.
    pub sample_budget: usize,
    pub batch_size: usize,
    pub bounds: SummaryBounds,
    pub metrics: Vec<MetricConfig>,
}

impl Default for MarginsConfig {
    fn default() -> Self {
        let metric = |alpha: f64, layers: LayerSet| MetricConfig { alpha, layers };
        Self {
            sample_budget: 2000,
            batch_size: 32,
            bounds: SummaryBounds::MinMax,
            metrics: vec![
                metric(1.0, LayerSet::all()),
                metric(2.0, LayerSet::all()),
                metric(2.0, LayerSet::named(["ConvRes"])),
                metric(2.0, LayerSet::named(["fc3-input"])),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub min_source_accuracy: f64,
    pub curve: CurveConfig,
    /// Metric used for ranking and the headline correlation.
    pub headline: MetricConfig,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            min_source_accuracy: 0.75,
            curve: CurveConfig::default(),
            headline: MetricConfig {
                alpha: 2.0,
                layers: LayerSet::all(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Global seed; `--seed` replaces it and every derived seed.
    pub seed: u64,
    pub output_root: Option<PathBuf>,
    pub data: DataConfig,
    pub targets: TargetConfig,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub sweep: SweepGrid,
    pub margins: MarginsConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 22,
            output_root: None,
            data: DataConfig::default(),
            targets: TargetConfig::default(),
            detector: DetectorConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepGrid::default(),
            margins: MarginsConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Replaces the global seed, the split seed, both model seeds and the
    /// sweep replicate seeds (`seed`, then seeds derived from it).
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.patches.split_seed = seed;
        self.detector.rng_seed = seed;
        self.train.rng_seed = seed;
        let n = self.sweep.replicate_seeds.len().max(1);
        self.sweep.replicate_seeds = (0..n as u64)
            .map(|i| if i == 0 { seed } else { seed::derive(seed, i) })
            .collect();
    }

    pub fn validate(&self) -> CliResult<()> {
        self.data.synth.validate()?;
        self.data.patches.validate()?;
        self.detector.validate()?;
        self.train.validate()?;
        self.sweep.validate()?;
        self.evaluation.curve.validate()?;
        self.evaluation.headline.validate()?;
        for m in &self.margins.metrics {
            m.validate()?;
        }
        self.targets.resolve()?;
        let sizes = [
            self.data.synth.patch_size,
            self.data.patches.patch_size,
            self.detector.patch_size,
        ];
        if sizes.iter().any(|&s| s != sizes[0]) {
            return Err(CliError::Config(format!(
                "patch sizes disagree (synth {}, patches {}, detector {})",
                sizes[0], sizes[1], sizes[2]
            )));
        }
        if self.data.scenes == 0 {
            return Err(CliError::Config("data.scenes must be positive".into()));
        }
        if self.margins.sample_budget < 2 || self.margins.batch_size == 0 {
            return Err(CliError::Config(
                "margins need sample_budget >= 2 and batch_size >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.evaluation.min_source_accuracy) {
            return Err(CliError::Config(
                "evaluation.min_source_accuracy must lie in [0, 1]".into(),
            ));
        }
        let headline = (self.evaluation.headline.alpha, self.evaluation.headline.layers.label());
        if !self
            .margins
            .metrics
            .iter()
            .any(|m| (m.alpha, m.layers.label()) == headline)
        {
            return Err(CliError::Config(
                "evaluation.headline must be one of margins.metrics".into(),
            ));
        }
        Ok(())
    }

    /// Hash of everything that determines the datasets.
    pub fn data_hash(&self) -> CliResult<String> {
        Ok(config_hash(&serde_json::json!({
            "seed": self.seed,
            "data": self.data,
            "targets": self.targets.resolve()?,
        }))?)
    }

    pub fn hash(&self) -> CliResult<String> {
        let mut c = self.clone();
        c.output_root = None;
        Ok(config_hash(&c)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_ignores_key_order() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let a: ExperimentConfig = serde_json::from_str(r#"{"seed": 5, "data": {"scenes": 12}}"#).unwrap();
        let b: ExperimentConfig = serde_json::from_str(r#"{"data": {"scenes": 12}, "seed": 5}"#).unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn seed_override_reaches_every_seed() {
        let mut c = ExperimentConfig::default();
        c.sweep.replicate_seeds = vec![1, 2];
        c.apply_seed(9);
        assert_eq!(c.data.patches.split_seed, 9);
        assert_eq!(c.train.rng_seed, 9);
        assert_eq!(c.sweep.replicate_seeds[0], 9);
        assert_eq!(c.sweep.replicate_seeds.len(), 2);
    }

    #[test]
    fn unknown_keys_and_mismatched_sizes_are_config_errors() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 1}"#).is_err());
        let mut c = ExperimentConfig::default();
        c.detector.patch_size = 64;
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
    }
}
