//! Synthetic splicing corpus, patch datasets and their on-disk container.

mod container;
mod patches;
mod synth;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipelines::PipelineParams;

pub use container::{
    read_domain, read_manifest, write_domain, DomainManifest, ManifestSplit, PatchRecord, SceneRecord,
};
pub use patches::{
    balance_classes, balance_indices, build_domain, classify_coverage, extract_patches,
    split_dataset, stratified_split, window_coverage, DomainLayout, PatchConfig, PatchSlot,
    SceneSource,
};
pub use synth::{synthesize_scene, SceneImage, SynthConfig, SyntheticScenes};

/// Patch class. The discriminant is the logit index the detector uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Authentic = 0,
    Forged = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Authentic, Label::Forged];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Authentic),
            1 => Some(Label::Forged),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Label::Authentic => Label::Forged,
            Label::Forged => Label::Authentic,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Authentic => "authentic",
            Label::Forged => "forged",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Index lists into a dataset's patch vector.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn get_mut(&mut self, split: Split) -> &mut Vec<usize> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// One square patch with its label and tampered-area fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    /// Row-major `size x size` samples.
    pub pixels: Vec<f32>,
    pub size: usize,
    pub label: Label,
    pub coverage: f64,
    pub source_scene: String,
    /// Top-left corner of the window in the source scene.
    pub x: usize,
    pub y: usize,
}

/// Labeled patches drawn from one pipeline's distribution.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub pipeline: PipelineParams,
    pub patches: Vec<LabeledPatch>,
    pub splits: Splits,
    pub class_counts: BTreeMap<Label, usize>,
}

impl DomainDataset {
    pub fn new(pipeline: PipelineParams, patches: Vec<LabeledPatch>, splits: Splits) -> Self {
        let mut class_counts = BTreeMap::new();
        for p in &patches {
            *class_counts.entry(p.label).or_insert(0) += 1;
        }
        Self {
            pipeline,
            patches,
            splits,
            class_counts,
        }
    }

    pub fn split(&self, split: Split) -> Vec<&LabeledPatch> {
        self.splits
            .get(split)
            .iter()
            .map(|&i| &self.patches[i])
            .collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.splits.get(split).len()
    }

    pub fn patch_size(&self) -> Option<usize> {
        self.patches.first().map(|p| p.size)
    }

    /// Checks label/coverage consistency and that splits partition the patches.
    pub fn validate(&self, bounds: (f64, f64)) -> Result<()> {
        let mut seen = vec![false; self.patches.len()];
        for split in Split::ALL {
            for &i in self.splits.get(split) {
                if i >= seen.len() || seen[i] {
                    return Err(Error::InvalidInput(format!(
                        "split index {i} is duplicated or out of range"
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidInput(
                "splits do not cover every patch".into(),
            ));
        }
        for p in &self.patches {
            if classify_coverage(p.coverage, bounds) != Some(p.label) {
                return Err(Error::InvalidInput(format!(
                    "patch at ({}, {}) of {} has coverage {} inconsistent with label {}",
                    p.x, p.y, p.source_scene, p.coverage, p.label
                )));
            }
        }
        Ok(())
    }
}
