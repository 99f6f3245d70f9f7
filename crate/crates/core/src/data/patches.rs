//! Patch extraction, labeling, class balancing and splitting.
//!
//! Labels and split membership depend only on the (unfiltered) tamper masks
//! and the seeds, never on pixel values. A [`DomainLayout`] is therefore
//! computed once and then materialized under any number of pipelines, which
//! guarantees that the source and every target index the same windows with
//! the same labels.

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synth::SceneImage;
use super::{DomainDataset, Label, LabeledPatch, Split, Splits};
use crate::error::{Error, Result};
use crate::pipelines::{apply_pipeline, PipelineParams};
use crate::seed::{self, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub stride: usize,
    /// Inclusive tampered-coverage range for the forged label.
    pub coverage_bounds: (f64, f64),
    /// Train/val/test fractions.
    pub fractions: [f64; 3],
    pub split_seed: u64,
    /// Keep all patches of a scene in the same split.
    pub scene_level_split: bool,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_size: 128,
            stride: 128,
            coverage_bounds: (0.10, 0.40),
            fractions: [0.6, 0.2, 0.2],
            split_seed: 22,
            scene_level_split: true,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig(
                "patch_size and stride must be positive".into(),
            ));
        }
        let (lo, hi) = self.coverage_bounds;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "coverage bounds ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        check_fractions(&self.fractions)
    }
}

fn check_fractions(fractions: &[f64; 3]) -> Result<()> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    Ok(())
}

/// Tampered fraction of the `size x size` window at `(x, y)`.
pub fn window_coverage(mask: &[u8], width: usize, x: usize, y: usize, size: usize) -> f64 {
    let mut count = 0usize;
    for row in y..y + size {
        count += mask[row * width + x..row * width + x + size]
            .iter()
            .filter(|&&m| m != 0)
            .count();
    }
    count as f64 / (size * size) as f64
}

/// `Some(Forged)` inside the bounds, `Some(Authentic)` at zero coverage,
/// `None` for windows that must be discarded.
pub fn classify_coverage(coverage: f64, bounds: (f64, f64)) -> Option<Label> {
    if coverage == 0.0 {
        Some(Label::Authentic)
    } else if coverage >= bounds.0 && coverage <= bounds.1 {
        Some(Label::Forged)
    } else {
        None
    }
}

fn windows(
    width: usize,
    height: usize,
    size: usize,
    stride: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let ys = (0..)
        .map(move |i| i * stride)
        .take_while(move |y| y + size <= height);
    ys.flat_map(move |y| {
        (0..)
            .map(move |i| i * stride)
            .take_while(move |x| x + size <= width)
            .map(move |x| (x, y))
    })
}

fn cut_patch(scene_pixels: &crate::image::GrayImage, x: usize, y: usize, size: usize) -> Vec<f32> {
    scene_pixels
        .crop(x, y, size, size)
        .into_pixels()
        .into_iter()
        .map(|v| v as f32)
        .collect()
}

/// Every grid window that passes the coverage rule, labeled.
pub fn extract_patches(
    scene: &SceneImage,
    patch_size: usize,
    stride: usize,
    bounds: (f64, f64),
) -> Vec<LabeledPatch> {
    assert!(
        patch_size <= scene.width().min(scene.height()),
        "patch larger than scene"
    );
    windows(scene.width(), scene.height(), patch_size, stride)
        .filter_map(|(x, y)| {
            let coverage = window_coverage(&scene.tamper_mask, scene.width(), x, y, patch_size);
            classify_coverage(coverage, bounds).map(|label| LabeledPatch {
                pixels: cut_patch(&scene.pixels, x, y, patch_size),
                size: patch_size,
                label,
                coverage,
                source_scene: scene.scene_id.clone(),
                x,
                y,
            })
        })
        .collect()
}

/// Indices of a class-balanced subset: the majority class is subsampled
/// (seeded) down to the minority count. Returned indices are ascending.
pub fn balance_indices(labels: &[Label], seed: u64) -> Result<Vec<usize>> {
    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    for label in Label::ALL {
        if !by_class.contains_key(&label) {
            return Err(Error::Imbalance { missing: label });
        }
    }
    let keep = by_class.values().map(Vec::len).min().unwrap_or(0);
    let mut rng = seed::rng(seed, stream::BALANCE);
    let mut chosen = Vec::with_capacity(2 * keep);
    for indices in by_class.values_mut() {
        if indices.len() > keep {
            indices.shuffle(&mut rng);
            indices.truncate(keep);
        }
        chosen.extend_from_slice(indices);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn balance_classes(patches: Vec<LabeledPatch>, seed: u64) -> Result<Vec<LabeledPatch>> {
    let labels: Vec<Label> = patches.iter().map(|p| p.label).collect();
    let keep = balance_indices(&labels, seed)?;
    let mut patches: Vec<Option<LabeledPatch>> = patches.into_iter().map(Some).collect();
    Ok(keep
        .into_iter()
        .map(|i| patches[i].take().expect("unique index"))
        .collect())
}

/// Stratified split: each class is shuffled, the classes are interleaved in
/// proportion to their sizes and the merged order is cut at the rounded
/// cumulative fractions. Overall sizes are within one element of the
/// fractions, and so is every class within every split.
pub fn stratified_split(labels: &[Label], fractions: [f64; 3], seed: u64) -> Result<Splits> {
    check_fractions(&fractions)?;
    let mut rng = seed::rng(seed, stream::SPLIT);
    let mut keyed: Vec<(f64, Label, usize)> = Vec::with_capacity(labels.len());
    for label in Label::ALL {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        for (rank, i) in members.into_iter().enumerate() {
            keyed.push(((rank as f64 + 0.5) / n, label, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let n = labels.len() as f64;
    let cut1 = (fractions[0] * n).round() as usize;
    let cut2 = ((fractions[0] + fractions[1]) * n).round().min(n) as usize;
    let mut splits = Splits::default();
    for (pos, &(_, _, i)) in keyed.iter().enumerate() {
        let split = if pos < cut1 {
            Split::Train
        } else if pos < cut2 {
            Split::Val
        } else {
            Split::Test
        };
        splits.get_mut(split).push(i);
    }
    for split in Split::ALL {
        splits.get_mut(split).sort_unstable();
    }
    Ok(splits)
}

/// Re-splits a dataset at patch level with [`stratified_split`].
pub fn split_dataset(
    mut dataset: DomainDataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<DomainDataset> {
    let labels: Vec<Label> = dataset.patches.iter().map(|p| p.label).collect();
    dataset.splits = stratified_split(&labels, fractions, seed)?;
    Ok(dataset)
}

/// Random access to full scenes.
pub trait SceneSource: Sync {
    fn len(&self) -> usize;

    fn scene(&self, index: usize) -> Result<Cow<'_, SceneImage>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SceneSource for [SceneImage] {
    fn len(&self) -> usize {
        <[SceneImage]>::len(self)
    }

    fn scene(&self, index: usize) -> Result<Cow<'_, SceneImage>> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

impl SceneSource for Vec<SceneImage> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn scene(&self, index: usize) -> Result<Cow<'_, SceneImage>> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

/// One retained window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSlot {
    pub scene: usize,
    pub x: usize,
    pub y: usize,
    pub label: Label,
    pub coverage: f64,
}

/// Patch geometry, labels and split membership shared by every domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainLayout {
    pub patch_size: usize,
    pub scene_ids: Vec<String>,
    pub slots: Vec<PatchSlot>,
    /// Indices into `slots`.
    pub splits: Splits,
}

impl DomainLayout {
    /// Scans the masks of every scene in `source`.
    pub fn compute<S: SceneSource + ?Sized>(source: &S, cfg: &PatchConfig) -> Result<Self> {
        cfg.validate()?;
        let per_scene: Vec<(String, Vec<PatchSlot>)> = (0..source.len())
            .into_par_iter()
            .map(|s| {
                let scene = source.scene(s)?;
                if cfg.patch_size > scene.width().min(scene.height()) {
                    return Err(Error::InvalidConfig(format!(
                        "patch size {} exceeds scene {}x{}",
                        cfg.patch_size,
                        scene.width(),
                        scene.height()
                    )));
                }
                let slots = windows(scene.width(), scene.height(), cfg.patch_size, cfg.stride)
                    .filter_map(|(x, y)| {
                        let coverage = window_coverage(
                            &scene.tamper_mask,
                            scene.width(),
                            x,
                            y,
                            cfg.patch_size,
                        );
                        classify_coverage(coverage, cfg.coverage_bounds).map(|label| PatchSlot {
                            scene: s,
                            x,
                            y,
                            label,
                            coverage,
                        })
                    })
                    .collect();
                Ok((scene.scene_id.clone(), slots))
            })
            .collect::<Result<_>>()?;

        let scene_ids = per_scene.iter().map(|(id, _)| id.clone()).collect();
        let candidates: Vec<PatchSlot> = per_scene.into_iter().flat_map(|(_, s)| s).collect();
        if candidates.is_empty() {
            return Err(Error::EmptyDomain("layout".into()));
        }

        let (slots, splits) = if cfg.scene_level_split {
            scene_level_assignment(candidates, source.len(), cfg)?
        } else {
            let labels: Vec<Label> = candidates.iter().map(|c| c.label).collect();
            let keep = balance_indices(&labels, cfg.split_seed)?;
            let slots: Vec<PatchSlot> = keep.into_iter().map(|i| candidates[i].clone()).collect();
            let labels: Vec<Label> = slots.iter().map(|c| c.label).collect();
            let splits = stratified_split(&labels, cfg.fractions, cfg.split_seed)?;
            (slots, splits)
        };
        Ok(Self {
            patch_size: cfg.patch_size,
            scene_ids,
            slots,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Builds the patches of the requested splits under `pipeline`.
    ///
    /// The pipeline runs on each full scene before any window is cut.
    pub fn materialize<S: SceneSource + ?Sized>(
        &self,
        source: &S,
        pipeline: &PipelineParams,
        which: &[Split],
    ) -> Result<DomainDataset> {
        pipeline.validate()?;
        let mut wanted: Vec<(Split, usize)> = Vec::new();
        for &split in &Split::ALL {
            if which.contains(&split) {
                wanted.extend(self.splits.get(split).iter().map(|&i| (split, i)));
            }
        }
        if wanted.is_empty() {
            return Err(Error::EmptyDomain(pipeline.pipeline_id.clone()));
        }
        let mut by_scene: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(_, slot) in &wanted {
            by_scene
                .entry(self.slots[slot].scene)
                .or_default()
                .push(slot);
        }
        let by_scene: Vec<(usize, Vec<usize>)> = by_scene.into_iter().collect();

        let cut: Vec<Vec<(usize, LabeledPatch)>> = by_scene
            .par_iter()
            .map(|(s, slot_ids)| {
                let scene = source.scene(*s)?;
                let processed = apply_pipeline(&scene.pixels, pipeline)?;
                Ok(slot_ids
                    .iter()
                    .map(|&id| {
                        let slot = &self.slots[id];
                        let patch = LabeledPatch {
                            pixels: cut_patch(&processed, slot.x, slot.y, self.patch_size),
                            size: self.patch_size,
                            label: slot.label,
                            coverage: slot.coverage,
                            source_scene: scene.scene_id.clone(),
                            x: slot.x,
                            y: slot.y,
                        };
                        (id, patch)
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;

        let mut by_slot: BTreeMap<usize, LabeledPatch> = cut.into_iter().flatten().collect();
        let mut patches = Vec::with_capacity(wanted.len());
        let mut splits = Splits::default();
        for (split, slot) in wanted {
            splits.get_mut(split).push(patches.len());
            patches.push(by_slot.remove(&slot).expect("every wanted slot was cut"));
        }
        Ok(DomainDataset::new(pipeline.clone(), patches, splits))
    }
}

/// Assigns whole scenes to splits by largest remaining deficit (forged
/// scenes by forged count first, then authentic-only scenes by authentic
/// count), then balances the classes inside each split.
fn scene_level_assignment(
    candidates: Vec<PatchSlot>,
    n_scenes: usize,
    cfg: &PatchConfig,
) -> Result<(Vec<PatchSlot>, Splits)> {
    let mut counts = vec![[0usize; 2]; n_scenes];
    for c in &candidates {
        counts[c.scene][c.label.index()] += 1;
    }
    let mut order: Vec<usize> = (0..n_scenes).collect();
    order.shuffle(&mut seed::rng(cfg.split_seed, stream::SPLIT));

    let total_forged: usize = counts.iter().map(|c| c[1]).sum();
    let total_auth: usize = counts.iter().map(|c| c[0]).sum();
    let mut assigned = vec![None; n_scenes];
    let mut have = [[0usize; 2]; 3];

    let pick = |have: &[[usize; 2]; 3], class: usize, total: usize| -> usize {
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for k in 0..3 {
            if cfg.fractions[k] == 0.0 {
                continue;
            }
            let deficit = cfg.fractions[k] * total as f64 - have[k][class] as f64;
            if deficit > best_deficit {
                best_deficit = deficit;
                best = k;
            }
        }
        best
    };

    for &s in order.iter().filter(|&&s| counts[s][1] > 0) {
        let k = pick(&have, 1, total_forged);
        assigned[s] = Some(k);
        have[k][0] += counts[s][0];
        have[k][1] += counts[s][1];
    }
    for &s in order
        .iter()
        .filter(|&&s| counts[s][1] == 0 && counts[s][0] > 0)
    {
        let k = pick(&have, 0, total_auth);
        assigned[s] = Some(k);
        have[k][0] += counts[s][0];
    }

    let mut per_split: [Vec<PatchSlot>; 3] = Default::default();
    for c in candidates {
        let k = assigned[c.scene].expect("scene with candidates is assigned");
        per_split[k].push(c);
    }

    let mut slots = Vec::new();
    let mut splits = Splits::default();
    for (k, split) in Split::ALL.into_iter().enumerate() {
        let members = std::mem::take(&mut per_split[k]);
        if members.is_empty() {
            continue;
        }
        let labels: Vec<Label> = members.iter().map(|m| m.label).collect();
        let keep = balance_indices(&labels, seed::derive(cfg.split_seed, k as u64))?;
        for i in keep {
            splits.get_mut(split).push(slots.len());
            slots.push(members[i].clone());
        }
    }
    Ok((slots, splits))
}

/// Extracts, labels, balances and splits patches of `scenes` processed by
/// `pipeline`.
pub fn build_domain(
    scenes: &[SceneImage],
    pipeline: &PipelineParams,
    cfg: &PatchConfig,
) -> Result<DomainDataset> {
    if scenes.is_empty() {
        return Err(Error::EmptyDomain(pipeline.pipeline_id.clone()));
    }
    let layout = DomainLayout::compute(scenes, cfg)?;
    layout.materialize(scenes, pipeline, &Split::ALL)
}
