//! Dataset directory: `manifest.json` plus one `<split>.bin` per stored split.
//!
//! `<split>.bin` layout (little endian):
//!
//! | offset | size            | content                          |
//! |--------|-----------------|----------------------------------|
//! | 0      | 8               | magic `FRGPATCH`                 |
//! | 8      | 4               | format version, `u32` = 1        |
//! | 12     | 4               | patch count `n`, `u32`           |
//! | 16     | 4               | patch height `h`, `u32`          |
//! | 20     | 4               | patch width `w`, `u32`           |
//! | 24     | 4 n h w         | samples, `f32`, patch-major, row-major |
//! | ...    | n               | labels, `u8` (0 authentic, 1 forged)   |

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DomainDataset, Label, LabeledPatch, Split, Splits};
use crate::error::{Error, Result};
use crate::pipelines::PipelineParams;

const MAGIC: &[u8; 8] = b"FRGPATCH";
const VERSION: u32 = 1;
const HEADER: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub scene: String,
    pub x: usize,
    pub y: usize,
    pub label: Label,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSplit {
    pub split: Split,
    pub file: String,
    pub count: usize,
    pub patches: Vec<PatchRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainManifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub pipeline: PipelineParams,
    pub patch_size: usize,
    pub scenes: Vec<SceneRecord>,
    pub splits: Vec<ManifestSplit>,
}

/// Writes the requested splits of `dataset` into `dir` (created if needed).
pub fn write_domain(
    dir: &Path,
    dataset: &DomainDataset,
    config_hash: &str,
    scenes: Vec<SceneRecord>,
) -> Result<DomainManifest> {
    fs::create_dir_all(dir)?;
    let patch_size = dataset
        .patch_size()
        .ok_or_else(|| Error::EmptyDomain(dataset.pipeline.pipeline_id.clone()))?;
    let mut splits = Vec::new();
    for split in Split::ALL {
        let indices = dataset.splits.get(split);
        if indices.is_empty() {
            continue;
        }
        let file = format!("{}.bin", split.name());
        let tmp = dir.join(format!("{file}.tmp"));
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            w.write_all(MAGIC)?;
            for v in [
                VERSION,
                indices.len() as u32,
                patch_size as u32,
                patch_size as u32,
            ] {
                w.write_all(&v.to_le_bytes())?;
            }
            for &i in indices {
                for v in &dataset.patches[i].pixels {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            let labels: Vec<u8> = indices
                .iter()
                .map(|&i| dataset.patches[i].label.index() as u8)
                .collect();
            w.write_all(&labels)?;
            w.flush()?;
        }
        fs::rename(&tmp, dir.join(&file))?;
        splits.push(ManifestSplit {
            split,
            file,
            count: indices.len(),
            patches: indices
                .iter()
                .map(|&i| {
                    let p = &dataset.patches[i];
                    PatchRecord {
                        scene: p.source_scene.clone(),
                        x: p.x,
                        y: p.y,
                        label: p.label,
                        coverage: p.coverage,
                    }
                })
                .collect(),
        });
    }
    let manifest = DomainManifest {
        format: "forge-domain".into(),
        version: VERSION,
        config_hash: config_hash.into(),
        pipeline: dataset.pipeline.clone(),
        patch_size,
        scenes,
        splits,
    };
    let tmp = dir.join("manifest.json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
    fs::rename(&tmp, dir.join("manifest.json"))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DomainManifest> {
    let path = dir.join("manifest.json");
    let manifest: DomainManifest = serde_json::from_slice(&fs::read(&path)?)?;
    if manifest.format != "forge-domain" || manifest.version != VERSION {
        return Err(Error::format(path, "not a forge-domain v1 manifest"));
    }
    Ok(manifest)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Loads every split listed in the manifest.
pub fn read_domain(dir: &Path) -> Result<(DomainDataset, DomainManifest)> {
    let manifest = read_manifest(dir)?;
    let mut patches = Vec::new();
    let mut splits = Splits::default();
    for entry in &manifest.splits {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path)?;
        if bytes.len() < HEADER || &bytes[..8] != MAGIC || read_u32(&bytes, 8) != VERSION {
            return Err(Error::format(&path, "bad header"));
        }
        let n = read_u32(&bytes, 12) as usize;
        let (h, w) = (read_u32(&bytes, 16) as usize, read_u32(&bytes, 20) as usize);
        if n != entry.count || h != manifest.patch_size || w != manifest.patch_size {
            return Err(Error::format(&path, "header disagrees with manifest"));
        }
        let px = h * w;
        if bytes.len() != HEADER + 4 * n * px + n {
            return Err(Error::format(
                &path,
                format!(
                    "expected {} bytes, found {}",
                    HEADER + 4 * n * px + n,
                    bytes.len()
                ),
            ));
        }
        let labels = &bytes[HEADER + 4 * n * px..];
        for (k, rec) in entry.patches.iter().enumerate() {
            let start = HEADER + 4 * k * px;
            let pixels = bytes[start..start + 4 * px]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let label = Label::from_index(labels[k] as usize)
                .filter(|&l| l == rec.label)
                .ok_or_else(|| Error::format(&path, format!("label mismatch for patch {k}")))?;
            splits.get_mut(entry.split).push(patches.len());
            patches.push(LabeledPatch {
                pixels,
                size: h,
                label,
                coverage: rec.coverage,
                source_scene: rec.scene.clone(),
                x: rec.x,
                y: rec.y,
            });
        }
    }
    Ok((
        DomainDataset::new(manifest.pipeline.clone(), patches, splits),
        manifest,
    ))
}
