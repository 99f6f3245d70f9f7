//! The constrained-first-layer splicing detector.
//!
//! Blocks, in order: `ConvRes` (constrained prediction-error filters),
//! `conv2`..`conv4` (convolution, optional batch norm, tanh, pooling),
//! `fc1`, `fc2` and `fc3` (two logits). Every block output is a probe point;
//! `fc3-input` names the representation entering the last linear layer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Label, LabeledPatch};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Block, Conv2d, Layer, Linear, Network, Pool2d, PoolKind, Tensor};
use crate::seed::{rng, stream, Rng};

pub const CONSTRAINED_LAYER: &str = "ConvRes";
pub const OUTPUT_LAYER: &str = "fc3";
pub const FC3_INPUT: &str = "fc3-input";

const PROJECTION_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Average,
}

impl Pooling {
    pub fn short(self) -> &'static str {
        match self {
            Pooling::Max => "max",
            Pooling::Average => "avg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    BatchNorm,
}

impl Normalization {
    pub fn short(self) -> &'static str {
        match self {
            Normalization::None => "nonorm",
            Normalization::BatchNorm => "bn",
        }
    }
}

/// Layer widths at `width_scale = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchDims {
    pub constrained_filters: usize,
    pub conv_channels: [usize; 3],
    pub conv_kernels: [usize; 3],
    pub fc_units: [usize; 2],
    pub pool_kernel: usize,
    pub pool_stride: usize,
}

impl Default for ArchDims {
    fn default() -> Self {
        Self {
            constrained_filters: 3,
            conv_channels: [16, 32, 32],
            conv_kernels: [5, 3, 1],
            fc_units: [64, 64],
            pool_kernel: 3,
            pool_stride: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub pooling: Pooling,
    pub normalization: Normalization,
    pub dropout_rate: f64,
    pub width_scale: f64,
    pub constrained_kernel: usize,
    pub num_classes: usize,
    pub rng_seed: u64,
    pub patch_size: usize,
    /// Factor applied to `[0, 1]` pixel values before the constrained layer.
    pub input_scale: f64,
    pub dims: ArchDims,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            pooling: Pooling::Max,
            normalization: Normalization::None,
            dropout_rate: 0.0,
            width_scale: 0.5,
            constrained_kernel: 5,
            num_classes: 2,
            rng_seed: 22,
            patch_size: 128,
            input_scale: 32.0,
            dims: ArchDims::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::param("dropout_rate", "must lie in [0, 1)"));
        }
        if !(self.width_scale.is_finite() && self.width_scale > 0.0) {
            return Err(Error::param("width_scale", "must be positive"));
        }
        if self.constrained_kernel < 3 || self.constrained_kernel.is_multiple_of(2) {
            return Err(Error::param(
                "constrained_kernel",
                "must be odd and at least 3",
            ));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::param("input_scale", "must be positive"));
        }
        if self.num_classes != 2 {
            return Err(Error::param(
                "num_classes",
                "the detector always has 2 classes",
            ));
        }
        let d = &self.dims;
        if d.constrained_filters == 0 || d.conv_channels.contains(&0) || d.fc_units.contains(&0) {
            return Err(Error::param("dims", "layer widths must be positive"));
        }
        if d.conv_kernels.contains(&0) || d.pool_kernel == 0 || d.pool_stride == 0 {
            return Err(Error::param("dims", "kernels and strides must be positive"));
        }
        Ok(())
    }

    fn scaled(&self, base: usize) -> usize {
        ((base as f64 * self.width_scale).round() as usize).max(1)
    }
}

/// A built detector: configuration plus network state.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub network: Network,
}

fn uniform(len: usize, bound: f64, r: &mut Rng) -> Vec<f64> {
    (0..len).map(|_| r.random_range(-bound..bound)).collect()
}

/// Builds the network for `config` with fan-in uniform initialization
/// (`U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases) and projects
/// the constrained layer.
///
/// Constrained filters start from `U(0, 1/sqrt(fan_in))`, so after
/// projection each one is a positive neighbourhood predictor minus the
/// center pixel.
pub fn build_detector(config: &DetectorConfig) -> Result<DetectorModel> {
    config.validate()?;
    let d = &config.dims;
    let mut r = rng(config.rng_seed, stream::INIT);
    let k0 = config.constrained_kernel;

    let mut blocks = Vec::new();
    let fan = (k0 * k0) as f64;
    blocks.push(Block {
        name: CONSTRAINED_LAYER.into(),
        layers: vec![
            Layer::Scale(config.input_scale),
            Layer::Conv(Conv2d {
                in_channels: 1,
                out_channels: d.constrained_filters,
                kernel: k0,
                stride: 1,
                padding: 0,
                weight: (0..d.constrained_filters * k0 * k0)
                    .map(|_| r.random_range(0.0..1.0 / fan.sqrt()))
                    .collect(),
                bias: None,
            }),
        ],
    });

    let pool_kind = match config.pooling {
        Pooling::Max => PoolKind::Max,
        Pooling::Average => PoolKind::Average,
    };
    let mut in_ch = d.constrained_filters;
    for (i, (&base, &k)) in d.conv_channels.iter().zip(&d.conv_kernels).enumerate() {
        let out_ch = config.scaled(base);
        let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
        let weight = uniform(out_ch * in_ch * k * k, bound, &mut r);
        let bias = uniform(out_ch, bound, &mut r);
        let mut layers = vec![Layer::Conv(Conv2d {
            in_channels: in_ch,
            out_channels: out_ch,
            kernel: k,
            stride: if i == 0 { 2 } else { 1 },
            padding: k / 2,
            weight,
            bias: Some(bias),
        })];
        if config.normalization == Normalization::BatchNorm {
            layers.push(Layer::BatchNorm(BatchNorm::new(out_ch)));
        }
        layers.push(Layer::Tanh);
        layers.push(Layer::Pool(Pool2d {
            kind: pool_kind,
            kernel: d.pool_kernel,
            stride: d.pool_stride,
        }));
        blocks.push(Block {
            name: format!("conv{}", i + 2),
            layers,
        });
        in_ch = out_ch;
    }

    let conv_net = Network {
        input_shape: (1, config.patch_size, config.patch_size),
        blocks,
    };
    let (c, h, w) = *conv_net
        .block_shapes()
        .map_err(|e| {
            Error::InvalidConfig(format!(
                "patch size {} is incompatible with the architecture: {e}",
                config.patch_size
            ))
        })?
        .last()
        .expect("conv blocks present");
    let mut blocks = conv_net.blocks;

    let widths = [
        c * h * w,
        config.scaled(d.fc_units[0]),
        config.scaled(d.fc_units[1]),
        config.num_classes,
    ];
    for i in 0..3 {
        let (fan_in, fan_out) = (widths[i], widths[i + 1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut layers = Vec::new();
        if i == 0 {
            layers.push(Layer::Flatten);
        }
        if config.dropout_rate > 0.0 {
            layers.push(Layer::Dropout(config.dropout_rate));
        }
        layers.push(Layer::Linear(Linear {
            in_features: fan_in,
            out_features: fan_out,
            weight: uniform(fan_in * fan_out, bound, &mut r),
            bias: uniform(fan_out, bound, &mut r),
        }));
        if i < 2 {
            layers.push(Layer::Tanh);
        }
        blocks.push(Block {
            name: format!("fc{}", i + 1),
            layers,
        });
    }

    let mut model = DetectorModel {
        config: config.clone(),
        network: Network {
            input_shape: (1, config.patch_size, config.patch_size),
            blocks,
        },
    };
    model.network.block_shapes()?;
    model.project_constraint();
    Ok(model)
}

/// Projects `k x k` filters stored back to back onto the constraint set:
/// center `-1`, off-center coefficients summing to `1`.
///
/// Off-center coefficients are rescaled by their sum; when that sum is
/// within `1e-12` of zero, the shortfall is spread evenly instead.
pub fn project_constrained_weights(weights: &mut [f64], k: usize) {
    assert!(k % 2 == 1, "constrained kernel must be odd");
    let kk = k * k;
    let center = (k / 2) * k + k / 2;
    for filter in weights.chunks_mut(kk) {
        filter[center] = 0.0;
        let sum: f64 = filter.iter().sum();
        if sum.abs() > PROJECTION_EPS {
            filter.iter_mut().for_each(|v| *v /= sum);
        } else {
            let shift = (1.0 - sum) / (kk - 1) as f64;
            filter.iter_mut().for_each(|v| *v += shift);
        }
        filter[center] = -1.0;
    }
}

/// Largest violation of each constraint over all filters:
/// `(max |w(0,0) + 1|, max |sum off-center - 1|)`.
pub fn constraint_violation(weights: &[f64], k: usize) -> (f64, f64) {
    let kk = k * k;
    let center = (k / 2) * k + k / 2;
    let mut worst = (0.0f64, 0.0f64);
    for filter in weights.chunks(kk) {
        let off: f64 = filter
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != center)
            .map(|(_, v)| v)
            .sum();
        worst.0 = worst.0.max((filter[center] + 1.0).abs());
        worst.1 = worst.1.max((off - 1.0).abs());
    }
    worst
}

/// Stacks patches into an `(n, 1, size, size)` tensor.
pub fn patches_to_tensor(patches: &[&LabeledPatch]) -> Result<Tensor> {
    let Some(first) = patches.first() else {
        return Ok(Tensor::zeros(0, 1, 0, 0));
    };
    let size = first.size;
    let mut data = Vec::with_capacity(patches.len() * size * size);
    for p in patches {
        if p.size != size || p.pixels.len() != size * size {
            return Err(Error::InvalidInput(
                "patches of mixed sizes in one batch".into(),
            ));
        }
        data.extend(p.pixels.iter().map(|&v| f64::from(v)));
    }
    Tensor::from_vec(patches.len(), 1, size, size, data)
}

const WEIGHTS_MAGIC: &[u8; 4] = b"FRGW";
const WEIGHTS_VERSION: u32 = 1;

impl DetectorModel {
    pub fn build(config: &DetectorConfig) -> Result<Self> {
        build_detector(config)
    }

    /// Block names in network order.
    pub fn layer_names(&self) -> Vec<String> {
        self.network.blocks.iter().map(|b| b.name.clone()).collect()
    }

    /// Every name accepted by [`latent_activations`](Self::latent_activations).
    pub fn probe_names(&self) -> Vec<String> {
        let mut names = self.layer_names();
        names.push(FC3_INPUT.into());
        names
    }

    /// The latent spaces used for margins: every block output except the
    /// logits, with the penultimate block named `fc3-input`.
    pub fn latent_layers(&self) -> Vec<String> {
        let n = self.network.blocks.len();
        let mut names: Vec<String> = self.network.blocks[..n - 2]
            .iter()
            .map(|b| b.name.clone())
            .collect();
        names.push(FC3_INPUT.into());
        names
    }

    /// Maps a probe name to the index of the block whose output it denotes.
    pub fn resolve_probe(&self, name: &str) -> Result<usize> {
        let found = match name.strip_suffix("-input") {
            Some(block) => self
                .network
                .block_index(block)
                .filter(|&i| i > 0)
                .map(|i| i - 1),
            None => self.network.block_index(name),
        };
        found.ok_or_else(|| Error::UnknownLayer {
            name: name.to_string(),
            valid: self.probe_names(),
        })
    }

    pub(crate) fn check_batch(&self, x: &Tensor) -> Result<()> {
        let s = self.config.patch_size;
        if (x.c, x.h, x.w) != (1, s, s) {
            return Err(Error::InvalidInput(format!(
                "batch has shape {}x{}x{}, detector expects 1x{s}x{s}",
                x.c, x.h, x.w
            )));
        }
        Ok(())
    }

    /// Eval-mode logits, shape `(n, 2)`.
    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        let out = self.network.forward(x)?;
        if !out.is_finite() {
            return Err(Error::Computation("non-finite logits".into()));
        }
        Ok(out)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<Label>> {
        let logits = self.forward_logits(x)?;
        Ok((0..logits.n)
            .map(|i| argmax_label(logits.sample(i)))
            .collect())
    }

    /// Eval-mode activations at the named probes, captured in one pass.
    pub fn latent_activations(
        &self,
        x: &Tensor,
        names: &[&str],
    ) -> Result<BTreeMap<String, Tensor>> {
        self.check_batch(x)?;
        let indices = names
            .iter()
            .map(|n| self.resolve_probe(n))
            .collect::<Result<Vec<_>>>()?;
        let (captured, _) = self.network.forward_capture(x, &indices)?;
        Ok(names
            .iter()
            .zip(&indices)
            .map(|(n, i)| (n.to_string(), captured[i].clone()))
            .collect())
    }

    fn constrained_conv(&self) -> &Conv2d {
        match &self.network.blocks[0].layers[1] {
            Layer::Conv(c) => c,
            _ => unreachable!("first layer is the constrained convolution"),
        }
    }

    pub fn constrained_weights(&self) -> &[f64] {
        &self.constrained_conv().weight
    }

    pub fn project_constraint(&mut self) {
        let k = self.config.constrained_kernel;
        if let Layer::Conv(c) = &mut self.network.blocks[0].layers[1] {
            project_constrained_weights(&mut c.weight, k);
        }
    }

    pub fn constraint_violation(&self) -> (f64, f64) {
        constraint_violation(self.constrained_weights(), self.config.constrained_kernel)
    }

    /// Fails when either constraint is violated by more than `tol`.
    pub fn check_constraint(&self, tol: f64) -> Result<()> {
        let (center, off) = self.constraint_violation();
        if center >= tol || off >= tol {
            return Err(Error::InvalidInput(format!(
                "constrained layer violates its constraint (center {center:.3e}, off-center sum {off:.3e})"
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.network.param_count()
    }

    /// Writes every named tensor (parameters and normalization statistics).
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(WEIGHTS_MAGIC);
        buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        let state = self.network.state();
        let shapes = self.network.state_shapes();
        buf.extend_from_slice(&(state.len() as u32).to_le_bytes());
        for ((name, data), shape) in state.iter().zip(&shapes) {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in data.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("bin.tmp");
        fs::write(&tmp, &buf)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Builds the model for `config` and overwrites its state from `path`.
    /// Names and shapes must match exactly; the constraint is re-checked.
    pub fn load(config: &DetectorConfig, path: &Path) -> Result<Self> {
        let mut model = build_detector(config)?;
        let bytes = fs::read(path)?;
        let bad = |reason: String| Error::format(path, reason);
        let mut cur = Cursor {
            bytes: &bytes,
            at: 0,
        };
        if cur.take(4).ok_or_else(|| bad("truncated header".into()))? != WEIGHTS_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated header".into()))?;
        if version != WEIGHTS_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = cur.u32().ok_or_else(|| bad("truncated header".into()))? as usize;
        let shapes = model.network.state_shapes();
        let mut state = model.network.state_mut();
        if count != state.len() {
            return Err(bad(format!("{count} tensors, model has {}", state.len())));
        }
        for ((name, target), shape) in state.iter_mut().zip(&shapes) {
            let trunc = || bad(format!("truncated at tensor {name}"));
            let name_len = cur.u32().ok_or_else(trunc)? as usize;
            let stored = cur.take(name_len).ok_or_else(trunc)?;
            if stored != name.as_bytes() {
                return Err(bad(format!(
                    "expected tensor {name}, found {}",
                    String::from_utf8_lossy(stored)
                )));
            }
            let ndim = cur.u32().ok_or_else(trunc)? as usize;
            let dims = (0..ndim)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(trunc)?;
            if &dims != shape {
                return Err(bad(format!(
                    "tensor {name} has shape {dims:?}, expected {shape:?}"
                )));
            }
            for v in target.iter_mut() {
                *v = cur.f64().ok_or_else(trunc)?;
            }
        }
        if cur.at != bytes.len() {
            return Err(bad("trailing bytes".into()));
        }
        model.check_constraint(1e-5)?;
        Ok(model)
    }
}

pub(crate) fn argmax_label(logits: &[f64]) -> Label {
    if logits[1] > logits[0] {
        Label::Forged
    } else {
        Label::Authentic
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.at..self.at.checked_add(n)?)?;
        self.at += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f64(&mut self) -> Option<f64> {
        self.take(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}
