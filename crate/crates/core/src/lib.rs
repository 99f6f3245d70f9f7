//! Constrained-convolution splicing detectors and margin-based model selection.
//!
//! The crate covers the whole experimental loop:
//!
//! * [`pipelines`]: parametric post-processing chains (wavelet denoise,
//!   unsharp mask, baseline JPEG) used to create shifted target domains.
//! * [`data`]: a synthetic splicing corpus, patch extraction, balancing,
//!   splitting and the on-disk dataset container.
//! * [`detector`]: the constrained-first-layer CNN and its latent spaces.
//! * [`training`]: SGD with plateau decay and early stopping, and the sweep
//!   harness that trains many variants.
//! * [`margins`]: first-order latent margins, per-layer summaries and the
//!   `M_alpha` metric.
//! * [`evaluation`]: generalization gaps, metric/gap pairs, sliding-window
//!   quantile curves, rank correlation and variant ranking.

pub mod data;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod hash;
pub mod image;
pub mod margins;
pub mod nn;
pub mod pipelines;
pub mod seed;
pub mod stats;
pub mod training;

pub use data::{DomainDataset, Label, LabeledPatch, SceneImage, Split, SynthConfig};

pub use detector::{DetectorConfig, DetectorModel, Normalization, Pooling};

pub use evaluation::{GapRecord, PairRecord, QuantileCurve};
pub use margins::{MarginSample, MarginSummary, MetricConfig};
pub use training::{DetectorVariant, SweepGrid, TrainConfig};

pub use error::{Error, Result};

pub use image::GrayImage;

pub use pipelines::PipelineParams;
