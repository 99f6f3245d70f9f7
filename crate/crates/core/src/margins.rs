//! First-order latent margins, their normalization and summaries, and the
//! `M_alpha` metric.
//!
//! For a sample with true label `y` and latent representation `x^l`, the
//! logit gap is `delta = f_y - f_other` and the margin is
//! `delta / ||grad_{x^l} delta||_2`: the distance from `x^l` to the
//! decision boundary when the map from `x^l` to the logits is linearized.
//! Correctly classified samples have positive margins.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{Label, LabeledPatch};
use crate::detector::{patches_to_tensor, DetectorModel};
use crate::error::{Error, Result};
use crate::nn::{Mode, Tensor};
use crate::seed::{rng, stream};
use crate::stats::{quantile_sorted, sort_floats};

/// Gradient norms and scales are floored at this value.
pub const EPSILON: f64 = 1e-12;
/// Fewest positive margins a layer summary accepts.
pub const MIN_POSITIVE_MARGINS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSample {
    pub layer: String,
    /// Signed; `+inf` flags a zero gradient with a nonzero logit gap.
    pub raw_margin: f64,
    pub normalized_margin: f64,
    pub sample_index: usize,
}

impl MarginSample {
    pub fn is_sentinel(&self) -> bool {
        self.raw_margin.is_infinite()
    }
}

/// Margin of one sample from its logit gap and gradient norm.
pub fn margin_from_gap(delta: f64, grad_norm: f64) -> Result<f64> {
    if delta.is_nan() || grad_norm.is_nan() {
        return Err(Error::Computation("NaN in margin computation".into()));
    }
    if grad_norm == 0.0 && delta != 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(delta / grad_norm.max(EPSILON))
}

/// Raw margins and activations of one batch at the requested probes.
#[derive(Debug)]
pub struct BatchMargins {
    /// Per probe, one raw margin per sample.
    pub raw: BTreeMap<String, Vec<f64>>,
    pub activations: BTreeMap<String, Tensor>,
}

/// Computes first-order margins of every sample in `x` at each probe with
/// one eval-mode forward pass and one backward pass.
pub fn first_order_margins(
    model: &DetectorModel,
    x: &Tensor,
    labels: &[Label],
    layers: &[&str],
) -> Result<BatchMargins> {
    if labels.len() != x.n {
        return Err(Error::InvalidInput(format!(
            "{} labels for a batch of {}",
            labels.len(),
            x.n
        )));
    }
    let indices = layers
        .iter()
        .map(|l| model.resolve_probe(l))
        .collect::<Result<Vec<_>>>()?;
    model.check_batch(x)?;
    let (trace, activations) = model
        .network
        .forward_trace_capture(x, &mut Mode::Eval, &indices)?;
    let logits = &trace.output;
    let mut seed_grad = Tensor::zeros(x.n, logits.c, 1, 1);
    let mut deltas = Vec::with_capacity(x.n);
    for (i, label) in labels.iter().enumerate() {
        let (y, o) = (label.index(), label.other().index());
        deltas.push(logits.sample(i)[y] - logits.sample(i)[o]);
        let row = seed_grad.sample_mut(i);
        row[y] = 1.0;
        row[o] = -1.0;
    }
    let grads = model.network.backward(&trace, &seed_grad, false, &indices);
    let mut raw = BTreeMap::new();
    let mut acts = BTreeMap::new();
    for (name, idx) in layers.iter().zip(&indices) {
        let g = &grads.block_outputs[idx];
        let margins = deltas
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let norm = g.sample(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                margin_from_gap(d, norm)
            })
            .collect::<Result<Vec<_>>>()?;
        raw.insert(name.to_string(), margins);
        acts.insert(name.to_string(), activations[idx].clone());
    }
    Ok(BatchMargins {
        raw,
        activations: acts,
    })
}

/// Streaming per-feature mean and variance (Welford, with Chan's batch merge).
#[derive(Debug, Clone)]
pub struct ScaleAccumulator {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl ScaleAccumulator {
    pub fn new(features: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; features],
            m2: vec![0.0; features],
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Adds every sample of `batch`; features are the flattened sample values.
    pub fn push(&mut self, batch: &Tensor) -> Result<()> {
        let f = self.mean.len();
        if batch.sample_len() != f {
            return Err(Error::InvalidInput(format!(
                "{} features, accumulator expects {f}",
                batch.sample_len()
            )));
        }
        if batch.n == 0 {
            return Ok(());
        }
        let nb = batch.n as f64;
        let mut bmean = vec![0.0; f];
        for i in 0..batch.n {
            for (m, v) in bmean.iter_mut().zip(batch.sample(i)) {
                *m += v;
            }
        }
        bmean.iter_mut().for_each(|m| *m /= nb);
        let mut bm2 = vec![0.0; f];
        for i in 0..batch.n {
            for ((s, v), m) in bm2.iter_mut().zip(batch.sample(i)).zip(&bmean) {
                *s += (v - m) * (v - m);
            }
        }
        let na = self.count as f64;
        let total = na + nb;
        for j in 0..f {
            let d = bmean[j] - self.mean[j];
            self.mean[j] += d * nb / total;
            self.m2[j] += bm2[j] + d * d * na * nb / total;
        }
        self.count += batch.n;
        Ok(())
    }

    /// `sqrt(mean over features of the population variance)`, floored at
    /// [`EPSILON`]. Fails when fewer than two samples were seen or every
    /// feature is constant.
    pub fn scale(&self, layer: &str) -> Result<f64> {
        if self.count < 2 {
            return Err(Error::InvalidInput(format!(
                "layer `{layer}`: need at least 2 samples to estimate a scale"
            )));
        }
        let total: f64 = self.m2.iter().sum::<f64>() / self.count as f64;
        let mean_var = total / self.mean.len() as f64;
        if !mean_var.is_finite() {
            return Err(Error::Computation(format!("layer `{layer}`: non-finite activations")));
        }
        if mean_var <= 0.0 {
            return Err(Error::DegenerateScale {
                layer: layer.to_string(),
            });
        }
        Ok(mean_var.sqrt().max(EPSILON))
    }
}

/// Scale of a single activation tensor (see [`ScaleAccumulator::scale`]).
pub fn activation_scale(layer: &str, activations: &Tensor) -> Result<f64> {
    let mut acc = ScaleAccumulator::new(activations.sample_len());
    acc.push(activations)?;
    acc.scale(layer)
}

/// Divides raw margins by `scale`.
pub fn normalize_margins(samples: &mut [MarginSample], scale: f64) {
    let scale = scale.max(EPSILON);
    for s in samples {
        s.normalized_margin = s.raw_margin / scale;
    }
}

/// How the two outer summary components are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryBounds {
    /// Smallest and largest positive margin.
    #[default]
    MinMax,
    /// Most extreme margins within `Q1 - 1.5 IQR` and `Q3 + 1.5 IQR`.
    Whiskers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    /// `(lower, Q1, median, Q3, upper)` of the positive normalized margins.
    pub mu: [f64; 5],
    pub positive: usize,
    pub excluded_negative: usize,
    pub excluded_sentinel: usize,
}

/// Summarizes one layer's normalized margins; non-positive margins and
/// sentinels are excluded first.
pub fn summarize_layer(layer: &str, margins: &[f64], bounds: SummaryBounds) -> Result<LayerSummary> {
    if margins.iter().any(|m| m.is_nan()) {
        return Err(Error::Computation(format!("layer `{layer}`: NaN margin")));
    }
    let excluded_sentinel = margins.iter().filter(|m| m.is_infinite()).count();
    let mut positive: Vec<f64> = margins
        .iter()
        .copied()
        .filter(|m| m.is_finite() && *m > 0.0)
        .collect();
    let excluded_negative = margins.len() - excluded_sentinel - positive.len();
    if positive.len() < MIN_POSITIVE_MARGINS {
        return Err(Error::InsufficientMargins {
            layer: layer.to_string(),
            count: positive.len(),
        });
    }
    sort_floats(&mut positive);
    let q1 = quantile_sorted(&positive, 0.25);
    let med = quantile_sorted(&positive, 0.5);
    let q3 = quantile_sorted(&positive, 0.75);
    let (min, max) = (positive[0], positive[positive.len() - 1]);
    let (lower, upper) = match bounds {
        SummaryBounds::MinMax => (min, max),
        SummaryBounds::Whiskers => {
            let iqr = q3 - q1;
            let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
            let lower = positive.iter().copied().find(|&m| m >= lo_fence).unwrap_or(min);
            let upper = positive.iter().rev().copied().find(|&m| m <= hi_fence).unwrap_or(max);
            (lower.min(q1), upper.max(q3))
        }
    };
    Ok(LayerSummary {
        mu: [lower, q1, med, q3, upper],
        positive: positive.len(),
        excluded_negative,
        excluded_sentinel,
    })
}

/// Per-layer summaries in network order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSummary {
    pub layers: Vec<String>,
    pub per_layer: BTreeMap<String, LayerSummary>,
}

impl MarginSummary {
    /// `mu` vectors of every layer, concatenated in network order.
    pub fn concatenated(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| self.per_layer[l].mu)
            .collect()
    }

    pub fn sample_count_per_layer(&self) -> BTreeMap<String, usize> {
        self.per_layer
            .iter()
            .map(|(k, v)| (k.clone(), v.positive))
            .collect()
    }
}

/// Which latent spaces a metric draws on: the keyword `"all"` or a list of
/// probe names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSet {
    Keyword(String),
    Named(Vec<String>),
}

impl LayerSet {
    pub fn all() -> Self {
        LayerSet::Keyword("all".into())
    }

    pub fn named<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        LayerSet::Named(names.into_iter().map(Into::into).collect())
    }

    /// Label used in reports: `all` or the names joined with `+`.
    pub fn label(&self) -> String {
        match self {
            LayerSet::Keyword(k) => k.clone(),
            LayerSet::Named(v) => v.join("+"),
        }
    }

    /// Expands to concrete layer names, given every available layer in
    /// network order. Named layers keep network order.
    pub fn resolve(&self, available: &[String]) -> Result<Vec<String>> {
        match self {
            LayerSet::Keyword(k) if k == "all" => Ok(available.to_vec()),
            LayerSet::Keyword(k) => Err(Error::UnknownLayer {
                name: k.clone(),
                valid: available.to_vec(),
            }),
            LayerSet::Named(names) => {
                if names.is_empty() {
                    return Err(Error::param("layers", "empty layer set"));
                }
                if let Some(bad) = names.iter().find(|n| !available.contains(n)) {
                    return Err(Error::UnknownLayer {
                        name: bad.clone(),
                        valid: available.to_vec(),
                    });
                }
                Ok(available.iter().filter(|a| names.contains(a)).cloned().collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub alpha: f64,
    pub layers: LayerSet,
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::param("alpha", "must be positive"));
        }
        Ok(())
    }
}

/// `sum_i mu_i^alpha`.
pub fn metric_from_components(mu: &[f64], alpha: f64) -> f64 {
    mu.iter().map(|m| m.powf(alpha)).sum()
}

/// `M_alpha` over the components of the configured layers.
pub fn margin_metric(summary: &MarginSummary, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    let layers = cfg.layers.resolve(&summary.layers)?;
    let mu: Vec<f64> = layers.iter().flat_map(|l| summary.per_layer[l].mu).collect();
    Ok(metric_from_components(&mu, cfg.alpha))
}

/// Sorted indices of at most `budget` samples out of `n`.
pub fn margin_subset(n: usize, budget: usize, seed: u64) -> Vec<usize> {
    if n <= budget {
        return (0..n).collect();
    }
    let mut idx = sample(&mut rng(seed, stream::MARGIN_SUBSET), n, budget).into_vec();
    idx.sort_unstable();
    idx
}

/// Per-layer entry of a margin report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    pub scale: f64,
    #[serde(flatten)]
    pub summary: LayerSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub alpha: f64,
    pub layer_set: String,
    pub value: f64,
}

/// Everything measured about one detector's margins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub variant_id: String,
    pub sample_count: usize,
    pub bounds: SummaryBounds,
    pub layers: Vec<LayerReport>,
    pub metrics: Vec<MetricValue>,
}

impl MarginReport {
    pub fn summary(&self) -> MarginSummary {
        MarginSummary {
            layers: self.layers.iter().map(|l| l.layer.clone()).collect(),
            per_layer: self
                .layers
                .iter()
                .map(|l| (l.layer.clone(), l.summary.clone()))
                .collect(),
        }
    }

    pub fn metric(&self, alpha: f64, layer_set: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.alpha == alpha && m.layer_set == layer_set)
            .map(|m| m.value)
    }
}

/// All margins of `patches` at `layers`, normalized with scales estimated
/// over the whole set. Returns the per-layer samples and scales.
pub fn compute_margins(
    model: &DetectorModel,
    patches: &[&LabeledPatch],
    layers: &[&str],
    batch_size: usize,
) -> Result<(BTreeMap<String, Vec<MarginSample>>, BTreeMap<String, f64>)> {
    if patches.len() < 2 {
        return Err(Error::InvalidInput(
            "margins need at least 2 samples for the normalization scale".into(),
        ));
    }
    let mut samples: BTreeMap<String, Vec<MarginSample>> = BTreeMap::new();
    let mut accs: BTreeMap<String, ScaleAccumulator> = BTreeMap::new();
    let mut offset = 0;
    for chunk in patches.chunks(batch_size.max(1)) {
        let x = patches_to_tensor(chunk)?;
        let labels: Vec<Label> = chunk.iter().map(|p| p.label).collect();
        let batch = first_order_margins(model, &x, &labels, layers)?;
        for (layer, raw) in batch.raw {
            let act = &batch.activations[&layer];
            accs.entry(layer.clone())
                .or_insert_with(|| ScaleAccumulator::new(act.sample_len()))
                .push(act)?;
            samples
                .entry(layer.clone())
                .or_default()
                .extend(raw.into_iter().enumerate().map(|(i, r)| MarginSample {
                    layer: layer.clone(),
                    raw_margin: r,
                    normalized_margin: f64::NAN,
                    sample_index: offset + i,
                }));
        }
        offset += chunk.len();
    }
    let mut scales = BTreeMap::new();
    for (layer, acc) in &accs {
        let scale = acc.scale(layer)?;
        normalize_margins(samples.get_mut(layer).expect("same keys"), scale);
        scales.insert(layer.clone(), scale);
    }
    Ok((samples, scales))
}

/// Computes the margin report of one detector on `patches`.
pub fn margin_report(
    variant_id: &str,
    model: &DetectorModel,
    patches: &[&LabeledPatch],
    metrics: &[MetricConfig],
    bounds: SummaryBounds,
    batch_size: usize,
) -> Result<MarginReport> {
    let layer_names = model.latent_layers();
    let layers: Vec<&str> = layer_names.iter().map(String::as_str).collect();
    let (samples, scales) = compute_margins(model, patches, &layers, batch_size)?;
    let mut reports = Vec::with_capacity(layers.len());
    for layer in &layer_names {
        let normalized: Vec<f64> = samples[layer].iter().map(|s| s.normalized_margin).collect();
        reports.push(LayerReport {
            layer: layer.clone(),
            scale: scales[layer],
            summary: summarize_layer(layer, &normalized, bounds)?,
        });
    }
    let mut report = MarginReport {
        variant_id: variant_id.to_string(),
        sample_count: patches.len(),
        bounds,
        layers: reports,
        metrics: Vec::new(),
    };
    let summary = report.summary();
    for cfg in metrics {
        report.metrics.push(MetricValue {
            alpha: cfg.alpha,
            layer_set: cfg.layers.label(),
            value: margin_metric(&summary, cfg)?,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary_of(values: &[f64]) -> LayerSummary {
        summarize_layer("l", values, SummaryBounds::MinMax).unwrap()
    }

    #[test]
    fn margin_handles_zero_gradient() {
        assert_eq!(margin_from_gap(10.0, 5.0).unwrap(), 2.0);
        assert_eq!(margin_from_gap(1.0, 0.0).unwrap(), f64::INFINITY);
        assert_eq!(margin_from_gap(0.0, 0.0).unwrap(), 0.0);
        assert!(margin_from_gap(f64::NAN, 1.0).is_err());
        assert_eq!(margin_from_gap(1e-20, 1e-15).unwrap(), 1e-20 / EPSILON);
    }

    #[test]
    fn summary_quantiles() {
        let v: Vec<f64> = (1..=9).map(f64::from).collect();
        assert_eq!(summary_of(&v).mu, [1.0, 3.0, 5.0, 7.0, 9.0]);
        let s = summary_of(&[-1.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
        assert_eq!(s.mu, [2.0, 4.0, 6.0, 8.0, 10.0]);
        assert_eq!(s.excluded_negative, 1);
        assert_eq!(summary_of(&[0.7; 6]).mu, [0.7; 5]);
    }

    #[test]
    fn summary_excludes_sentinels_and_counts() {
        let s = summary_of(&[f64::INFINITY, 1.0, 2.0, 3.0, 4.0, 5.0, 0.0, -2.0]);
        assert_eq!(s.excluded_sentinel, 1);
        assert_eq!(s.excluded_negative, 2);
        assert_eq!(s.positive, 5);
        match summarize_layer("fc1", &[1.0, 2.0, -3.0, 4.0, 5.0], SummaryBounds::MinMax) {
            Err(Error::InsufficientMargins { layer, count }) => {
                assert_eq!((layer.as_str(), count), ("fc1", 4));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn whisker_bounds_clip_outliers() {
        let mut v: Vec<f64> = (1..=9).map(f64::from).collect();
        v.push(100.0);
        let s = summarize_layer("l", &v, SummaryBounds::Whiskers).unwrap();
        // Q1 = 3.25, Q3 = 7.75, upper fence 14.5.
        assert_eq!(s.mu[0], 1.0);
        assert_eq!(s.mu[4], 9.0);
        let m = summarize_layer("l", &v, SummaryBounds::MinMax).unwrap();
        assert_eq!(m.mu[4], 100.0);
    }

    #[test]
    fn metric_matches_hand_values() {
        assert_eq!(metric_from_components(&[1.0; 5], 2.0), 5.0);
        assert_eq!(metric_from_components(&[0.5, 2.0], 1.0), 2.5);
        assert_eq!(metric_from_components(&[3.0, 4.0], 2.0), 25.0);
    }

    #[test]
    fn metric_selects_layers() {
        let summary = MarginSummary {
            layers: vec!["a".into(), "b".into()],
            per_layer: BTreeMap::from([
                ("a".into(), summary_of(&[1.0; 5])),
                ("b".into(), summary_of(&[2.0; 5])),
            ]),
        };
        let m = |layers, alpha| margin_metric(&summary, &MetricConfig { alpha, layers });
        assert_eq!(m(LayerSet::all(), 1.0).unwrap(), 15.0);
        assert_eq!(m(LayerSet::named(["b"]), 2.0).unwrap(), 20.0);
        assert!(matches!(m(LayerSet::named(["c"]), 1.0), Err(Error::UnknownLayer { .. })));
        assert!(m(LayerSet::all(), 0.0).is_err());
        assert_eq!(summary.concatenated().len(), 10);
    }

    #[test]
    fn layer_set_serde() {
        let all: LayerSet = serde_json::from_str("\"all\"").unwrap();
        assert_eq!(all, LayerSet::all());
        let named: LayerSet = serde_json::from_str("[\"ConvRes\"]").unwrap();
        assert_eq!(named.label(), "ConvRes");
        let bogus: LayerSet = serde_json::from_str("\"every\"").unwrap();
        assert!(bogus.resolve(&["a".into()]).is_err());
    }

    #[test]
    fn accumulator_matches_direct_variance() {
        // Four samples of three features.
        let data = vec![
            1.0, 0.0, 2.0, //
            3.0, 0.0, 2.0, //
            5.0, 1.0, 2.0, //
            7.0, 1.0, 2.0,
        ];
        let t = Tensor::matrix(4, 3, data.clone()).unwrap();
        let mut oracle = 0.0;
        for j in 0..3 {
            let col: Vec<f64> = (0..4).map(|i| data[i * 3 + j]).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            oracle += col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        }
        let expected = (oracle / 3.0).sqrt();
        assert!((activation_scale("l", &t).unwrap() - expected).abs() < 1e-15);

        let mut acc = ScaleAccumulator::new(3);
        acc.push(&t.select(&[0])).unwrap();
        acc.push(&t.select(&[1, 2])).unwrap();
        acc.push(&t.select(&[3])).unwrap();
        assert!((acc.scale("l").unwrap() - expected).abs() < 1e-14);

        let flat = Tensor::matrix(3, 2, vec![1.0; 6]).unwrap();
        assert!(matches!(activation_scale("c", &flat), Err(Error::DegenerateScale { .. })));
        assert!(activation_scale("c", &t.select(&[0])).is_err());
    }

    #[test]
    fn subset_is_sorted_and_capped() {
        assert_eq!(margin_subset(3, 10, 1), vec![0, 1, 2]);
        let s = margin_subset(100, 10, 1);
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, margin_subset(100, 10, 1));
    }
}
