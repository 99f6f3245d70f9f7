//! Generalization gaps, metric/gap pairs, sliding-window quantile curves,
//! rank correlation and margin-based ranking.

mod plot;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use plot::{render_curve_svg, PlotStyle};

use crate::data::LabeledPatch;
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::margins::{MarginReport, MetricConfig};
use crate::stats::{average_ranks, mean, pearson, quantile_sorted, sort_floats};
use crate::training::evaluate_accuracy;

/// Tolerance on window edges so centers built from `k * step` do not drop
/// points that sit exactly on a boundary.
pub const WINDOW_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub variant_id: String,
    pub target_pipeline_id: String,
    pub source_accuracy: f64,
    pub target_accuracy: f64,
    pub gap: f64,
}

/// Accuracy on the source test split minus accuracy on the target test split.
pub fn generalization_gap(
    variant_id: &str,
    model: &DetectorModel,
    source_test: &[&LabeledPatch],
    target_id: &str,
    target_test: &[&LabeledPatch],
) -> Result<GapRecord> {
    let source_accuracy = evaluate_accuracy(model, source_test)?;
    let target_accuracy = evaluate_accuracy(model, target_test)?;
    Ok(gap_record(variant_id, target_id, source_accuracy, target_accuracy))
}

pub fn gap_record(variant_id: &str, target_id: &str, source_accuracy: f64, target_accuracy: f64) -> GapRecord {
    GapRecord {
        variant_id: variant_id.to_string(),
        target_pipeline_id: target_id.to_string(),
        source_accuracy,
        target_accuracy,
        gap: source_accuracy - target_accuracy,
    }
}

/// One `(M_alpha, gap)` couple for a detector and a target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub variant_id: String,
    pub target_id: String,
    pub alpha: f64,
    pub layer_set: String,
    pub metric: f64,
    /// Min-max normalized across variants for the same `(alpha, layer_set)`.
    pub metric_normalized: f64,
    pub source_acc: f64,
    pub target_acc: f64,
    pub gap: f64,
}

/// A variant that produced no pairs, and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub variant_id: String,
    pub reason: String,
}

/// Min-max scaling to `[0, 1]`; a constant input maps to `0.5`.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; values.len()]
    }
}

/// Crosses every variant with every target for each metric config.
///
/// `reports` holds the margin report of each variant, or the reason it could
/// not be computed; failed variants are excluded and listed. Records are
/// ordered by metric config, then variant, then target, following the input
/// orders.
pub fn build_pairs(
    variant_ids: &[String],
    reports: &BTreeMap<String, std::result::Result<MarginReport, String>>,
    gaps: &[GapRecord],
    metrics: &[MetricConfig],
) -> Result<(Vec<PairRecord>, Vec<Exclusion>)> {
    let mut exclusions = Vec::new();
    let mut kept: Vec<(&String, &MarginReport)> = Vec::new();
    for id in variant_ids {
        match reports.get(id) {
            Some(Ok(r)) => kept.push((id, r)),
            Some(Err(reason)) => exclusions.push(Exclusion {
                variant_id: id.clone(),
                reason: reason.clone(),
            }),
            None => exclusions.push(Exclusion {
                variant_id: id.clone(),
                reason: "no margin report".into(),
            }),
        }
    }
    for e in &exclusions {
        log::warn!("excluding {} from pairs: {}", e.variant_id, e.reason);
    }
    let mut by_variant: BTreeMap<&str, Vec<&GapRecord>> = BTreeMap::new();
    for g in gaps {
        by_variant.entry(g.variant_id.as_str()).or_default().push(g);
    }
    let mut pairs = Vec::new();
    for cfg in metrics {
        cfg.validate()?;
        let label = cfg.layers.label();
        let values = kept
            .iter()
            .map(|(id, r)| {
                r.metric(cfg.alpha, &label).ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "margin report of {id} lacks alpha {} over {label}",
                        cfg.alpha
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let normalized = min_max_normalize(&values);
        for (((id, _), &metric), &metric_normalized) in kept.iter().zip(&values).zip(&normalized) {
            for g in by_variant.get(id.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
                pairs.push(PairRecord {
                    variant_id: (*id).clone(),
                    target_id: g.target_pipeline_id.clone(),
                    alpha: cfg.alpha,
                    layer_set: label.clone(),
                    metric,
                    metric_normalized,
                    source_acc: g.source_accuracy,
                    target_acc: g.target_accuracy,
                    gap: g.gap,
                });
            }
        }
    }
    Ok((pairs, exclusions))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveConfig {
    pub step: f64,
    pub window: f64,
    pub quantiles: Vec<f64>,
    /// Windows with fewer points are left empty.
    pub min_count: usize,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            step: 0.01,
            window: 0.1,
            quantiles: vec![0.25, 0.5, 0.75, 0.9],
            min_count: 5,
        }
    }
}

impl CurveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step <= 1.0) {
            return Err(Error::param("step", "must lie in (0, 1]"));
        }
        if !(self.window > 0.0 && self.window.is_finite()) {
            return Err(Error::param("window", "must be positive"));
        }
        if self.quantiles.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(Error::param("quantiles", "levels must lie in [0, 1]"));
        }
        if self.min_count == 0 {
            return Err(Error::param("min_count", "must be at least 1"));
        }
        Ok(())
    }

    /// `0, step, 2 step, ..., 1`.
    pub fn centers(&self) -> Vec<f64> {
        let n = (1.0 / self.step).round() as usize;
        (0..=n).map(|k| k as f64 * self.step).collect()
    }
}

/// Display name of a quantile level.
pub fn quantile_label(p: f64) -> String {
    match p {
        p if p == 0.25 => "Q1".into(),
        p if p == 0.5 => "median".into(),
        p if p == 0.75 => "Q3".into(),
        p => format!("Q{}", (p * 100.0).round()),
    }
}

/// Quantiles of `y` over a sliding window of `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileCurve {
    pub step: f64,
    pub window: f64,
    pub min_count: usize,
    pub centers: Vec<f64>,
    /// Points inside each window.
    pub counts: Vec<usize>,
    pub levels: Vec<f64>,
    /// Label -> one value per center, `None` where the window is too sparse.
    pub quantiles: BTreeMap<String, Vec<Option<f64>>>,
}

/// Whether `x` lies in the window centered on `c`.
pub fn in_window(x: f64, c: f64, window: f64) -> bool {
    x >= c - window / 2.0 - WINDOW_EPS && x <= c + window / 2.0 + WINDOW_EPS
}

/// Sliding-window quantiles of the second coordinate against the first.
pub fn quantile_curve(points: &[(f64, f64)], cfg: &CurveConfig) -> Result<QuantileCurve> {
    cfg.validate()?;
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidInput("non-finite curve point".into()));
    }
    let centers = cfg.centers();
    let mut quantiles: BTreeMap<String, Vec<Option<f64>>> = cfg
        .quantiles
        .iter()
        .map(|&p| (quantile_label(p), Vec::with_capacity(centers.len())))
        .collect();
    let mut counts = Vec::with_capacity(centers.len());
    let mut sorted: Vec<(f64, f64)> = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    for &c in &centers {
        let lo = sorted.partition_point(|p| p.0 < c - cfg.window / 2.0 - WINDOW_EPS);
        let hi = sorted.partition_point(|p| p.0 <= c + cfg.window / 2.0 + WINDOW_EPS);
        let mut ys: Vec<f64> = sorted[lo..hi].iter().map(|p| p.1).collect();
        counts.push(ys.len());
        let populated = ys.len() >= cfg.min_count;
        sort_floats(&mut ys);
        for &p in &cfg.quantiles {
            let v = populated.then(|| quantile_sorted(&ys, p));
            quantiles.get_mut(&quantile_label(p)).expect("label inserted").push(v);
        }
    }
    Ok(QuantileCurve {
        step: cfg.step,
        window: cfg.window,
        min_count: cfg.min_count,
        centers,
        counts,
        levels: cfg.quantiles.clone(),
        quantiles,
    })
}

/// Curve of normalized metric against gap.
pub fn metric_curve(pairs: &[PairRecord], cfg: &CurveConfig) -> Result<QuantileCurve> {
    let points: Vec<(f64, f64)> = pairs.iter().map(|p| (p.metric_normalized, p.gap)).collect();
    quantile_curve(&points, cfg)
}

/// Curve of source accuracy against gap, over every trained variant.
pub fn overfitting_curve(gaps: &[GapRecord], cfg: &CurveConfig) -> Result<QuantileCurve> {
    let points: Vec<(f64, f64)> = gaps.iter().map(|g| (g.source_accuracy, g.gap)).collect();
    quantile_curve(&points, cfg)
}

/// Spearman correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput("correlation inputs differ in length".into()));
    }
    if x.len() < 3 {
        return Err(Error::UndefinedCorrelation("fewer than 3 pairs"));
    }
    if x.iter().all(|v| *v == x[0]) {
        return Err(Error::UndefinedCorrelation("all metric values are identical"));
    }
    if y.iter().all(|v| *v == y[0]) {
        return Err(Error::UndefinedCorrelation("all gaps are identical"));
    }
    pearson(&average_ranks(x), &average_ranks(y))
        .ok_or(Error::UndefinedCorrelation("zero rank variance"))
}

/// Spearman correlation between metric and gap over pairs.
pub fn rank_correlation(pairs: &[PairRecord]) -> Result<f64> {
    let x: Vec<f64> = pairs.iter().map(|p| p.metric).collect();
    let y: Vec<f64> = pairs.iter().map(|p| p.gap).collect();
    spearman(&x, &y)
}

/// Per variant: metric, normalized metric and gap averaged over targets,
/// in first-appearance order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantGap {
    pub variant_id: String,
    pub metric: f64,
    pub metric_normalized: f64,
    pub mean_gap: f64,
    pub targets: usize,
}

pub fn mean_gap_by_variant(pairs: &[PairRecord]) -> Vec<VariantGap> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&PairRecord>> = BTreeMap::new();
    for p in pairs {
        let entry = groups.entry(p.variant_id.as_str()).or_default();
        if entry.is_empty() {
            order.push(p.variant_id.as_str());
        }
        entry.push(p);
    }
    order
        .into_iter()
        .map(|id| {
            let g = &groups[id];
            let gaps: Vec<f64> = g.iter().map(|p| p.gap).collect();
            VariantGap {
                variant_id: id.to_string(),
                metric: g[0].metric,
                metric_normalized: g[0].metric_normalized,
                mean_gap: mean(&gaps),
                targets: g.len(),
            }
        })
        .collect()
}

/// What ranking needs to know about a variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub variant_id: String,
    pub metric: f64,
    pub source_accuracy: f64,
}

/// Indices of `entries` by metric descending, then source accuracy
/// descending, then id ascending. The first index is the selected detector.
pub fn rank_variants(entries: &[RankEntry]) -> Result<Vec<usize>> {
    if entries.is_empty() {
        return Err(Error::EmptySet("no variants to rank"));
    }
    if entries.iter().any(|e| e.metric.is_nan() || e.source_accuracy.is_nan()) {
        return Err(Error::InvalidInput("NaN in ranking inputs".into()));
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| {
        let (ea, eb) = (&entries[a], &entries[b]);
        eb.metric
            .total_cmp(&ea.metric)
            .then(eb.source_accuracy.total_cmp(&ea.source_accuracy))
            .then(ea.variant_id.cmp(&eb.variant_id))
    });
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::margins::{LayerReport, LayerSet, LayerSummary, MetricValue, SummaryBounds};

    fn entry(id: &str, metric: f64, acc: f64) -> RankEntry {
        RankEntry {
            variant_id: id.into(),
            metric,
            source_accuracy: acc,
        }
    }

    #[test]
    fn gap_arithmetic() {
        let g = gap_record("v", "t", 0.84, 0.72);
        assert!((g.gap - 0.12).abs() < 1e-12);
        assert_eq!(gap_record("v", "t", 0.8, 0.8).gap, 0.0);
    }

    #[test]
    fn ranking_rules() {
        let e = [entry("a", 3.1, 0.8), entry("b", 7.2, 0.8), entry("c", 5.0, 0.8)];
        assert_eq!(rank_variants(&e).unwrap(), vec![1, 2, 0]);
        let tie = [entry("a", 1.0, 0.80), entry("b", 1.0, 0.84)];
        assert_eq!(rank_variants(&tie).unwrap(), vec![1, 0]);
        let full_tie = [entry("z", 1.0, 0.8), entry("y", 1.0, 0.8)];
        assert_eq!(rank_variants(&full_tie).unwrap(), vec![1, 0]);
        assert!(rank_variants(&[]).is_err());
    }

    #[test]
    fn spearman_extremes_and_errors() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(spearman(&x, &[0.1, 0.2, 0.9, 1.5]).unwrap(), 1.0);
        assert!(matches!(spearman(&[1.0; 4], &x), Err(Error::UndefinedCorrelation(_))));
        assert!(spearman(&x[..2], &x[..2]).is_err());
    }

    #[test]
    fn spearman_invariant_under_monotone_transform() {
        let x = [0.3, 1.2, 0.7, 2.5, 1.9, 0.1];
        let y = [0.2, 0.1, 0.3, -0.1, 0.05, 0.4];
        let t: Vec<f64> = x.iter().map(|v: &f64| v.exp() * 3.0 + 1.0).collect();
        assert_eq!(spearman(&x, &y).unwrap(), spearman(&t, &y).unwrap());
    }

    #[test]
    fn curve_of_gaps_at_one_point() {
        let points: Vec<(f64, f64)> = (1..=9).map(|k| (0.5, k as f64 / 10.0)).collect();
        let curve = quantile_curve(&points, &CurveConfig::default()).unwrap();
        let at = |c: f64| curve.centers.iter().position(|x| (x - c).abs() < 1e-12).unwrap();
        let i = at(0.5);
        assert!((curve.quantiles["Q1"][i].unwrap() - 0.3).abs() < 1e-12);
        assert!((curve.quantiles["median"][i].unwrap() - 0.5).abs() < 1e-12);
        assert!((curve.quantiles["Q3"][i].unwrap() - 0.7).abs() < 1e-12);
        assert!(curve.quantiles["median"][at(0.44)].is_none());
        assert!(curve.quantiles["median"][at(0.45)].is_some());
        assert!(curve.quantiles["median"][at(0.56)].is_none());
        assert_eq!(curve.centers.len(), 101);
    }

    #[test]
    fn single_pair_curve() {
        let cfg = CurveConfig {
            min_count: 1,
            ..CurveConfig::default()
        };
        let curve = quantile_curve(&[(0.2, 0.07)], &cfg).unwrap();
        for (i, &n) in curve.counts.iter().enumerate() {
            for q in curve.quantiles.values() {
                assert_eq!(q[i], (n > 0).then_some(0.07));
            }
        }
    }

    fn report(id: &str, value: f64) -> MarginReport {
        let s = LayerSummary {
            mu: [1.0; 5],
            positive: 5,
            excluded_negative: 0,
            excluded_sentinel: 0,
        };
        MarginReport {
            variant_id: id.into(),
            sample_count: 5,
            bounds: SummaryBounds::MinMax,
            layers: vec![LayerReport {
                layer: "ConvRes".into(),
                scale: 1.0,
                summary: s,
            }],
            metrics: vec![MetricValue {
                alpha: 2.0,
                layer_set: "all".into(),
                value,
            }],
        }
    }

    #[test]
    fn pairs_cross_variants_and_targets() {
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let mut reports = BTreeMap::new();
        reports.insert("a".to_string(), Ok(report("a", 4.0)));
        reports.insert("b".to_string(), Ok(report("b", 6.0)));
        reports.insert("c".to_string(), Err("too few margins".to_string()));
        let mut gaps = Vec::new();
        for id in &ids {
            for t in ["t1", "t2"] {
                gaps.push(gap_record(id, t, 0.9, 0.8));
            }
        }
        let metrics = [MetricConfig {
            alpha: 2.0,
            layers: LayerSet::all(),
        }];
        let (pairs, excluded) = build_pairs(&ids, &reports, &gaps, &metrics).unwrap();
        assert_eq!(pairs.len(), 4);
        assert_eq!(excluded.len(), 1);
        assert_eq!(pairs[0].metric_normalized, 0.0);
        assert_eq!(pairs[3].metric_normalized, 1.0);
        assert_eq!(pairs[1].target_id, "t2");
        let means = mean_gap_by_variant(&pairs);
        assert_eq!(means.len(), 2);
        assert!((means[0].mean_gap - 0.1).abs() < 1e-12);
    }

    #[test]
    fn normalization_of_constant_metric() {
        assert_eq!(min_max_normalize(&[2.0, 2.0]), vec![0.5, 0.5]);
        assert_eq!(min_max_normalize(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }
}
