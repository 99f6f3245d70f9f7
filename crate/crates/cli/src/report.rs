//! Evaluation and ranking files, and the human-readable run report.

use std::fmt::Write as _;

use forge_core::evaluation::{Exclusion, QuantileCurve};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub alpha: f64,
    pub layer_set: String,
    pub variants: usize,
    pub pairs: usize,
    /// Spearman correlation of normalized metric and mean gap per variant.
    pub spearman_mean_gap: Option<f64>,
    /// Spearman correlation of metric and gap over all pairs.
    pub spearman_pairs: Option<f64>,
    pub curve: QuantileCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfittingCurve {
    pub variants: usize,
    pub pairs: usize,
    /// Spearman correlation of source accuracy and gap.
    pub spearman: Option<f64>,
    pub curve: QuantileCurve,
}

/// `curves.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvesFile {
    pub metric: Vec<MetricCurve>,
    pub overfitting: OverfittingCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedVariant {
    pub rank: usize,
    pub variant_id: String,
    pub metric: f64,
    pub source_accuracy: f64,
}

/// `ranking.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingFile {
    pub alpha: f64,
    pub layer_set: String,
    pub min_source_accuracy: f64,
    pub selected: String,
    pub entries: Vec<RankedVariant>,
    pub excluded: Vec<Exclusion>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:+.4}"))
}

/// Curve rows every 0.1 along the metric axis.
pub fn curve_table(curve: &QuantileCurve) -> String {
    let mut out = String::new();
    let every = ((0.1 / curve.step).round() as usize).max(1);
    let _ = write!(out, "{:>7} {:>5}", "center", "n");
    for &p in &curve.levels {
        let _ = write!(out, " {:>8}", forge_core::evaluation::quantile_label(p));
    }
    out.push('\n');
    for (i, c) in curve.centers.iter().enumerate().step_by(every) {
        let _ = write!(out, "{c:>7.2} {:>5}", curve.counts[i]);
        for &p in &curve.levels {
            let label = forge_core::evaluation::quantile_label(p);
            match curve.quantiles[&label][i] {
                Some(v) => {
                    let _ = write!(out, " {v:>8.4}");
                }
                None => {
                    let _ = write!(out, " {:>8}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn render_report(
    config: &ExperimentConfig,
    ranking: &RankingFile,
    grid_points: usize,
    curves: Option<&CurvesFile>,
) -> String {
    let mut out = String::new();
    let metric = format!("M{}[{}]", ranking.alpha, ranking.layer_set);
    let _ = writeln!(out, "Margin-based detector selection");
    let _ = writeln!(out, "seed {}, {} grid points", config.seed, grid_points);
    let _ = writeln!(
        out,
        "{} variants ranked at source accuracy >= {}, {} excluded",
        ranking.entries.len(),
        ranking.min_source_accuracy,
        ranking.excluded.len()
    );
    let head = &ranking.entries[0];
    let _ = writeln!(
        out,
        "selected detector: {} ({metric} = {:.6}, source accuracy {:.4})\n",
        head.variant_id, head.metric, head.source_accuracy
    );
    let _ = writeln!(out, "{:>4}  {:<28} {:>14} {:>10}", "rank", "variant", metric, "src_acc");
    for e in &ranking.entries {
        let _ = writeln!(
            out,
            "{:>4}  {:<28} {:>14.6} {:>10.4}",
            e.rank, e.variant_id, e.metric, e.source_accuracy
        );
    }
    for x in &ranking.excluded {
        let _ = writeln!(out, "   -  {:<28} excluded: {}", x.variant_id, x.reason);
    }

    let Some(curves) = curves else {
        let _ = writeln!(out, "\nno gap analysis yet; run `forge evaluate`");
        return out;
    };
    let _ = writeln!(
        out,
        "\nExpected: detectors with larger latent margins generalize better, so the \
         margin metric should correlate negatively with the generalization gap."
    );
    for m in &curves.metric {
        let _ = writeln!(
            out,
            "Spearman(normalized M{}[{}], mean gap) over {} variants: {}; over {} pairs: {}",
            m.alpha,
            m.layer_set,
            m.variants,
            fmt_opt(m.spearman_mean_gap),
            m.pairs,
            fmt_opt(m.spearman_pairs)
        );
    }
    let _ = writeln!(
        out,
        "Spearman(source accuracy, gap) over {} pairs: {}",
        curves.overfitting.pairs,
        fmt_opt(curves.overfitting.spearman)
    );
    if let Some(m) = curves
        .metric
        .iter()
        .find(|m| m.alpha == ranking.alpha && m.layer_set == ranking.layer_set)
    {
        let _ = writeln!(
            out,
            "\nGap quantiles vs normalized {metric} (window {}, min {} points):",
            m.curve.window, m.curve.min_count
        );
        out.push_str(&curve_table(&m.curve));
    }
    let _ = writeln!(out, "\nGap quantiles vs source accuracy:");
    out.push_str(&curve_table(&curves.overfitting.curve));
    out
}
