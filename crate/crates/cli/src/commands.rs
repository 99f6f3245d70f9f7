//! The pipeline stages. Each stage reads the artifacts of the previous ones
//! and skips work whose inputs hash-match what is already on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use forge_core::data::{
    read_domain, read_manifest, write_domain, DomainLayout, LabeledPatch, SceneRecord, Split,
    SyntheticScenes,
};
use forge_core::evaluation::{
    build_pairs, gap_record, mean_gap_by_variant, metric_curve, overfitting_curve, rank_variants,
    render_curve_svg, spearman, Exclusion, PlotStyle, RankEntry,
};
use forge_core::hash::config_hash;
use forge_core::margins::{margin_report, margin_subset, MarginReport};
use forge_core::pipelines::{PipelineGrid, PipelineParams};
use forge_core::training::{
    evaluate_accuracy, load_checkpoint, point_hash, read_sweep_index, run_sweep, SweepStatus,
    SWEEP_INDEX,
};
use forge_core::{DetectorVariant, Error as CoreError, GapRecord, PairRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::report::{render_report, CurvesFile, MetricCurve, OverfittingCurve, RankedVariant, RankingFile};
use crate::workspace::{read_stamp, write_json, write_stamp, Workspace};

/// Everything a command needs.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub workspace: Workspace,
    pub jobs: usize,
}

impl Context {
    pub fn new(config: ExperimentConfig, root: impl Into<PathBuf>, jobs: usize) -> Self {
        Self {
            config,
            workspace: Workspace::new(root),
            jobs: jobs.max(1),
        }
    }

    fn pool(&self) -> CliResult<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| CliError::Config(format!("cannot start {} workers: {e}", self.jobs)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSummary {
    pub reused: bool,
    pub split_sizes: [usize; 3],
    pub targets: usize,
}

pub fn cmd_synth(ctx: &Context) -> CliResult<SynthSummary> {
    let ws = &ctx.workspace;
    let cfg = &ctx.config;
    let hash = cfg.data_hash()?;
    let pipelines = cfg.targets.resolve()?;
    let sizes = |ws: &Workspace| -> CliResult<[usize; 3]> {
        let manifest = read_manifest(&ws.source())?;
        let mut sizes = [0; 3];
        for s in &manifest.splits {
            let i = Split::ALL.iter().position(|&x| x == s.split).expect("known split");
            sizes[i] = s.count;
        }
        Ok(sizes)
    };
    if read_stamp(&ws.data_stamp()).as_deref() == Some(hash.as_str()) {
        log::info!("datasets up to date");
        return Ok(SynthSummary {
            reused: true,
            split_sizes: sizes(ws)?,
            targets: pipelines.len(),
        });
    }
    if ws.data().exists() {
        fs::remove_dir_all(ws.data())?;
    }
    let pool = ctx.pool()?;
    let scenes = SyntheticScenes::new(cfg.seed, cfg.data.scenes, cfg.data.synth.clone())?;
    let layout = pool.install(|| DomainLayout::compute(&scenes, &cfg.data.patches))?;
    let records: Vec<SceneRecord> = layout
        .scene_ids
        .iter()
        .zip(&scenes.seeds)
        .map(|(id, &seed)| SceneRecord {
            id: id.clone(),
            seed,
        })
        .collect();
    log::info!("{} scenes, {} patches", scenes.seeds.len(), layout.len());
    let source = pool.install(|| {
        layout.materialize(&scenes, &PipelineParams::identity("source"), &Split::ALL)
    })?;
    write_domain(&ws.source(), &source, &hash, records.clone())?;
    drop(source);
    for p in &pipelines {
        log::info!("target domain {}", p.pipeline_id);
        let target = pool.install(|| layout.materialize(&scenes, p, &[Split::Test]))?;
        write_domain(&ws.target(&p.pipeline_id), &target, &hash, records.clone())?;
    }
    write_json(
        &ws.data().join("pipelines.json"),
        &PipelineGrid {
            pipelines: pipelines.clone(),
        },
    )?;
    write_stamp(&ws.data_stamp(), &hash)?;
    Ok(SynthSummary {
        reused: false,
        split_sizes: sizes(ws)?,
        targets: pipelines.len(),
    })
}

fn require_data(ctx: &Context) -> CliResult<String> {
    let hash = ctx.config.data_hash()?;
    let stamp = ctx.workspace.data_stamp();
    match read_stamp(&stamp) {
        Some(h) if h == hash => Ok(hash),
        _ => Err(CliError::dependency("synth", stamp)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub trained: usize,
    pub reused: usize,
    pub ok: usize,
    pub failed: usize,
}

pub fn cmd_sweep(ctx: &Context) -> CliResult<SweepSummary> {
    let data_hash = require_data(ctx)?;
    let cfg = &ctx.config;
    let (source, _) = read_domain(&ctx.workspace.source())?;
    let outcome = run_sweep(
        &cfg.sweep,
        &cfg.detector,
        &cfg.train,
        &source,
        &data_hash,
        &ctx.workspace.sweep(),
        ctx.jobs,
    )?;
    let failed: Vec<_> = outcome
        .records
        .iter()
        .filter(|r| r.status == SweepStatus::Failed)
        .collect();
    for r in &failed {
        log::warn!("{} failed: {}", r.variant_id, r.error.as_deref().unwrap_or("?"));
    }
    if outcome.variants.is_empty() {
        return Err(CliError::Training(format!(
            "all {} variants failed",
            outcome.records.len()
        )));
    }
    Ok(SweepSummary {
        trained: outcome.trained,
        reused: outcome.reused,
        ok: outcome.variants.len(),
        failed: failed.len(),
    })
}

/// A checkpointed variant and the hash it was trained under.
pub struct LoadedVariant {
    pub variant: DetectorVariant,
    pub config_hash: String,
}

pub struct LoadedSweep {
    pub data_hash: String,
    /// Successful variants in grid order.
    pub ok: Vec<LoadedVariant>,
    pub failed: Vec<Exclusion>,
}

/// Loads every grid point's checkpoint, failing if any is missing or stale.
pub fn load_sweep(ctx: &Context) -> CliResult<LoadedSweep> {
    let data_hash = require_data(ctx)?;
    let ws = &ctx.workspace;
    let cfg = &ctx.config;
    let index_path = ws.sweep().join(SWEEP_INDEX);
    if !index_path.exists() {
        return Err(CliError::dependency("sweep", index_path));
    }
    let index = read_sweep_index(&ws.sweep())?;
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for point in cfg.sweep.points(&cfg.detector, &cfg.train) {
        let hash = point_hash(&point, &data_hash)?;
        let record = match index.get(&point.variant_id) {
            Some(r) if r.config_hash == hash => r,
            _ => return Err(CliError::dependency("sweep", ws.sweep().join(&point.variant_id))),
        };
        match record.status {
            SweepStatus::Failed => failed.push(Exclusion {
                variant_id: record.variant_id.clone(),
                reason: format!(
                    "training failed: {}",
                    record.error.as_deref().unwrap_or("unknown error")
                ),
            }),
            SweepStatus::Ok => {
                let (variant, _) = load_checkpoint(&ws.sweep().join(&record.checkpoint))?;
                ok.push(LoadedVariant {
                    variant,
                    config_hash: hash,
                });
            }
        }
    }
    Ok(LoadedSweep {
        data_hash,
        ok,
        failed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MarginFailure {
    variant_id: String,
    reason: String,
}

fn margin_hash(ctx: &Context, v: &LoadedVariant) -> CliResult<String> {
    Ok(config_hash(&serde_json::json!({
        "checkpoint": v.config_hash,
        "margins": ctx.config.margins,
        "seed": ctx.config.seed,
    }))?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginsSummary {
    pub computed: usize,
    pub reused: usize,
    pub failed: usize,
}

enum MarginOutcome {
    Computed,
    Reused,
    Failed,
}

pub fn cmd_margins(ctx: &Context) -> CliResult<MarginsSummary> {
    let sweep = load_sweep(ctx)?;
    let ws = &ctx.workspace;
    let cfg = &ctx.config;
    let (source, _) = read_domain(&ws.source())?;
    let train = source.split(Split::Train);
    let subset = margin_subset(train.len(), cfg.margins.sample_budget, cfg.seed);
    let patches: Vec<&LabeledPatch> = subset.iter().map(|&i| train[i]).collect();
    let run = |v: &LoadedVariant| -> CliResult<MarginOutcome> {
        let id = &v.variant.variant_id;
        let hash = margin_hash(ctx, v)?;
        let (report_path, error_path) = (ws.margin_report(id), ws.margin_error(id));
        if read_stamp(&ws.margin_stamp(id)).as_deref() == Some(hash.as_str())
            && (report_path.exists() || error_path.exists())
        {
            return Ok(MarginOutcome::Reused);
        }
        for p in [&report_path, &error_path] {
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        let outcome = match margin_report(
            id,
            &v.variant.model,
            &patches,
            &cfg.margins.metrics,
            cfg.margins.bounds,
            cfg.margins.batch_size,
        ) {
            Ok(report) => {
                write_json(&report_path, &report)?;
                MarginOutcome::Computed
            }
            Err(
                e @ (CoreError::InsufficientMargins { .. }
                | CoreError::DegenerateScale { .. }
                | CoreError::Computation(_)),
            ) => {
                log::warn!("margins of {id} unavailable: {e}");
                let failure = MarginFailure {
                    variant_id: id.clone(),
                    reason: e.to_string(),
                };
                write_json(&error_path, &failure)?;
                MarginOutcome::Failed
            }
            Err(e) => return Err(e.into()),
        };
        write_stamp(&ws.margin_stamp(id), &hash)?;
        Ok(outcome)
    };
    let outcomes: Vec<CliResult<MarginOutcome>> =
        ctx.pool()?.install(|| sweep.ok.par_iter().map(run).collect());
    let mut summary = MarginsSummary {
        computed: 0,
        reused: 0,
        failed: 0,
    };
    for o in outcomes {
        match o? {
            MarginOutcome::Computed => summary.computed += 1,
            MarginOutcome::Reused => summary.reused += 1,
            MarginOutcome::Failed => summary.failed += 1,
        }
    }
    Ok(summary)
}

type Reports = BTreeMap<String, Result<MarginReport, String>>;

/// Margin reports (or failure reasons) of every loaded variant.
pub fn load_margin_reports(ctx: &Context, sweep: &LoadedSweep) -> CliResult<Reports> {
    let ws = &ctx.workspace;
    let mut out = BTreeMap::new();
    for v in &sweep.ok {
        let id = &v.variant.variant_id;
        let stamp = ws.margin_stamp(id);
        if read_stamp(&stamp).as_deref() != Some(margin_hash(ctx, v)?.as_str()) {
            return Err(CliError::dependency("margins", stamp));
        }
        let entry = if ws.margin_report(id).exists() {
            Ok(serde_json::from_slice(&fs::read(ws.margin_report(id))?)?)
        } else if ws.margin_error(id).exists() {
            let f: MarginFailure = serde_json::from_slice(&fs::read(ws.margin_error(id))?)?;
            Err(f.reason)
        } else {
            return Err(CliError::dependency("margins", ws.margin_report(id)));
        };
        out.insert(id.clone(), entry);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GapRow {
    variant_id: String,
    target_id: String,
    source_acc: f64,
    target_acc: f64,
    gap: f64,
}

/// Gaps of every variant on every target, variant-major, cached on disk.
pub fn evaluate_gaps(ctx: &Context, sweep: &LoadedSweep) -> CliResult<Vec<GapRecord>> {
    let ws = &ctx.workspace;
    let pipelines = ctx.config.targets.resolve()?;
    let hashes: Vec<&str> = sweep.ok.iter().map(|v| v.config_hash.as_str()).collect();
    let hash = config_hash(&serde_json::json!({
        "data": sweep.data_hash,
        "variants": hashes,
        "targets": pipelines,
    }))?;
    if read_stamp(&ws.gaps_stamp()).as_deref() == Some(hash.as_str()) && ws.gaps().exists() {
        let mut reader = csv::Reader::from_path(ws.gaps())?;
        return reader
            .deserialize::<GapRow>()
            .map(|r| {
                let r = r?;
                Ok(GapRecord {
                    variant_id: r.variant_id,
                    target_pipeline_id: r.target_id,
                    source_accuracy: r.source_acc,
                    target_accuracy: r.target_acc,
                    gap: r.gap,
                })
            })
            .collect();
    }
    let pool = ctx.pool()?;
    let accuracies = |patches: &[&LabeledPatch]| -> CliResult<Vec<f64>> {
        pool.install(|| {
            sweep
                .ok
                .par_iter()
                .map(|v| evaluate_accuracy(&v.variant.model, patches))
                .collect::<forge_core::Result<Vec<f64>>>()
        })
        .map_err(CliError::from)
    };
    let (source, _) = read_domain(&ws.source())?;
    let source_acc = accuracies(&source.split(Split::Test))?;
    drop(source);
    let mut per_variant: Vec<Vec<GapRecord>> = vec![Vec::new(); sweep.ok.len()];
    for p in &pipelines {
        let dir = ws.target(&p.pipeline_id);
        if !dir.exists() {
            return Err(CliError::dependency("synth", dir));
        }
        let (target, _) = read_domain(&dir)?;
        let acc = accuracies(&target.split(Split::Test))?;
        for (i, v) in sweep.ok.iter().enumerate() {
            per_variant[i].push(gap_record(
                &v.variant.variant_id,
                &p.pipeline_id,
                source_acc[i],
                acc[i],
            ));
        }
    }
    let gaps: Vec<GapRecord> = per_variant.concat();
    fs::create_dir_all(ws.evaluation())?;
    let mut writer = csv::Writer::from_path(ws.gaps())?;
    for g in &gaps {
        writer.serialize(GapRow {
            variant_id: g.variant_id.clone(),
            target_id: g.target_pipeline_id.clone(),
            source_acc: g.source_accuracy,
            target_acc: g.target_accuracy,
            gap: g.gap,
        })?;
    }
    writer.flush()?;
    write_stamp(&ws.gaps_stamp(), &hash)?;
    Ok(gaps)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluateSummary {
    pub variants: usize,
    pub kept: usize,
    pub targets: usize,
    pub pairs: usize,
    pub excluded: usize,
}

fn undefined_as_none(r: forge_core::Result<f64>) -> Option<f64> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("{e}");
            None
        }
    }
}

pub fn cmd_evaluate(ctx: &Context) -> CliResult<EvaluateSummary> {
    let sweep = load_sweep(ctx)?;
    let reports = load_margin_reports(ctx, &sweep)?;
    let cfg = &ctx.config;
    let ws = &ctx.workspace;
    let gaps = evaluate_gaps(ctx, &sweep)?;
    let min = cfg.evaluation.min_source_accuracy;
    let kept: Vec<String> = sweep
        .ok
        .iter()
        .filter(|v| v.variant.source_test_accuracy >= min)
        .map(|v| v.variant.variant_id.clone())
        .collect();
    let kept_gaps: Vec<GapRecord> = gaps
        .iter()
        .filter(|g| kept.contains(&g.variant_id))
        .cloned()
        .collect();
    let (pairs, exclusions) = build_pairs(&kept, &reports, &kept_gaps, &cfg.margins.metrics)?;

    let mut writer = csv::Writer::from_path(ws.pairs())?;
    for p in &pairs {
        writer.serialize(p)?;
    }
    writer.flush()?;

    let mut metric = Vec::new();
    for m in &cfg.margins.metrics {
        let label = m.layers.label();
        let subset: Vec<PairRecord> = pairs
            .iter()
            .filter(|p| p.alpha == m.alpha && p.layer_set == label)
            .cloned()
            .collect();
        let per_variant = mean_gap_by_variant(&subset);
        let x: Vec<f64> = per_variant.iter().map(|v| v.metric_normalized).collect();
        let y: Vec<f64> = per_variant.iter().map(|v| v.mean_gap).collect();
        metric.push(MetricCurve {
            alpha: m.alpha,
            layer_set: label,
            variants: per_variant.len(),
            pairs: subset.len(),
            spearman_mean_gap: undefined_as_none(spearman(&x, &y)),
            spearman_pairs: undefined_as_none(forge_core::evaluation::rank_correlation(&subset)),
            curve: metric_curve(&subset, &cfg.evaluation.curve)?,
        });
    }
    let acc: Vec<f64> = gaps.iter().map(|g| g.source_accuracy).collect();
    let gap: Vec<f64> = gaps.iter().map(|g| g.gap).collect();
    let curves = CurvesFile {
        metric,
        overfitting: OverfittingCurve {
            variants: sweep.ok.len(),
            pairs: gaps.len(),
            spearman: undefined_as_none(spearman(&acc, &gap)),
            curve: overfitting_curve(&gaps, &cfg.evaluation.curve)?,
        },
    };
    write_json(&ws.curves(), &curves)?;
    write_json(&ws.exclusions(), &exclusions)?;
    Ok(EvaluateSummary {
        variants: sweep.ok.len(),
        kept: kept.len(),
        targets: cfg.targets.resolve()?.len(),
        pairs: pairs.len(),
        excluded: exclusions.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankSummary {
    pub selected: String,
    pub report: String,
}

pub fn cmd_rank(ctx: &Context) -> CliResult<RankSummary> {
    let sweep = load_sweep(ctx)?;
    let reports = load_margin_reports(ctx, &sweep)?;
    let cfg = &ctx.config;
    let ws = &ctx.workspace;
    let headline = &cfg.evaluation.headline;
    let label = headline.layers.label();
    let min = cfg.evaluation.min_source_accuracy;
    let mut excluded = sweep.failed.clone();
    let mut entries = Vec::new();
    for v in &sweep.ok {
        let id = &v.variant.variant_id;
        let acc = v.variant.source_test_accuracy;
        if acc < min {
            excluded.push(Exclusion {
                variant_id: id.clone(),
                reason: format!("source accuracy {acc:.4} below {min}"),
            });
            continue;
        }
        match &reports[id] {
            Ok(r) => entries.push(RankEntry {
                variant_id: id.clone(),
                metric: r.metric(headline.alpha, &label).ok_or_else(|| {
                    CliError::dependency("margins", ws.margin_report(id))
                })?,
                source_accuracy: acc,
            }),
            Err(reason) => excluded.push(Exclusion {
                variant_id: id.clone(),
                reason: reason.clone(),
            }),
        }
    }
    let order = rank_variants(&entries).map_err(|_| {
        CliError::Training(format!(
            "no variant with margins reached source accuracy {min}"
        ))
    })?;
    let ranking = RankingFile {
        alpha: headline.alpha,
        layer_set: label,
        min_source_accuracy: min,
        selected: entries[order[0]].variant_id.clone(),
        entries: order
            .iter()
            .enumerate()
            .map(|(rank, &i)| RankedVariant {
                rank: rank + 1,
                variant_id: entries[i].variant_id.clone(),
                metric: entries[i].metric,
                source_accuracy: entries[i].source_accuracy,
            })
            .collect(),
        excluded,
    };
    write_json(&ws.ranking(), &ranking)?;
    let curves: Option<CurvesFile> = match fs::read(ws.curves()) {
        Ok(bytes) => Some(serde_json::from_slice(&bytes)?),
        Err(_) => None,
    };
    let report = render_report(cfg, &ranking, sweep.ok.len() + sweep.failed.len(), curves.as_ref());
    crate::workspace::write_atomic(&ws.report(), report.as_bytes())?;
    Ok(RankSummary {
        selected: ranking.selected,
        report,
    })
}

fn file_label(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

pub fn cmd_plot(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    let ws = &ctx.workspace;
    let bytes = fs::read(ws.curves()).map_err(|_| CliError::dependency("evaluate", ws.curves()))?;
    let curves: CurvesFile = serde_json::from_slice(&bytes)?;
    fs::create_dir_all(ws.plots())?;
    let mut written = Vec::new();
    for m in &curves.metric {
        let path = ws.plots().join(format!(
            "gap_vs_m{}_{}.svg",
            m.alpha,
            file_label(&m.layer_set)
        ));
        let style = PlotStyle::new(
            &format!("Generalization gap vs M{} ({})", m.alpha, m.layer_set),
            &format!("normalized M{}", m.alpha),
            "generalization gap",
        );
        crate::workspace::write_atomic(&path, render_curve_svg(&m.curve, &style).as_bytes())?;
        written.push(path);
    }
    let path = ws.plots().join("gap_vs_source_accuracy.svg");
    let style = PlotStyle::new(
        "Generalization gap vs source accuracy",
        "source test accuracy",
        "generalization gap",
    );
    crate::workspace::write_atomic(
        &path,
        render_curve_svg(&curves.overfitting.curve, &style).as_bytes(),
    )?;
    written.push(path);
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub synth: SynthSummary,
    pub sweep: SweepSummary,
    pub margins: MarginsSummary,
    pub evaluate: EvaluateSummary,
    pub rank: RankSummary,
    pub plots: Vec<PathBuf>,
}

pub fn cmd_run_all(ctx: &Context) -> CliResult<RunSummary> {
    Ok(RunSummary {
        synth: cmd_synth(ctx)?,
        sweep: cmd_sweep(ctx)?,
        margins: cmd_margins(ctx)?,
        evaluate: cmd_evaluate(ctx)?,
        rank: cmd_rank(ctx)?,
        plots: cmd_plot(ctx)?,
    })
}
