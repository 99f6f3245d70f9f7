//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion.
//!
//! Criterion 8 runs the full acceptance sweep (`configs/acceptance.json`)
//! and takes tens of minutes on a single core.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use forge_cli::commands::load_sweep;
use forge_cli::report::CurvesFile;
use forge_cli::{cmd_evaluate, cmd_rank, cmd_run_all, Context, ExperimentConfig};
use forge_core::data::read_domain;
use forge_core::detector::{
    constraint_violation, patches_to_tensor, project_constrained_weights, FC3_INPUT,
};
use forge_core::evaluation::{generalization_gap, quantile_curve, quantile_label, CurveConfig};
use forge_core::margins::{
    first_order_margins, margin_metric, metric_from_components, LayerSet, LayerSummary,
    MarginSummary, MetricConfig,
};
use forge_core::pipelines::PipelineParams;
use forge_core::training::{read_history, save_checkpoint, train_detector, train_detector_with, ScriptedValidation};
use forge_core::{
    DetectorConfig, DetectorModel, Label, LabeledPatch, Normalization, Pooling, Split, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn say(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
    let _ = err.flush();
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn random_patches(n: usize, size: usize, seed: u64) -> Vec<LabeledPatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| LabeledPatch {
            pixels: (0..size * size).map(|_| rng.random::<f32>()).collect(),
            size,
            label: if rng.random_bool(0.5) { Label::Forged } else { Label::Authentic },
            coverage: 0.0,
            source_scene: "random".into(),
            x: i,
            y: 0,
        })
        .collect()
}

fn fc3_params(model: &mut DetectorModel) -> Vec<&mut Vec<f64>> {
    let names = model.network.param_names();
    names
        .into_iter()
        .zip(model.network.params_mut())
        .filter(|(n, _)| n.starts_with("fc3."))
        .map(|(_, p)| p)
        .collect()
}

fn small_detector(seed: u64) -> DetectorConfig {
    DetectorConfig {
        pooling: [Pooling::Max, Pooling::Average][seed as usize % 2],
        normalization: [Normalization::None, Normalization::BatchNorm][(seed as usize / 2) % 2],
        width_scale: 0.25,
        patch_size: 48,
        rng_seed: seed,
        ..DetectorConfig::default()
    }
}

/// Desk-scale data from the criterion 8 run, two epochs of training.
fn c1_constraint(acceptance: &Context) -> Outcome {
    let (source, _) = ok(read_domain(&acceptance.workspace.source()))?;
    let tc = TrainConfig {
        max_epochs: 2,
        ..acceptance.config.train.clone()
    };
    let start = Instant::now();
    let v = ok(train_detector("c1", &acceptance.config.detector, &tc, &source))?;
    let secs = start.elapsed().as_secs_f64();
    let k = acceptance.config.detector.constrained_kernel;
    let weights = v.model.constrained_weights().to_vec();
    let (center, sum) = constraint_violation(&weights, k);
    ensure!(center < 1e-5 && sum < 1e-5, "center {center:e}, sum {sum:e}");
    let mut again = weights.clone();
    project_constrained_weights(&mut again, k);
    let drift = weights
        .iter()
        .zip(&again)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure!(drift <= 1e-9, "re-projection moved a weight by {drift:e}");
    ensure!(secs < 120.0, "took {secs:.1} s");
    Ok(format!(
        "{} filters, max |w(0,0)+1| {center:.1e}, max |sum-1| {sum:.1e}, idempotent {drift:.1e}, {secs:.1} s",
        weights.len() / (k * k)
    ))
}

fn c2_margin_oracle() -> Outcome {
    let mut trials = 0;
    let mut worst = 0.0f64;
    for seed in 0..13u64 {
        let cfg = small_detector(seed);
        let mut model = ok(DetectorModel::build(&cfg))?;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for p in fc3_params(&mut model) {
            p.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        let patches = random_patches(8, 48, seed);
        let refs: Vec<_> = patches.iter().collect();
        let x = ok(patches_to_tensor(&refs))?;
        let labels: Vec<Label> = patches.iter().map(|p| p.label).collect();
        let out = ok(first_order_margins(&model, &x, &labels, &[FC3_INPUT]))?;
        let params = fc3_params(&mut model);
        let (w, b) = (params[0].clone(), params[1].clone());
        let acts = &out.activations[FC3_INPUT];
        for (i, &m) in out.raw[FC3_INPUT].iter().enumerate() {
            let a = acts.sample(i);
            let d = a.len();
            let y = labels[i].index();
            let o = 1 - y;
            let dw: Vec<f64> = (0..d).map(|j| w[y * d + j] - w[o * d + j]).collect();
            let gap = dw.iter().zip(a).map(|(u, v)| u * v).sum::<f64>() + b[y] - b[o];
            let expected = gap / dw.iter().map(|u| u * u).sum::<f64>().sqrt();
            worst = worst.max((m - expected).abs());
            ensure!(
                (m - expected).abs() <= 1e-6 && (m > 0.0) == (expected > 0.0),
                "seed {seed} sample {i}: {m} vs {expected}"
            );
            trials += 1;
        }
    }
    ensure!(trials >= 100, "only {trials} trials");
    Ok(format!("{trials} trials, max error {worst:.1e}"))
}

fn c3_scale_invariance() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..4u64 {
        let base = ok(DetectorModel::build(&small_detector(seed)))?;
        let patches = random_patches(16, 48, 50 + seed);
        let refs: Vec<_> = patches.iter().collect();
        let x = ok(patches_to_tensor(&refs))?;
        let labels: Vec<Label> = patches.iter().map(|p| p.label).collect();
        let before = ok(first_order_margins(&base, &x, &labels, &[FC3_INPUT]))?;
        let pred = ok(base.predict(&x))?;
        for c in [0.1, 10.0] {
            let mut scaled = base.clone();
            for p in fc3_params(&mut scaled) {
                p.iter_mut().for_each(|v| *v *= c);
            }
            let after = ok(first_order_margins(&scaled, &x, &labels, &[FC3_INPUT]))?;
            for (a, b) in before.raw[FC3_INPUT].iter().zip(&after.raw[FC3_INPUT]) {
                worst = worst.max((a - b).abs());
            }
            ensure!(ok(scaled.predict(&x))? == pred, "predictions changed at c = {c}");
        }
    }
    ensure!(worst <= 1e-6, "margin moved by {worst:e}");
    Ok(format!("4 models x c in {{0.1, 10}}, max margin change {worst:.1e}"))
}

fn c4_gap_identity(acceptance: &Context) -> Outcome {
    let (source, _) = ok(read_domain(&acceptance.workspace.source()))?;
    let test = source.split(Split::Test);
    let sweep = ok(load_sweep(acceptance))?;
    ensure!(!sweep.ok.is_empty(), "no trained variants");
    for v in &sweep.ok {
        let g = ok(generalization_gap(
            &v.variant.variant_id,
            &v.variant.model,
            &test,
            "source",
            &test,
        ))?;
        ensure!(g.gap == 0.0, "{}: gap {}", v.variant.variant_id, g.gap);
    }
    Ok(format!("{} trained variants, every gap exactly 0", sweep.ok.len()))
}

fn brute_force_quantiles(points: &[(f64, f64)], cfg: &CurveConfig) -> Vec<Vec<Option<f64>>> {
    let n = (1.0 / cfg.step).round() as usize;
    (0..=n)
        .map(|k| {
            let c = k as f64 * cfg.step;
            let mut ys: Vec<f64> = points
                .iter()
                .filter(|(x, _)| {
                    *x >= c - cfg.window / 2.0 - 1e-9 && *x <= c + cfg.window / 2.0 + 1e-9
                })
                .map(|p| p.1)
                .collect();
            ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
            cfg.quantiles
                .iter()
                .map(|&q| {
                    (ys.len() >= cfg.min_count).then(|| {
                        let pos = q * (ys.len() - 1) as f64;
                        let i = pos.floor() as usize;
                        let frac = pos - i as f64;
                        if frac == 0.0 {
                            ys[i]
                        } else {
                            ys[i] + frac * (ys[i + 1] - ys[i])
                        }
                    })
                })
                .collect()
        })
        .collect()
}

fn c5_quantile_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut cells = 0;
    for trial in 0..25 {
        let cfg = CurveConfig {
            min_count: 1 + trial % 5,
            ..CurveConfig::default()
        };
        let n = rng.random_range(5..150);
        let points: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random::<f64>(), rng.random_range(-0.2..0.5)))
            .collect();
        let curve = ok(quantile_curve(&points, &cfg))?;
        for (i, row) in brute_force_quantiles(&points, &cfg).iter().enumerate() {
            for (q, expected) in cfg.quantiles.iter().zip(row) {
                let got = curve.quantiles[&quantile_label(*q)][i];
                ensure!(got == *expected, "trial {trial} center {i} q {q}: {got:?} vs {expected:?}");
                cells += 1;
            }
        }
    }
    Ok(format!("25 random sets, {cells} window quantiles equal"))
}

fn c6_metric_exactness() -> Outcome {
    let m2_ones = metric_from_components(&[1.0; 5], 2.0);
    let m1 = metric_from_components(&[0.5, 2.0], 1.0);
    let m2 = metric_from_components(&[3.0, 4.0], 2.0);
    ensure!(m2_ones == 5.0 && m1 == 2.5 && m2 == 25.0, "{m2_ones} {m1} {m2}");
    let layer = |mu| LayerSummary {
        mu,
        positive: 5,
        excluded_negative: 0,
        excluded_sentinel: 0,
    };
    let summary = MarginSummary {
        layers: vec!["a".into(), "b".into()],
        per_layer: BTreeMap::from([
            ("a".to_string(), layer([1.0; 5])),
            ("b".to_string(), layer([0.0, 0.0, 0.5, 2.0, 3.0])),
        ]),
    };
    let metric = |alpha, layers| margin_metric(&summary, &MetricConfig { alpha, layers });
    let all2 = ok(metric(2.0, LayerSet::all()))?;
    let b1 = ok(metric(1.0, LayerSet::named(["b"])))?;
    ensure!(all2 == 5.0 + 0.25 + 4.0 + 9.0 && b1 == 5.5, "{all2} {b1}");
    Ok("M2(1,1,1,1,1) = 5, M1(0.5,2) = 2.5, M2(3,4) = 25, two-layer sums exact".into())
}

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.json"))
        .expect("fixture loads")
}

fn c7_pair_count() -> Outcome {
    let mut cfg = tiny_config();
    cfg.sweep.batch_sizes = vec![8, 16, 32];
    cfg.sweep.normalizations = vec![Normalization::None, Normalization::BatchNorm];
    cfg.train.max_epochs = 1;
    let pipeline = |id: &str, denoise, sharpen, q| PipelineParams {
        pipeline_id: id.into(),
        denoise_strength: denoise,
        sharpen_amount: sharpen,
        sharpen_radius: 1.0,
        jpeg_quality: Some(q),
    };
    cfg.targets.pipelines = Some(vec![
        pipeline("jpeg70", 0.0, 0.0, 70),
        pipeline("denoise-jpeg70", 0.02, 0.0, 70),
        pipeline("sharpen-jpeg70", 0.0, 1.5, 70),
        pipeline("jpeg90", 0.0, 0.0, 90),
    ]);
    ok(cfg.validate())?;
    let dir = ok(tempfile::tempdir())?;
    let ctx = Context::new(cfg, dir.path(), 1);
    let summary = ok(cmd_run_all(&ctx))?;
    let e = &summary.evaluate;
    ensure!(e.kept == 12 && e.targets == 4, "kept {} targets {}", e.kept, e.targets);
    let mut reader = ok(csv::Reader::from_path(ctx.workspace.pairs()))?;
    let headers = ok(reader.headers())?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (alpha, layers) = (col("alpha"), col("layer_set"));
    let mut per_metric: BTreeMap<(String, String), usize> = BTreeMap::new();
    for row in reader.records() {
        let row = ok(row)?;
        *per_metric
            .entry((row[alpha].to_string(), row[layers].to_string()))
            .or_default() += 1;
    }
    ensure!(
        !per_metric.is_empty() && per_metric.values().all(|&n| n == 48),
        "pairs per metric {per_metric:?}"
    );
    Ok(format!(
        "12 variants x 4 targets = 48 pairs for each of {} metrics",
        per_metric.len()
    ))
}

fn c8_study(ctx: &Context) -> Outcome {
    let start = Instant::now();
    let summary = ok(cmd_run_all(ctx))?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let report = summary.rank.report;
    say(&report);
    ensure!(report.contains("Expected:"), "report lacks the expectation statement");
    ensure!(report.contains("Spearman(normalized M2[all], mean gap)"), "report lacks the correlation");
    ensure!(report.contains("Gap quantiles vs"), "report lacks the curves");

    let pairs = ok(fs::read(ctx.workspace.pairs()))?;
    let ranking = ok(fs::read(ctx.workspace.ranking()))?;
    ok(fs::remove_dir_all(ctx.workspace.evaluation()))?;
    ok(fs::remove_file(ctx.workspace.ranking()))?;
    ok(cmd_evaluate(ctx))?;
    ok(cmd_rank(ctx))?;
    ensure!(ok(fs::read(ctx.workspace.pairs()))? == pairs, "pairs.csv changed on recomputation");
    ensure!(ok(fs::read(ctx.workspace.ranking()))? == ranking, "ranking.json changed on recomputation");

    let curves: CurvesFile = ok(serde_json::from_slice(&ok(fs::read(ctx.workspace.curves()))?))?;
    let headline = curves
        .metric
        .iter()
        .find(|m| m.alpha == 2.0 && m.layer_set == "all")
        .ok_or("no M2[all] curve")?;
    let rho = headline.spearman_mean_gap;
    let sign = match rho {
        Some(r) if r < 0.0 => "negative, as expected",
        Some(r) if r > 0.0 => "positive, opposite to the expectation",
        Some(_) => "zero",
        None => "undefined",
    };
    ensure!(minutes < 45.0, "took {minutes:.1} min");
    Ok(format!(
        "{} kept variants x {} targets, Spearman(M2, mean gap) = {} ({sign}, observation only), {minutes:.1} min",
        summary.evaluate.kept,
        summary.evaluate.targets,
        rho.map_or("undefined".into(), |r| format!("{r:+.4}")),
    ))
}

fn c9_determinism() -> Outcome {
    let a = ok(tempfile::tempdir())?;
    let b = ok(tempfile::tempdir())?;
    let ca = Context::new(tiny_config(), a.path(), 1);
    let cb = Context::new(tiny_config(), b.path(), 1);
    ok(cmd_run_all(&ca))?;
    ok(cmd_run_all(&cb))?;
    let mut files = vec![
        (ca.workspace.pairs(), cb.workspace.pairs()),
        (ca.workspace.ranking(), cb.workspace.ranking()),
    ];
    let sweep = ok(load_sweep(&ca))?;
    for v in &sweep.ok {
        let id = &v.variant.variant_id;
        files.push((ca.workspace.margin_report(id), cb.workspace.margin_report(id)));
    }
    for (x, y) in &files {
        let (bx, by) = (ok(fs::read(x))?, ok(fs::read(y))?);
        ensure!(bx == by, "{} differs", x.display());
    }
    Ok(format!("{} files byte-identical across two run-all invocations", files.len()))
}

fn c10_lr_trace() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut patches = Vec::new();
    let mut splits = forge_core::data::Splits::default();
    for (k, n) in [8, 4, 4].into_iter().enumerate() {
        for mut p in random_patches(n, 48, rng.random()) {
            p.label = if patches.len() % 2 == 0 { Label::Authentic } else { Label::Forged };
            let idx = patches.len();
            patches.push(p);
            [&mut splits.train, &mut splits.val, &mut splits.test][k].push(idx);
        }
    }
    let data = forge_core::DomainDataset::new(PipelineParams::identity("scripted"), patches, splits);
    let tc = TrainConfig {
        max_epochs: 12,
        batch_size: 4,
        early_stop_patience: 20,
        ..TrainConfig::default()
    };
    let v = ok(train_detector_with(
        "lr-trace",
        &small_detector(1),
        &tc,
        &data,
        &mut ScriptedValidation(vec![0.6, 0.7]),
    ))?;
    let dir = ok(tempfile::tempdir())?;
    ok(save_checkpoint(dir.path(), &v, "scripted", "scripted"))?;
    let mut reader = ok(csv::Reader::from_path(dir.path().join("history.csv")))?;
    let headers = ok(reader.headers())?.clone();
    let lr_col = headers.iter().position(|h| h == "lr").ok_or("no lr column")?;
    let lrs: Vec<f64> = reader
        .records()
        .map(|r| r.map_err(|e| e.to_string())?[lr_col].parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    ensure!(ok(read_history(&dir.path().join("history.csv")))?.len() == lrs.len(), "history mismatch");
    // Improvement at epoch 2, stagnation in epochs 3-6, first reduced rate in epoch 7.
    let lr0 = tc.lr_init;
    ensure!(lrs[..6].iter().all(|&l| l == lr0), "early rates {lrs:?}");
    ensure!(lrs[6] == lr0 * 0.1, "epoch 7 rate {} (all: {lrs:?})", lrs[6]);
    ensure!(lrs[10] == lr0 * 0.1 * 0.1, "epoch 11 rate {} (all: {lrs:?})", lrs[10]);
    Ok(format!("lr {lr0:e} through epoch 6, {:e} from epoch 7, {:e} from epoch 11", lrs[6], lrs[10]))
}

#[test]
fn acceptance_criteria() {
    let mut config = ExperimentConfig::load(&repo_root().join("configs/acceptance.json"))
        .expect("acceptance config loads");
    config.output_root = None;
    let out = tempfile::tempdir().unwrap();
    let acceptance = Context::new(config, out.path(), 1);

    let mut results: BTreeMap<usize, (&str, Outcome)> = BTreeMap::new();
    let mut run = |n: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|_| Err("panicked".into()));
        say(&format!("[criterion {n} finished: {}]", if r.is_ok() { "ok" } else { "failed" }));
        results.insert(n, (name, r));
    };
    run(8, "desk-scale directional study", &|| c8_study(&acceptance));
    run(1, "constraint suite", &|| c1_constraint(&acceptance));
    run(2, "margin oracle", &c2_margin_oracle);
    run(3, "scale invariance", &c3_scale_invariance);
    run(4, "gap identity", &|| c4_gap_identity(&acceptance));
    run(5, "quantile-curve oracle", &c5_quantile_oracle);
    run(6, "metric exactness", &c6_metric_exactness);
    run(7, "pair-count identity", &c7_pair_count);
    run(9, "determinism", &c9_determinism);
    run(10, "lr-schedule trace", &c10_lr_trace);

    let mut failed = Vec::new();
    for (n, (name, r)) in &results {
        match r {
            Ok(detail) => say(&format!("PASS criterion {n} ({name}): {detail}")),
            Err(why) => {
                say(&format!("FAIL criterion {n} ({name}): {why}"));
                failed.push(*n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
