use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use forge_cli::{cmd_margins, cmd_run_all, cmd_sweep, execute, CliError, Context, ExperimentConfig};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.json")
}

fn tiny_ctx(root: &Path) -> Context {
    Context::new(ExperimentConfig::load(&fixture()).unwrap(), root, 1)
}

fn forge(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_forge"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn stages_refuse_to_run_without_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = tiny_ctx(dir.path());
    assert!(matches!(
        cmd_margins(&ctx),
        Err(CliError::Dependency { command: "synth", .. })
    ));
    forge_cli::cmd_synth(&ctx).unwrap();
    let err = cmd_margins(&ctx).unwrap_err();
    assert!(matches!(err, CliError::Dependency { command: "sweep", .. }), "{err}");
    assert_eq!(err.exit_code(), 5);

    let config = fixture();
    let out = forge(&["rank", "--config", config.to_str().unwrap()], &dir.path().join("empty"));
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("forge synth"));
}

#[test]
fn rerunning_reuses_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = tiny_ctx(dir.path());
    let first = cmd_run_all(&ctx).unwrap();
    assert!(!first.synth.reused);
    assert_eq!(first.sweep.trained, 2);
    let pairs = fs::read(ctx.workspace.pairs()).unwrap();

    let second = cmd_run_all(&ctx).unwrap();
    assert!(second.synth.reused);
    assert_eq!((second.sweep.trained, second.sweep.reused), (0, 2));
    assert_eq!((second.margins.computed, second.margins.reused), (0, 2));
    assert_eq!(fs::read(ctx.workspace.pairs()).unwrap(), pairs);
    assert!(ctx.workspace.report().exists());
    assert!(ctx.workspace.plots().join("gap_vs_source_accuracy.svg").exists());
}

#[test]
fn changed_training_config_retrains_only_the_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = tiny_ctx(dir.path());
    cmd_run_all(&ctx).unwrap();
    let mut config = ctx.config.clone();
    config.train.max_epochs = 1;
    let changed = Context::new(config, dir.path(), 1);
    // Stale checkpoints are a missing dependency until the sweep reruns.
    assert!(matches!(cmd_margins(&changed), Err(CliError::Dependency { command: "sweep", .. })));
    let s = cmd_sweep(&changed).unwrap();
    assert_eq!(s.trained, 2);
    assert_eq!(cmd_margins(&changed).unwrap().computed, 2);
}

#[test]
fn a_held_lock_blocks_a_second_writer() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = tiny_ctx(dir.path());
    let lock = ctx.workspace.lock().unwrap();
    let err = execute(forge_cli::Command::Synth, &ctx).unwrap_err();
    assert_eq!(err.exit_code(), 6);

    let config = fixture();
    let out = forge(&["synth", "--config", config.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(6));
    drop(lock);
    assert!(execute(forge_cli::Command::Synth, &ctx).is_ok());
}

#[test]
fn bad_configs_exit_with_the_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{ "seed": 1, "unknown_section": {} }"#).unwrap();
    let out = forge(&["synth", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let mut config = ExperimentConfig::load(&fixture()).unwrap();
    config.detector.patch_size = 32;
    assert!(matches!(config.validate(), Err(CliError::Config(_))));

    let out = forge(&["synth"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_flag_changes_the_data_hash() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture();
    let cfg = config.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(forge(&["synth", "--config", cfg], &a).status.success());
    assert!(forge(&["synth", "--config", cfg, "--seed", "7"], &b).status.success());
    let stamp = |root: &Path| fs::read_to_string(root.join("data/stamp.json")).unwrap();
    assert_ne!(stamp(&a), stamp(&b));
}
