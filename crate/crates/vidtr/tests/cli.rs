//! End-to-end checks of the `vidtr` binary: exit codes, artifact layout,
//! and agreement between command-line output and direct library calls.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;
use vidtr::attention::Factorization;
use vidtr::harness::{evaluate, load_cache, CombineMode, ViewSpec};
use vidtr::model::{Model, ModelConfig};
use vidtr::pool::PoolKind;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vidtr"));
    cmd.env_remove("VIDTR_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        stderr(out)
    );
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", stderr(out));
}

/// One shared 40-clip moving_dot cache plus a short training run; built
/// once, reused by the read-only tests below.
struct Fixture {
    _keep: TempDir,
    data: PathBuf,
    run: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        let out = run(&[
            "gen-data",
            "--task",
            "moving_dot",
            "--seed",
            "7",
            "--n",
            "40",
            "--out",
            data.to_str().unwrap(),
        ]);
        assert_ok(&out);

        let config = dir.path().join("run.cfg");
        fs::write(&config, "preset=toy\nepochs=2\nmilestones=\nlr=0.01\nseed=11\n").unwrap();
        let run_dir = dir.path().join("run");
        let out = run(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            run_dir.to_str().unwrap(),
        ]);
        assert_ok(&out);
        assert!(stdout(&out).contains("final test accuracy"));
        Fixture { _keep: dir, data, run: run_dir }
    })
}

fn ckpt(fix: &Fixture) -> PathBuf {
    fix.run.join("model.ckpt")
}

#[test]
fn gen_data_cache_is_deterministic_and_reloadable() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for out in [&a, &b] {
        let res = run(&[
            "gen-data", "--task", "moving_dot", "--seed", "7", "--n", "40", "--out",
            out.to_str().unwrap(),
        ]);
        assert_ok(&res);
        assert!(stdout(&res).contains("32 train / 8 test"));
    }
    for file in ["manifest.txt", "train.bin", "test.bin"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file} differs between identical gen-data runs"
        );
    }

    let res = run(&[
        "gen-data", "--task", "moving_dot", "--seed", "8", "--n", "40", "--out",
        c.to_str().unwrap(),
    ]);
    assert_ok(&res);
    assert_ne!(
        fs::read(a.join("train.bin")).unwrap(),
        fs::read(c.join("train.bin")).unwrap(),
        "different seeds must change the data"
    );

    let (train, test) = load_cache(&a).unwrap();
    assert_eq!((train.len(), test.len()), (32, 8));
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("task=moving_dot"));
    assert!(manifest.contains("seed=7"));
}

#[test]
fn gen_data_env_seed_is_the_fallback() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("env");
    let res = bin()
        .env("VIDTR_SEED", "5")
        .args(["gen-data", "--task", "moving_dot", "--n", "20", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_ok(&res);
    let manifest = fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed=5"), "{manifest}");

    let res = bin()
        .env("VIDTR_SEED", "zebra")
        .args(["gen-data", "--task", "moving_dot", "--n", "20", "--out"])
        .arg(dir.path().join("bad"))
        .output()
        .unwrap();
    assert_exit(&res, 2);
    assert!(stderr(&res).contains("VIDTR_SEED"));
}

#[test]
fn gen_data_unknown_task_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let res = run(&[
        "gen-data", "--task", "bouncing_ball", "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_exit(&res, 2);
    assert!(stderr(&res).starts_with("error:"), "{}", stderr(&res));
}

#[test]
fn train_writes_artifacts_and_echoes_every_accepted_key() {
    let fix = fixture();
    for file in ["config.txt", "metrics.csv", "model.ckpt"] {
        assert!(fix.run.join(file).exists(), "missing {file}");
    }
    let echoed = fs::read_to_string(fix.run.join("config.txt")).unwrap();
    assert!(echoed.starts_with("# resolved run configuration\n"));
    for key in ["factorization=separable", "epochs=2", "lr=0.01", "seed=11", "milestones=\n"] {
        assert!(echoed.contains(key), "config.txt missing `{key}`:\n{echoed}");
    }
    let metrics = fs::read_to_string(fix.run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,split,loss,accuracy\n"), "{metrics}");
    // 2 epochs x (train + test) rows after the header.
    assert_eq!(metrics.lines().count(), 1 + 4);
}

#[test]
fn train_set_flag_overrides_file_values() {
    let fix = fixture();
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("run.cfg");
    fs::write(&config, "preset=toy\nepochs=2\nmilestones=\nlr=0.01\nseed=11\n").unwrap();
    let out_dir = dir.path().join("run");
    let res = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        fix.data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--set",
        "epochs=1",
        "--set",
        "lr=0.02",
    ]);
    assert_ok(&res);
    let echoed = fs::read_to_string(out_dir.join("config.txt")).unwrap();
    assert!(echoed.contains("epochs=1"), "{echoed}");
    assert!(echoed.contains("lr=0.02"), "{echoed}");
}

#[test]
fn train_without_readable_config_is_usage_error() {
    let fix = fixture();
    let dir = TempDir::new().unwrap();
    let res = run(&[
        "train",
        "--config",
        dir.path().join("absent.cfg").to_str().unwrap(),
        "--data",
        fix.data.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_exit(&res, 2);
    assert!(stderr(&res).contains("cannot read config"), "{}", stderr(&res));

    // Missing the flag entirely is a usage error too (clap's own exit 2).
    let res = run(&["train", "--data", "x", "--out", "y"]);
    assert_exit(&res, 2);
}

#[test]
fn eval_single_view_equals_direct_inference() {
    let fix = fixture();
    let res = run(&[
        "eval",
        "--checkpoint",
        ckpt(fix).to_str().unwrap(),
        "--data",
        fix.data.to_str().unwrap(),
    ]);
    assert_ok(&res);
    let text = stdout(&res);

    // A freshly loaded checkpoint must score exactly like the model the
    // training run ended with, so the printed numbers are reproducible
    // from the library alone.
    let model = Model::load(ckpt(fix)).unwrap();
    let (_, test) = load_cache(&fix.data).unwrap();
    let report = evaluate(
        &model,
        &test,
        ViewSpec { temporal: 1, spatial: 1 },
        CombineMode::Probability,
    )
    .unwrap();
    assert!(
        text.contains(&format!("accuracy {:.4}", report.accuracy)),
        "cli output {text} vs direct accuracy {:.4}",
        report.accuracy
    );
    assert!(text.contains(&format!("mean loss {:.6}", report.mean_loss)));
    for (class, (c, t)) in report
        .per_class_correct
        .iter()
        .zip(&report.per_class_total)
        .enumerate()
    {
        assert!(text.contains(&format!("class {class}: {c}/{t}")), "{text}");
    }
}

#[test]
fn eval_multi_view_equals_harness_call() {
    let fix = fixture();
    let res = run(&[
        "eval",
        "--checkpoint",
        ckpt(fix).to_str().unwrap(),
        "--data",
        fix.data.to_str().unwrap(),
        "--views",
        "2x3",
        "--combine",
        "logits",
        "--split",
        "train",
    ]);
    assert_ok(&res);
    let model = Model::load(ckpt(fix)).unwrap();
    let (train, _) = load_cache(&fix.data).unwrap();
    let report = evaluate(
        &model,
        &train,
        ViewSpec { temporal: 2, spatial: 3 },
        CombineMode::Logit,
    )
    .unwrap();
    assert!(stdout(&res).contains(&format!("accuracy {:.4}", report.accuracy)));
}

#[test]
fn eval_rejects_bad_views_and_checkpoint_path() {
    let fix = fixture();
    let res = run(&[
        "eval",
        "--checkpoint",
        ckpt(fix).to_str().unwrap(),
        "--data",
        fix.data.to_str().unwrap(),
        "--views",
        "2x5",
    ]);
    assert_exit(&res, 2);

    let res = run(&[
        "eval", "--checkpoint", "/nonexistent/model.ckpt", "--data",
        fix.data.to_str().unwrap(),
    ]);
    assert_exit(&res, 1);
}

#[test]
fn rollout_writes_heatmaps_and_mask() {
    let fix = fixture();
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("roll");
    let res = run(&[
        "rollout",
        "--checkpoint",
        ckpt(fix).to_str().unwrap(),
        "--data",
        fix.data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&res);
    // Toy geometry: 8 temporal blocks of 32x32 frames in 8x8 patches,
    // so 16 cells per frame and ceil(0.30 * 128) = 39 highlights.
    assert!(stdout(&res).contains("39 of 128 cells highlighted"), "{}", stdout(&res));
    for f in 0..8 {
        let frame = out_dir.join(format!("frame_{f:04}.pgm"));
        let bytes = fs::read(&frame).unwrap_or_else(|_| panic!("missing {}", frame.display()));
        assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
        assert_eq!(bytes.len(), "P5\n32 32\n255\n".len() + 32 * 32);
    }
    let mask = fs::read_to_string(out_dir.join("mask.csv")).unwrap();
    assert!(mask.starts_with("t,patch,value\n"));
    assert_eq!(mask.lines().count(), 1 + 8 * 16);

    let res = run(&[
        "rollout",
        "--checkpoint",
        ckpt(fix).to_str().unwrap(),
        "--data",
        fix.data.to_str().unwrap(),
        "--out",
        dir.path().join("oob").to_str().unwrap(),
        "--clip-index",
        "9999",
    ]);
    assert_exit(&res, 1);
    assert!(stderr(&res).contains("out of range"));
}

#[test]
fn rollout_on_compact_checkpoint_is_a_clear_error() {
    let fix = fixture();
    let dir = TempDir::new().unwrap();
    let mut cfg = ModelConfig::toy();
    cfg.factorization = Factorization::Separable;
    cfg.pool = PoolKind::TopKStd;
    cfg.downsample_layers = vec![0];
    cfg.downsample_taus = vec![4];
    let model = Model::build(cfg, 1).unwrap();
    let compact = dir.path().join("compact.ckpt");
    model.save(&compact).unwrap();

    let res = run(&[
        "rollout",
        "--checkpoint",
        compact.to_str().unwrap(),
        "--data",
        fix.data.to_str().unwrap(),
        "--out",
        dir.path().join("roll").to_str().unwrap(),
    ]);
    assert_exit(&res, 1);
    assert!(stderr(&res).contains("unsupported"), "{}", stderr(&res));
}

#[test]
fn cost_reports_single_pair_and_files() {
    // Single config: absolute numbers, reduction column is "-".
    let res = run(&["cost", "--config", "vidtr-s"]);
    assert_ok(&res);
    let text = stdout(&res);
    assert!(text.contains("vidtr-s"));
    assert!(text.contains('-'), "{text}");

    // Identical pair: zero deltas.
    let res = run(&["cost", "--config", "vidtr-s", "--config", "vidtr-s"]);
    assert_ok(&res);
    assert!(stdout(&res).contains("0.00%"), "{}", stdout(&res));

    // Standard vs compact, with files.
    let dir = TempDir::new().unwrap();
    let res = run(&[
        "cost",
        "--config",
        "vidtr-s",
        "--config",
        "c-vidtr-s",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_ok(&res);
    let csv = fs::read_to_string(dir.path().join("cost.csv")).unwrap();
    assert!(dir.path().join("cost.txt").exists());
    let last = csv.lines().last().unwrap();
    assert!(last.starts_with("c-vidtr-s,"), "{csv}");
    let reduction: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    assert!(
        (40.0..=65.0).contains(&reduction),
        "compact reduction {reduction}% out of range"
    );

    let res = run(&["cost", "--config", "vidtr-xl"]);
    assert_exit(&res, 2);
}

#[test]
fn cost_accepts_config_files_as_inputs() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("wide-toy.cfg");
    fs::write(&path, "preset=toy\nembed_dim=64\n").unwrap();
    let res = run(&["cost", "--config", "toy", "--config", path.to_str().unwrap()]);
    assert_ok(&res);
    assert!(stdout(&res).contains("wide-toy"), "{}", stdout(&res));
}
