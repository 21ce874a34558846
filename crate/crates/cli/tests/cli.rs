use std::path::Path;
use std::process::{Command, Output};

use vdd_cli::config::RunConfig;
use vdd_cli::pipeline::sha256_hex;

fn vdd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vdd")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vdd(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// 256×256 scene, tiny network, short training.
fn small_config(out: &Path) -> RunConfig {
    let mut c = RunConfig::demo();
    c.output_dir = out.to_path_buf();
    c.synth.width = 256;
    c.synth.height = 256;
    c.train.base = 4;
    c.train.iterations = 6;
    c.train.validation_every = 3;
    c.train.val_limit = 4;
    c
}

#[test]
fn pipeline_is_deterministic_and_manifest_complete() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        // both runs write to the same directory so their configs hash alike
        let cfg = small_config(&dir.path().join("out"));
        std::fs::write(dir.path().join("run.cfg"), cfg.to_text()).unwrap();
        let stdout = ok(&["pipeline", "--config", p(&dir.path().join("run.cfg"))]);
        assert!(stdout.starts_with("class,recall,precision,f1,support\n"));
        let out = dir.path().join(run);
        std::fs::rename(dir.path().join("out"), &out).unwrap();
        outputs.push(out);
    }
    for f in ["metrics.csv", "labels.vddr", "history.csv", "model.vddw", "manifest.txt"] {
        assert_eq!(std::fs::read(outputs[0].join(f)).unwrap(), std::fs::read(outputs[1].join(f)).unwrap(), "{f}");
    }
    let manifest = std::fs::read_to_string(outputs[0].join("manifest.txt")).unwrap();
    let cfg_text = std::fs::read_to_string(outputs[0].join("config.txt")).unwrap();
    assert!(manifest.contains(&format!("config.sha256 = {}", sha256_hex(cfg_text.as_bytes()))));
    assert!(manifest.contains("version.vdd-core = "));
    for name in ["disease_map.png", "labels.vddr", "metrics.csv", "history.csv", "model.vddw", "registration.txt"] {
        let hash = sha256_hex(&std::fs::read(outputs[0].join(name)).unwrap());
        assert!(manifest.contains(&format!("artifact.{name} = {hash}")), "{name}");
    }
}

#[test]
fn missing_dsm_without_synth_names_depthmap() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    ok(&["synth", "--out-dir", p(&scene), "--set", "synth.width=256", "--set", "synth.height=256"]);
    let cfg = format!(
        "input.rgb = {}\ninput.moving = {}\noutput.dir = {}\n",
        scene.join("rgb.vddr").display(),
        scene.join("moving.vddr").display(),
        dir.path().join("out").display()
    );
    std::fs::write(dir.path().join("run.cfg"), cfg).unwrap();
    let out = vdd(&["pipeline", "--config", p(&dir.path().join("run.cfg"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`depthmap`"), "{err}");
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "train.lr = 0.1\ntrain.momentum = 0.9\n").unwrap();
    let out = vdd(&["pipeline", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.momentum"));
    assert_eq!(vdd(&["pipeline", "--set", "train.optimizer=rmsprop"]).status.code(), Some(2));
    assert_eq!(vdd(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn inspect_rasters_checkpoints_and_junk() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("s");
    ok(&["synth", "--out-dir", p(&scene), "--set", "synth.width=256", "--set", "synth.height=256"]);
    let s = ok(&["inspect", p(&scene.join("rgb.vddr"))]);
    assert!(s.starts_with("256×256×3, roles R,G,B\n"), "{s}");
    let s = ok(&["inspect", p(&scene.join("moving.vddr"))]);
    assert!(s.starts_with("256×256×3, roles R,G,NIR\n"), "{s}");
    let junk = dir.path().join("junk.vddr");
    std::fs::write(&junk, b"NOPE and more bytes").unwrap();
    let out = vdd(&["inspect", p(&junk)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    let scene = d("scene");
    ok(&["synth", "--out-dir", p(&scene), "--seed", "3", "--set", "synth.width=256", "--set", "synth.height=256"]);
    let s = ok(&[
        "register",
        "--reference",
        p(&scene.join("rgb.vddr")),
        "--moving",
        p(&scene.join("moving.vddr")),
        "--out",
        p(&d("aligned.vddr")),
        "--report",
        p(&d("h.txt")),
    ]);
    assert!(s.contains("final RMSE"));
    assert!(std::fs::read_to_string(d("h.txt")).unwrap().contains("rmse "));
    ok(&["depthmap", "--dsm", p(&scene.join("dsm.vddr")), "--out", p(&d("depth.vddr")), "--png", p(&d("depth.png"))]);
    let s = ok(&[
        "dataset",
        "--rgb",
        p(&scene.join("rgb.vddr")),
        "--nir",
        p(&d("aligned.vddr")),
        "--depth",
        p(&d("depth.vddr")),
        "--labels",
        p(&scene.join("labels.vddr")),
        "--out",
        p(&d("data")),
        "--patch",
        "64",
        "--augment",
        "false",
    ]);
    assert!(s.starts_with("49 samples"), "{s}"); // stride 32: 7 × 7 patches
    ok(&[
        "train", "--data", p(&d("data")), "--spec", "baseline5", "--stages", "2", "--base", "4", "--iters", "4", "--batch",
        "2", "--out", p(&d("model.vddw")), "--history", p(&d("history.csv")),
    ]);
    let hist = std::fs::read_to_string(d("history.csv")).unwrap();
    assert_eq!(hist.lines().next(), Some("iteration,train_loss,val_loss,val_acc"));
    let s = ok(&["inspect", p(&d("model.vddw"))]);
    assert!(s.contains("meta.arch") && s.contains("head.weight"), "{s}");
    ok(&[
        "segment",
        "--model",
        p(&d("model.vddw")),
        "--rgb",
        p(&scene.join("rgb.vddr")),
        "--nir",
        p(&d("aligned.vddr")),
        "--depth",
        p(&d("depth.vddr")),
        "--out-labels",
        p(&d("seg.vddr")),
        "--out-png",
        p(&d("seg.png")),
    ]);
    let csv = ok(&["evaluate", "--pred", p(&d("seg.vddr")), "--truth", p(&scene.join("labels.vddr")), "--window", "16"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[5].starts_with("global,"));
    for png in ["depth.png", "seg.png"] {
        assert!(std::fs::read(d(png)).unwrap().starts_with(b"\x89PNG"));
    }
}
