use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use anylevel::diffusion::ModelCheckpoint;
use anylevel::layout::format::write_layout;
use anylevel::layout::{BinaryMask, Layout, Region};
use anylevel::scene::read_manifest;

fn anylevel(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_anylevel"));
    cmd.current_dir(dir).args(args).env("RUST_LOG", "warn");
    for (k, _) in std::env::vars() {
        if k.starts_with("ANYLEVEL_") {
            cmd.env_remove(k);
        }
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn datagen_small(dir: &Path, out: &str, seed: &str) {
    ok(&anylevel(dir, &["datagen", "--canvas-exponent", "3", "--count", "40", "--seed", seed, "--out", out], &[]));
}

fn train_small(dir: &Path, data: &str, out: &str, steps: &str) -> Output {
    anylevel(
        dir,
        &[
            "train", "--data", data, "--out", out, "--steps", steps, "--channels", "4,4,4", "--diffusion-steps", "20",
            "--embed-dim", "8", "--batch-size", "4", "--validation-scenes", "4", "--validate-every", "2",
            "--checkpoint-every", "3", "--seed", "5",
        ],
        &[],
    )
}

#[test]
fn help_lists_every_flag_with_its_default() {
    let dir = tempfile::tempdir().unwrap();
    let expected: &[(&str, &[(&str, Option<&str>)])] = &[
        (
            "datagen",
            &[
                ("--config", None),
                ("--spec", None),
                ("--canvas-exponent", Some("5")),
                ("--count", Some("5000")),
                ("--seed", Some("0")),
                ("--shard-size", Some("1000")),
                ("--layouts", Some("0")),
                ("--out", None),
            ],
        ),
        (
            "train",
            &[
                ("--data", None),
                ("--seed", Some("0")),
                ("--steps", Some("15000")),
                ("--batch-size", Some("16")),
                ("--learning-rate", Some("0.001")),
                ("--level0-dropout-prob", Some("0.1")),
                ("--text-only-fraction", Some("0.1")),
                ("--zero-level-weight", Some("1")),
                ("--ema-decay", Some("0.999")),
                ("--diffusion-steps", Some("1000")),
                ("--embed-dim", Some("16")),
                ("--channels", Some("16,32,32")),
                ("--attention", Some("true")),
                ("--validation-scenes", Some("64")),
                ("--validate-every", Some("100")),
                ("--checkpoint-every", Some("1000")),
            ],
        ),
        (
            "sample",
            &[
                ("--checkpoint", None),
                ("--layout", None),
                ("--level", None),
                ("--scale", Some("3")),
                ("--drop-levels", None),
                ("--steps", Some("50")),
                ("--sampler", Some("ddim")),
                ("--seed", Some("0")),
                ("--samples", Some("1")),
            ],
        ),
        (
            "eval",
            &[
                ("--levels", None),
                ("--seeds", None),
                ("--seed", Some("0")),
                ("--num-seeds", Some("2")),
                ("--scale", Some("3")),
                ("--steps", Some("50")),
                ("--min-gain", Some("0.05")),
                ("--threads", Some("0")),
            ],
        ),
        (
            "serve",
            &[
                ("--host", Some("127.0.0.1")),
                ("--port", Some("8080")),
                ("--workers", Some("2")),
                ("--ttl", Some("3600")),
                ("--queue-capacity", Some("16")),
                ("--default-steps", Some("50")),
                ("--seed", None),
            ],
        ),
    ];
    for (sub, flags) in expected {
        let help = ok(&anylevel(dir.path(), &[sub, "--help"], &[]));
        // Flag lines are followed by their description and bracketed defaults.
        for (flag, default) in *flags {
            let start = help.find(&format!("{flag} <")).unwrap_or_else(|| panic!("{sub}: {flag} missing from\n{help}"));
            let entry = &help[start..];
            let entry = &entry[..entry[2..].find("\n      --").map_or(entry.len(), |e| e + 2)];
            if let Some(d) = default {
                assert!(entry.contains(&format!("[default: {d}]")), "{sub} {flag}: {entry}");
            }
        }
    }
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&anylevel(dir.path(), &["datagen", "--count", "0", "--out", "d"], &[])), 1);
    assert_eq!(code(&anylevel(dir.path(), &["datagen", "--spec", "missing.toml", "--out", "d"], &[])), 1);
    assert_eq!(code(&anylevel(dir.path(), &["datagen", "--no-such-flag"], &[])), 1);
    assert_eq!(code(&anylevel(dir.path(), &["frobnicate"], &[])), 1);
    assert_eq!(code(&anylevel(dir.path(), &["train", "--data", "absent", "--out", "t"], &[])), 1);
    assert_eq!(code(&anylevel(dir.path(), &["eval", "--checkpoint", "absent.ckpt", "--layouts", ".", "--out", "e"], &[])), 1);
    assert!(!dir.path().join("t").exists());
}

#[test]
fn datagen_is_deterministic_and_writes_only_under_out() {
    let dir = tempfile::tempdir().unwrap();
    let a = ok(&anylevel(dir.path(), &["datagen", "--count", "100", "--seed", "4", "--out", "a"], &[]));
    let b = ok(&anylevel(dir.path(), &["datagen", "--count", "100", "--seed", "4", "--out", "b"], &[]));
    let checksum = |s: &str| s.lines().find(|l| l.starts_with("manifest checksum")).unwrap().to_string();
    assert_eq!(checksum(&a), checksum(&b));
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 2, "{names:?}");
}

#[test]
fn config_file_env_and_flags_layer_in_order() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("gen.toml"), "count = 7\nseed = 2\ncanvas_exponent = 3\n").unwrap();
    let count = |name: &str| read_manifest(&dir.path().join(name)).unwrap().count;
    let seed = |name: &str| read_manifest(&dir.path().join(name)).unwrap().seed;

    ok(&anylevel(dir.path(), &["datagen", "--config", "gen.toml", "--out", "file"], &[]));
    assert_eq!((count("file"), seed("file")), (7, 2));

    ok(&anylevel(dir.path(), &["datagen", "--config", "gen.toml", "--out", "env"], &[("ANYLEVEL_COUNT", "9")]));
    assert_eq!((count("env"), seed("env")), (9, 2));

    ok(&anylevel(dir.path(), &["datagen", "--config", "gen.toml", "--count", "11", "--out", "flag"], &[("ANYLEVEL_COUNT", "9")]));
    assert_eq!((count("flag"), seed("flag")), (11, 2));

    let echoed = fs::read_to_string(dir.path().join("flag/datagen_config.toml")).unwrap();
    assert!(echoed.contains("count = 11") && echoed.contains("seed = 2"), "{echoed}");

    fs::write(dir.path().join("bad.toml"), "cuont = 7\n").unwrap();
    assert_eq!(code(&anylevel(dir.path(), &["datagen", "--config", "bad.toml", "--out", "bad"], &[])), 1);
}

#[test]
fn train_is_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    datagen_small(dir.path(), "data", "1");
    let first = ok(&train_small(dir.path(), "data", "t1", "6"));
    assert!(first.contains("final loss") && first.contains("t1/model.ckpt"), "{first}");
    ok(&train_small(dir.path(), "data", "t2", "6"));
    let a = fs::read(dir.path().join("t1/model.ckpt")).unwrap();
    let b = fs::read(dir.path().join("t2/model.ckpt")).unwrap();
    assert_eq!(a, b);
    let ckpt = ModelCheckpoint::from_bytes(&a).unwrap();
    assert_eq!(ckpt.header.step, 6);
    let curve = fs::read_to_string(dir.path().join("t1/loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 7);
}

#[test]
fn sample_and_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    datagen_small(d, "data", "1");
    // Zero steps keeps the zero-initialized output head, so the network
    // ignores its conditioning entirely.
    ok(&train_small(d, "data", "untrained", "0"));
    ok(&train_small(d, "data", "trained", "3"));

    let left = Layout::new(3, vec![Region::new(BinaryMask::rect(8, 0, 0, 4, 8), "red circle", 3)]);
    let right = Layout::new(3, vec![Region::new(BinaryMask::rect(8, 4, 0, 8, 8), "red circle", 3)]);
    write_layout(&d.join("left.json"), &left).unwrap();
    write_layout(&d.join("right.json"), &right).unwrap();

    let sample = |layout: &str, out: &str, extra: &[&str]| {
        let mut args = vec!["sample", "--checkpoint", "trained/model.ckpt", "--layout", layout, "--steps", "5", "--seed", "3", "--out", out];
        args.extend_from_slice(extra);
        anylevel(d, &args, &[])
    };
    ok(&sample("left.json", "s_left", &["--level", "0", "--samples", "2"]));
    ok(&sample("right.json", "s_right", &["--level", "0", "--samples", "2"]));
    for k in ["sample_000.png", "sample_001.png"] {
        assert_eq!(fs::read(d.join("s_left").join(k)).unwrap(), fs::read(d.join("s_right").join(k)).unwrap());
    }
    assert_ne!(fs::read(d.join("s_left/sample_000.png")).unwrap(), fs::read(d.join("s_left/sample_001.png")).unwrap());

    let bad = Layout::new(3, vec![Region::new(BinaryMask::rect(8, 0, 0, 4, 8), "purple elephant", 3)]);
    write_layout(&d.join("bad.json"), &bad).unwrap();
    let out = sample("bad.json", "s_bad", &[]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("purple elephant"));
    assert_eq!(code(&sample("left.json", "s_lvl", &["--level", "2"])), 1);

    let eval = |ckpt: &str, layouts: &str, out: &str| {
        anylevel(d, &["eval", "--checkpoint", ckpt, "--layouts", layouts, "--steps", "4", "--threads", "1", "--out", out], &[])
    };
    let null = eval("untrained/model.ckpt", "left.json", "e_null");
    assert_eq!(code(&null), 3, "{}", String::from_utf8_lossy(&null.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("e_null/report.json")).unwrap()).unwrap();
    assert!(report["warning"].as_str().unwrap().contains("layouts"));
    assert_eq!(report["gain"], 0.0);
    assert!(d.join("e_null/trend.csv").exists());
}
