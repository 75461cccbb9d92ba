use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[train]
stage1_iters = 4
stage1_rays_per_batch = 64
empty_space_points = 16
stage2_iters = 3
stage2_batch_views = 2

[sampling]
coarse_samples = 6
fine_samples = 6
"#;

fn seglift(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seglift"))
        .current_dir(dir)
        .args(["--preset", "desk", "--config", "tiny.toml", "--threads", "1", "--seed", "5"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = seglift(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();

    ok(d, &["synth", "--out", "data", "--res", "12", "--views", "4", "--test-views", "1"]);
    assert!(d.join("data/cameras.json").is_file());

    let io = ["--data", "data", "--run", "run"];
    ok(d, &[&["train-nerf"][..], &io].concat());
    assert!(d.join("run/ckpt/radiance.ckpt").is_file());
    ok(d, &[&["train-objects"][..], &io].concat());
    assert!(d.join("run/ckpt/objects.ckpt").is_file());

    ok(d, &[&["segment"][..], &io].concat());
    ok(d, &[&["eval"][..], &io].concat());
    let metrics = std::fs::read_to_string(d.join("run/metrics/metrics.toml")).unwrap();
    assert!(metrics.contains("iou"), "{metrics}");

    ok(d, &[&["edit"][..], &io, &["--slots", "1"]].concat());
    let bad = seglift(d, &[&["edit"][..], &io, &["--slots", "1", "--color", "1,0,0"]].concat());
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();

    assert_eq!(seglift(d, &["no-such-command"]).status.code(), Some(1));
    let missing = seglift(d, &["train-nerf", "--data", "absent", "--run", "run"]);
    assert_eq!(missing.status.code(), Some(3));

    std::fs::write(d.join("tiny.toml"), "[train]\nstage2_iters = \"many\"\n").unwrap();
    assert_eq!(seglift(d, &["synth", "--out", "data"]).status.code(), Some(2));
}
