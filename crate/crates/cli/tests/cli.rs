use std::fs;
use std::path::Path;
use std::process::Command;

use corrtrack_cli::config::RunConfig;
use corrtrack_cli::io;
use corrtrack_core::model::{init_params, ArchConfig};

const TINY: &str = r#"
seed = 3

[data.train]
count = 2
[data.train.spec]
num_frames = 12
width = 32
height = 24
num_static_points = 1200
num_objects = 3

[data.eval]
first_seed = 1000
count = 2
[data.eval.spec]
num_frames = 12
width = 32
height = 24
num_static_points = 1200
num_objects = 3

[train]
steps = 4
budget = 48
strides = [1, 3, 5]

[train.arch]
enc_channels = 4
enc_dilations = [1, 2]
head_hidden = 6
desc_dim = 4

[queries]
per_video = 12
query_frames = [0, 2]
"#;

fn corrtrack(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_corrtrack"))
        .current_dir(dir)
        .args(["--config", "tiny.toml", "--data", "data", "--out", "run"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = corrtrack(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("tiny.toml"), TINY).unwrap();
    ok(tmp.path(), &["gen"]);
    tmp
}

#[test]
fn gen_train_track_eval() {
    let tmp = setup();
    let dir = tmp.path();
    assert_eq!(io::list_scenes(&dir.join("data/train")).unwrap().len(), 2);

    let summary: serde_json::Value = serde_json::from_str(ok(dir, &["train"]).trim()).unwrap();
    assert_eq!(summary["steps"], 4);
    let log = fs::read_to_string(dir.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let saved = RunConfig::load(&dir.join("run/run_config.toml")).unwrap();
    assert_eq!(saved.seed, 3);

    for mode in ["2d", "3d-pointmap", "3d-lifted"] {
        let paths = ok(dir, &["track", "--mode", mode]);
        assert_eq!(paths.lines().count(), 2);
    }
    let csv = fs::read_to_string(dir.join("run/tracks/scene_1000.csv")).unwrap();
    assert!(csv.starts_with(io::TRAJECTORY_HEADER));

    let report = ok(dir, &["eval", "--split", "all", "--model", "tiny"]);
    assert!(report.contains("delta_avg"));
    let table = fs::read_to_string(dir.join("run/eval.csv")).unwrap();
    assert!(table.lines().nth(1).unwrap().contains("tiny"));

    let bench: serde_json::Value = serde_json::from_str(ok(dir, &["bench"]).trim()).unwrap();
    assert_eq!(bench["pairs"], 16);
}

#[test]
fn oracle_tracks_evaluate_perfectly_on_native_grid() {
    let tmp = setup();
    let dir = tmp.path();
    let mut cfg = fs::read_to_string(dir.join("tiny.toml")).unwrap();
    cfg.push_str("\n[track]\nsampling = \"nearest\"\n\n[eval]\neval_resolution = \"native\"\n");
    fs::write(dir.join("tiny.toml"), &cfg).unwrap();
    ok(dir, &["track", "--oracle"]);
    let report = ok(dir, &["eval", "--split", "all"]);
    for key in ["delta_avg", "occlusion_accuracy"] {
        let line = report.lines().find(|l| l.starts_with(&format!("{key} ="))).unwrap();
        let v: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
        assert_eq!(v, 100.0, "{report}");
    }
}

#[test]
fn zero_steps_writes_the_initialization() {
    let tmp = setup();
    let dir = tmp.path();
    ok(dir, &["train", "--steps", "0"]);
    let params = io::load_checkpoint(&dir.join("run/checkpoint.bt"), None).unwrap();
    let cfg = RunConfig::load(&dir.join("tiny.toml")).unwrap();
    assert_eq!(params, init_params(3, &cfg.train.arch).unwrap());
}

#[test]
fn bad_checkpoints_are_rejected() {
    let tmp = setup();
    let dir = tmp.path();
    ok(dir, &["train", "--steps", "1"]);
    let ckpt = dir.join("run/checkpoint.bt");
    assert!(io::load_checkpoint(&ckpt, Some(&ArchConfig::tiny())).is_err());

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] = b'X';
    fs::write(dir.join("run/broken.bt"), &bytes).unwrap();
    let out = corrtrack(dir, &["track", "--checkpoint", "run/broken.bt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn ratio_flag_changes_the_checkpoint() {
    let tmp = setup();
    let dir = tmp.path();
    ok(dir, &["train", "--ratio", "0"]);
    let a = fs::read(dir.join("run/checkpoint.bt")).unwrap();
    ok(dir, &["train", "--ratio", "0.95"]);
    let b = fs::read(dir.join("run/checkpoint.bt")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn unknown_config_keys_fail() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("tiny.toml"), "[train]\nstep = 3\n").unwrap();
    let out = corrtrack(tmp.path(), &["gen"]);
    assert!(!out.status.success());
}
