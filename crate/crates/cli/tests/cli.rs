use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cpcmil(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpcmil"))
        .args(args)
        .current_dir(dir)
        .env("CPCMIL_OUTPUT_ROOT", dir.join("root"))
        .env_remove("CPCMIL_LOG")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const SMALL: &[&str] = &["--n-images", "6", "--image-size", "192", "--seed", "7"];

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cpcmil(dir.path(), &["train-mil", "--bogus"])), 1);
    assert_eq!(code(&cpcmil(dir.path(), &["no-such-command"])), 1);
    assert_eq!(code(&cpcmil(dir.path(), &["--help"])), 0);
}

#[test]
fn frozen_training_without_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cpcmil(dir.path(), &["train-mil", "--bags", "missing.jsonl", "--mode", "frozen"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--checkpoint"));
}

#[test]
fn bad_config_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[mil]\nloss = \"nope\"\n").unwrap();
    let o = cpcmil(dir.path(), &["--config", "c.toml", "train-mil", "--bags", "x.jsonl"]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&cpcmil(dir.path(), &["--threads", "0", "verify"])), 2);
    assert_eq!(code(&cpcmil(dir.path(), &["--profile", "huge", "verify"])), 2);
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = cpcmil(dir.path(), &["-q", "verify"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(dir.path().join("root/verify/verify.json").is_file());
}

#[test]
fn synth_gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["-q", "synth-gen", "--out", "a"];
    args.extend_from_slice(SMALL);
    assert_eq!(code(&cpcmil(dir.path(), &args)), 0);
    args[3] = "b";
    assert_eq!(code(&cpcmil(dir.path(), &args)), 0);
    let a = fs::read(dir.path().join("a/manifest.json")).unwrap();
    let b = fs::read(dir.path().join("b/manifest.json")).unwrap();
    assert_eq!(a, b);
    let m: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(m["config"]["synthetic"]["seed"], 7);
    assert_eq!(m["overrides"].as_array().unwrap().len(), 3);
}

#[test]
fn file_settings_lose_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[synthetic]\nn_images = 4\nseed = 1\n").unwrap();
    let mut args = vec!["-q", "--config", "c.toml", "synth-gen", "--out", "s"];
    args.extend_from_slice(SMALL);
    assert_eq!(code(&cpcmil(dir.path(), &args)), 0);
    let m: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("s/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["synthetic"]["n_images"], 6);
    assert_eq!(m["results"]["images"], 6);
}

#[test]
fn small_pipeline_runs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut synth = vec!["-q", "synth-gen", "--out", "corpus"];
    synth.extend_from_slice(SMALL);
    assert_eq!(code(&cpcmil(d, &synth)), 0);
    assert_eq!(code(&cpcmil(d, &["-q", "extract", "--corpus", "corpus", "--out", "bags"])), 0);
    let cpc = ["-q", "pretrain-cpc", "--bags", "bags/bags.jsonl", "--epochs", "1", "--tiles-per-epoch", "16"];
    let mut first = cpc.to_vec();
    first.extend(["--out", "cpc"]);
    assert_eq!(code(&cpcmil(d, &first)), 0);
    let mut train = vec![
        "-q", "train-mil", "--bags", "bags/bags.jsonl", "--checkpoint", "cpc/cpc.ckpt", "--folds", "2",
        "--val-fraction", "0.34", "--max-epochs", "3",
    ];
    train.extend(["--out", "t1"]);
    assert_eq!(code(&cpcmil(d, &train)), 0);
    let n = train.len();
    train[n - 1] = "t2";
    assert_eq!(code(&cpcmil(d, &train)), 0);
    assert_eq!(
        fs::read(d.join("t1/predictions.jsonl")).unwrap(),
        fs::read(d.join("t2/predictions.jsonl")).unwrap()
    );
    let eval = cpcmil(d, &["-q", "eval", "--run", "t1", "--bags", "bags/bags.jsonl", "--out", "ev"]);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    let map = cpcmil(d, &["-q", "attention-map", "--run", "t1", "--bags", "bags/bags.jsonl", "--out", "maps"]);
    assert_eq!(code(&map), 0, "{}", String::from_utf8_lossy(&map.stderr));
    assert!(fs::read_dir(d.join("maps")).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "png")));
}
