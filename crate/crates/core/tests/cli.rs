use std::path::Path;
use std::process::{Command, Output};

use edgecl::csi_sim::SceneSpec;
use edgecl::harness::{load_results, ExperimentConfig, ModelShape};
use edgecl::storage::read_sequences;

fn edgecl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgecl")).args(args).output().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let mut cfg = ExperimentConfig::desk();
    cfg.n_domains = 2;
    cfg.n_classes = 3;
    cfg.n_per_class = 4;
    cfg.scene = SceneSpec {
        n_subcarriers: 4,
        packet_rate: 5.0,
        ..cfg.scene
    };
    cfg.temporal_len = 4;
    cfg.model = ModelShape {
        mlp_hidden: 8,
        width: 8,
        heads: 2,
        n_blocks: 1,
        dropout: 0.0,
    };
    cfg.train.iterations = 5;
    cfg.train.batch_size = 4;
    cfg.train.replay_batch = 4;
    cfg.budget = 2;
    cfg.importance_samples = 4;
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn unit_checks_pass() {
    let out = edgecl(&["check", "--level", "unit"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("[PASS]")).count(), 3);
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "n_domains = \"many\"\n").unwrap();
    let out = edgecl(&["check", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let mut cfg = ExperimentConfig::desk();
    cfg.n_domains = 0;
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let out = edgecl(&["run", "--config", path.to_str().unwrap(), "--variant", "proposed"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_writes_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("d");
    let out = edgecl(&[
        "simulate",
        "--user",
        "3",
        "--per-class",
        "2",
        "--classes",
        "4",
        "--seed",
        "9",
        "--out",
        target.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (meta, seqs) = read_sequences(&target).unwrap();
    assert_eq!(meta.entry_count, 8);
    assert_eq!(meta.user_id, 3);
    assert_eq!(seqs.len(), 8);
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let target = dir.path().join("run");
    let t = target.to_str().unwrap();
    let out = edgecl(&["run", "--config", &cfg, "--variant", "proposed", "--trial", "1", "--out", t]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(target.join("trace_1.csv").exists());
    assert!(target.join("trace_2.csv").exists());
    assert!(target.join("results.json").exists());
    let bundle = load_results(&target).unwrap();
    assert_eq!(bundle.runs.len(), 1);
    assert_eq!(bundle.runs[0].trial, 1);

    let out = edgecl(&["report", "--in", t]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("proposed"));

    let missing = dir.path().join("nothing");
    let out = edgecl(&["report", "--in", missing.to_str().unwrap()]);
    assert!(!out.status.success());
}
