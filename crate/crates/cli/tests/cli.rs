use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "[scenario]
nodes = 4
delta = 2
radius_m = 200000
duration_min = 6
offline_minutes = 4
seeds = 0,1
algo = heat,adrx,random

[heat]
layers = 1
model_dim = 8
heads = 2
ff_dim = 16
pretrain_steps = 5
warmup_steps = 5
train_every = 4
";

fn heatlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heatlab")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("c.ini");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn dump_tables_prints_both_tables() {
    let out = heatlab(&["dump-tables"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("sf,sensitivity_dbm,demod_threshold_db,data_rate_bps\n7,-127,-7.5,5469\n"));
    assert_eq!(text.lines().filter(|l| l.starts_with("12,")).count(), 2);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "[node]\nusf_set = 7,13\n");
    let out = heatlab(&["sweep", "--config", &path]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("line 2") && err.contains("node.usf_set"), "{err}");
    assert_eq!(heatlab(&["simulate", "--algo", "qmix"]).status.code(), Some(1));
    assert_eq!(heatlab(&["sweep", "--config", "/nonexistent/x.ini"]).status.code(), Some(1));
    assert_eq!(heatlab(&["sweep", "--bogus"]).status.code(), Some(1));
}

#[test]
fn sweep_is_byte_identical_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    assert!(heatlab(&["sweep", "--config", &config, "--out", a.to_str().unwrap()]).status.success());
    let threads = Command::new(env!("CARGO_BIN_EXE_heatlab"))
        .args(["sweep", "--config", &config, "--out", b.to_str().unwrap()])
        .env("HEATLAB_THREADS", "1")
        .status()
        .unwrap();
    assert!(threads.success());
    let (a, b) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 1 + 3 * 2);
}

#[test]
fn simulate_writes_row_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let trace = dir.path().join("trace.csv");
    let out = heatlab(&["simulate", "--config", &config, "--algo", "adrx", "--seed", "3", "--trace", trace.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let row = text.lines().nth(1).unwrap();
    assert!(row.starts_with("0,adrx,4,2,200000,3,360,"), "{row}");
    let trace = std::fs::read_to_string(trace).unwrap();
    assert!(trace.starts_with("time,node,channel,sf,verdict,rssi_dbm,sinr_db\n"));
    let sent: usize = row.split(',').nth(7).unwrap().parse().unwrap();
    assert_eq!(trace.lines().count() - 1, sent);
}

#[test]
fn collected_buffer_feeds_training() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let buffer = dir.path().join("buffer.jsonl");
    let ckpt = dir.path().join("heat.ckpt");
    let out = heatlab(&["collect-offline", "--config", &config, "--seed", "1", "--out", buffer.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::metadata(&buffer).unwrap().len() > 0);
    let out = heatlab(&[
        "train", "--config", &config, "--algo", "heat", "--seed", "1", "--buffer", buffer.to_str().unwrap(), "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::metadata(&ckpt).unwrap().len() > 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().nth(1).unwrap().ends_with(",ok"));
    assert_eq!(heatlab(&["train", "--config", &config, "--algo", "adrx"]).status.code(), Some(1));
}

#[test]
fn output_dirs_are_fallbacks() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().display();
    let text = format!("{TINY}\n[output]\ntrace_dir = {root}/traces\nbuffer_dir = {root}/buffers\ncheckpoint_dir = {root}/ckpt\n");
    let config = write_config(dir.path(), &text);
    assert!(heatlab(&["simulate", "--config", &config, "--algo", "random"]).status.success());
    assert!(dir.path().join("traces/random-N4-d2-seed0.trace.csv").exists());
    assert!(heatlab(&["collect-offline", "--config", &config]).status.success());
    assert!(dir.path().join("buffers/N4-d2-seed0.jsonl").exists());
    assert!(heatlab(&["train", "--config", &config, "--algo", "heat"]).status.success());
    assert!(dir.path().join("ckpt/heat-seed0.ckpt").exists());
}
