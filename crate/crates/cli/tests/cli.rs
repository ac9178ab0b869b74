use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use catpose::synthdata::{read_dataset, DataConfig, Heterogeneity};
use catpose::trainer::{ModelShape, RoutingSource, TrainConfig};
use serde_json::Value;

fn catpose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catpose")).args(args).output().expect("spawn catpose")
}

fn ok(args: &[&str]) -> Output {
    let out = catpose(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json(path: &Path, v: &impl serde::Serialize) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn data_config(dir: &Path, k: usize) -> PathBuf {
    let mut dc = DataConfig::new(k, 16, 3, Heterogeneity::Graded);
    dc.train_per_category = 12;
    dc.test_per_category = 4;
    let p = dir.join(format!("data_k{k}.json"));
    write_json(&p, &dc);
    p
}

fn gen_data(dir: &Path, k: usize) -> PathBuf {
    let cfg = data_config(dir, k);
    let out = dir.join(format!("data_k{k}.dcpd"));
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&out)]);
    out
}

fn train_config(dir: &Path, epochs: usize) -> PathBuf {
    let mut cfg = TrainConfig::new(16, RoutingSource::None, 9);
    cfg.model = ModelShape::tiny();
    cfg.epochs = epochs;
    cfg.batch_size = 4;
    cfg.lr.cycle = 8;
    let p = dir.join(format!("train_{epochs}.json"));
    write_json(&p, &cfg);
    p
}

fn train(dir: &Path, data: &Path, epochs: usize, name: &str) -> PathBuf {
    let cfg = train_config(dir, epochs);
    let run = dir.join(name);
    ok(&["train", "--config", s(&cfg), "--data", s(data), "--out", s(&run), "--routing", "none"]);
    run
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_specs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_data(dir.path(), 6);
    let bytes = fs::read(&a).unwrap();
    assert_eq!(read_dataset(&a).unwrap().header.specs.len(), 6);
    let out = ok(&["gen-data", "--config", s(&dir.path().join("data_k6.json")), "--out", s(&a)]);
    assert_eq!(fs::read(&a).unwrap(), bytes);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("train:") && stdout.contains("c5=12"), "{stdout}");
    let manifest = read_json(&dir.path().join("data_k6.dcpd.manifest.json"));
    assert_eq!(manifest["subcommand"], "gen-data");
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["seeds"][0], 3);
}

#[test]
fn gen_data_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = data_config(dir.path(), 3);
    let mut v = read_json(&cfg);
    v.as_object_mut().unwrap().remove("heterogeneity");
    let broken = dir.path().join("broken.json");
    write_json(&broken, &v);
    let out = catpose(&["gen-data", "--config", s(&broken), "--out", s(&dir.path().join("x.dcpd"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("heterogeneity"));
    // a handled failure still leaves a manifest behind
    assert_eq!(read_json(&dir.path().join("x.dcpd.manifest.json"))["status"], "failed");

    let mut v = read_json(&cfg);
    v["v"] = 2.into();
    write_json(&broken, &v);
    let out = catpose(&["gen-data", "--config", s(&broken), "--out", s(&dir.path().join("x.dcpd"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = catpose(&["gen-data", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_checkpoints_metrics_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 2);
    let a = train(dir.path(), &data, 2, "run_a");
    let ckpts: Vec<_> = fs::read_dir(a.join("checkpoints")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(ckpts.len(), 2);
    assert!(a.join("checkpoints/epoch_0001.ckpt").exists() && a.join("checkpoints/epoch_0002.ckpt").exists());
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,mean_loss,lr"));
    assert_eq!(metrics.lines().count(), 3);
    let routing = read_json(&a.join("routing.json"));
    assert_eq!(routing["provenance"]["method"], "shared");
    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest["status"], "ok");
    assert!(manifest["version"].as_str().unwrap().starts_with('v'));

    let b = train(dir.path(), &data, 2, "run_b");
    assert_eq!(fs::read(b.join("metrics.csv")).unwrap(), metrics.as_bytes());
    assert_eq!(fs::read(b.join("checkpoints/epoch_0002.ckpt")).unwrap(), fs::read(a.join("checkpoints/epoch_0002.ckpt")).unwrap());
}

#[test]
fn train_rejects_corrupt_data_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 2);
    let mut bytes = fs::read(&data).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&data, bytes).unwrap();
    let cfg = train_config(dir.path(), 1);
    let out = catpose(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn group_quantile_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("rates.json");
    fs::write(&d, r#"{"0": 0.9, "1": 0.8, "2": 0.7, "3": 0.6, "4": 0.5, "5": 0.4}"#).unwrap();
    let out = dir.path().join("routing.json");
    ok(&["group", "--difficulty", s(&d), "--G", "3", "--out", s(&out)]);
    let r = read_json(&out);
    let gamma = r["gamma"].as_object().unwrap();
    let mut sizes = [0; 3];
    for g in gamma.values() {
        sizes[g.as_u64().unwrap() as usize - 1] += 1;
    }
    assert_eq!(sizes, [2, 2, 2]);
    assert_eq!(r["gamma"]["0"], 1);
    assert_eq!(r["gamma"]["5"], 3);

    ok(&["group", "--difficulty", s(&d), "--G", "1", "--out", s(&out)]);
    let r = read_json(&out);
    assert!(r["gamma"].as_object().unwrap().values().all(|g| g == 1));
    assert_eq!(r["alpha"].as_object().unwrap().len(), 1);
}

#[test]
fn diagnose_evaluate_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 2);
    let run = train(dir.path(), &data, 3, "run");
    let diag = run.join("diag");
    let args = ["diagnose", "--rundir", s(&run), "--data", s(&data), "--subset-seed", "11", "--batches", "2", "--batch-size", "4", "--out", s(&diag)];
    ok(&args);
    let reports: Vec<_> = (1..=3).map(|e| diag.join(format!("report_epoch_{e:04}.json"))).collect();
    assert!(reports.iter().all(|p| p.exists()));
    let ts = fs::read(diag.join("timeseries.csv")).unwrap();
    let first = fs::read(&reports[0]).unwrap();
    ok(&args);
    assert_eq!(fs::read(diag.join("timeseries.csv")).unwrap(), ts);
    assert_eq!(fs::read(&reports[0]).unwrap(), first);
    let text = String::from_utf8(ts).unwrap();
    let mut blocks: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    blocks.sort();
    blocks.dedup();
    assert_eq!(blocks, ["omega", "phi", "psi"]);

    let ck = run.join("checkpoints/epoch_0003.ckpt");
    let eval = dir.path().join("eval.json");
    ok(&["evaluate", "--ckpt", s(&ck), "--data", s(&data), "--thresholds", "0,0,0", "--out", s(&eval)]);
    let e = read_json(&eval);
    let cats = e["categories"].as_array().unwrap();
    assert_eq!(cats.len(), 2);
    assert!(cats.iter().all(|c| c["rate"] == 0.0));

    let summary = dir.path().join("summary.json");
    let other = dir.path().join("other");
    fs::create_dir(&other).unwrap();
    for f in fs::read_dir(&diag).unwrap() {
        let f = f.unwrap().path();
        fs::copy(&f, other.join(f.file_name().unwrap())).unwrap();
    }
    ok(&["report", "--diag", s(&diag), s(&other), "--evals", s(&eval), "--out", s(&summary)]);
    let sm = read_json(&summary);
    let ids: Vec<&str> = sm["runs"].as_array().unwrap().iter().map(|r| r["run_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["run", "other"]);
    let src = read_json(&reports[2]);
    let passed = &sm["runs"][0]["reports"][2];
    assert_eq!(passed["blocks"], src["blocks"]);
    assert_eq!(sm["evals"][0]["run_id"], "eval");

    let out = catpose(&["report", "--diag", s(&dir.path().join("nope")), "--out", s(&summary)]);
    assert_eq!(out.status.code(), Some(2));
}
