use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mvpacs"))
}

fn toy() -> (PathBuf, PathBuf) {
    let d = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    (d.join("toy.tsv"), d.join("toy_sigma.csv"))
}

fn run(args: &[&str]) -> Output {
    let (data, sigma) = toy();
    let mut c = bin();
    c.args(args);
    if !args.contains(&"simulate") && !args.contains(&"--data") {
        c.arg("--data").arg(&data).arg("--sigma").arg(&sigma);
    }
    c.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn fit_pacs_on_toy_data() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    ok(&run(&["fit", "--method", "pacs", "--out", o]));
    let v = json(&dir.path().join("fit.json"));
    assert_eq!(v["beta"].as_array().unwrap().len(), 10);
    let label = v["signal_groups"]["label"].as_str().unwrap();
    assert_eq!(label.split(',').count(), 10);
    assert!(v["lambda"].as_f64().unwrap() > 0.0);
    let m = json(&dir.path().join("manifest.json"));
    assert_eq!(m["command"], "fit");
    assert_eq!(m["outputs"].as_object().unwrap().len(), 1);
    assert_eq!(m["inputs"].as_object().unwrap().len(), 2);
}

#[test]
fn every_fit_method_runs() {
    for method in ["ivw", "divw", "dridge", "dlasso", "pacs-x"] {
        let dir = tempfile::tempdir().unwrap();
        ok(&run(&["fit", "--method", method, "--grid-points", "8", "--out", dir.path().to_str().unwrap()]));
        let v = json(&dir.path().join("fit.json"));
        assert_eq!(v["method"], method);
    }
}

#[test]
fn simulate_writes_table_columns() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    ok(&run(&["simulate", "--n", "100000", "--replicates", "2", "--fast", "--estimators", "ivw,pacs", "--out", o]));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "method,median_mse,correct_sparsity,sensitivity,fpr,replicates,failures");
    assert!(lines.next().unwrap().starts_with("MVMR-IVW,"));
    assert!(lines.next().unwrap().starts_with("MVMR-PACS,"));
    let jsonl = std::fs::read_to_string(dir.path().join("replicates.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 2);
}

fn read_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn select_infer_is_byte_identical_on_replay() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(&run(&["select-infer", "--seed", "7", "--out", a.path().to_str().unwrap()]));
    ok(&run(&["select-infer", "--seed", "7", "--out", b.path().to_str().unwrap()]));
    let (fa, fb) = (read_outputs(a.path()), read_outputs(b.path()));
    assert_eq!(fa.len(), 2);
    assert_eq!(fa, fb);
    let csv = String::from_utf8(fa[0].1.clone()).unwrap();
    assert!(csv.starts_with("group,members,estimate,se,ci_low,ci_high,p_value"));
}

#[test]
fn manifest_replays_the_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(&run(&["cv", "--grid-points", "6", "--repeats", "2", "--seed", "5", "--out", a.path().to_str().unwrap()]));
    let manifest = a.path().join("manifest.json");
    let out = bin()
        .args(["cv", "--config", manifest.to_str().unwrap(), "--out", b.path().to_str().unwrap()])
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(read_outputs(a.path()), read_outputs(b.path()));
    let (ma, mb) = (json(&manifest), json(&b.path().join("manifest.json")));
    assert_eq!(ma["outputs"], mb["outputs"]);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"method": "ivw", "seed": 3}"#).unwrap();
    let out_dir = dir.path().join("o");
    ok(&run(&["fit", "--config", cfg.to_str().unwrap(), "--method", "divw", "--out", out_dir.to_str().unwrap()]));
    let m = json(&out_dir.join("manifest.json"));
    assert_eq!(m["config"]["method"], "divw");
    assert_eq!(m["config"]["seed"], 3);
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"lamda": 1.0}"#).unwrap();
    let out = run(&["fit", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("o");
    let missing = bin().args(["fit", "--data", "/no/such/file.tsv", "--out", o.to_str().unwrap()]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&missing.stderr);
    assert!(stderr.lines().all(|l| l.starts_with("error: ")));

    let unknown = run(&["fit", "--no-such-flag"]);
    assert_eq!(unknown.status.code(), Some(2));

    // two identical exposures: the normal matrix is singular
    let tsv = dir.path().join("dup.tsv");
    let mut s = String::from("snp\tbeta_A\tse_A\tbeta_B\tse_B\tbeta_outcome\tse_outcome\n");
    for j in 0..20 {
        let g = 0.01 * (j as f64 + 1.0);
        s.push_str(&format!("s{j}\t{g}\t0.01\t{g}\t0.01\t{}\t0.01\n", 0.5 * g));
    }
    std::fs::write(&tsv, s).unwrap();
    let sing = bin()
        .args(["fit", "--method", "ivw", "--data", tsv.to_str().unwrap(), "--out", o.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(sing.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&sing.stderr));
}

#[test]
fn thin_writes_one_file_per_fold() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run(&["thin", "--eps", "0.2,0.3,0.5", "--seed", "9", "--out", dir.path().to_str().unwrap()]));
    let m = json(&dir.path().join("manifest.json"));
    assert_eq!(m["config"]["folds"], 3);
    for f in ["fold_1.tsv", "fold_2.tsv", "fold_3.tsv", "sigma.csv"] {
        assert!(m["outputs"][f].is_string(), "{f}");
    }
    let mismatch = run(&["thin", "--eps", "0.5,0.5", "--folds", "3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(mismatch.status.code(), Some(2));
}

#[test]
fn thread_count_does_not_change_stability_output() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(&run(&["--threads", "1", "stability", "--repeats", "3", "--seed", "2", "--out", a.path().to_str().unwrap()]));
    ok(&run(&["--threads", "3", "stability", "--repeats", "3", "--seed", "2", "--out", b.path().to_str().unwrap()]));
    assert_eq!(read_outputs(a.path()), read_outputs(b.path()));
}
