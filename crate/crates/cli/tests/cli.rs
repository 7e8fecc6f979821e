use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deepfrc_cli::{check_warp_file, RunConfig};

fn deepfrc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepfrc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path, epochs: usize) -> PathBuf {
    let mut c = RunConfig::default();
    c.synth.n_samples = 500;
    c.synth.n_points = 100;
    c.synth.splits = [400, 50, 50];
    c.synth.coeff_k = 49;
    c.train.epochs = epochs;
    let path = dir.join("config.json");
    fs::write(&path, c.to_json()).unwrap();
    path
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    v.sort();
    v
}

#[test]
fn default_gen_writes_standard_split_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    let o = deepfrc(&["gen", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("resolved config"));
    assert_eq!(line_count(&out.join("train.csv")), 1600);
    assert_eq!(line_count(&out.join("val.csv")), 400);
    assert_eq!(line_count(&out.join("test.csv")), 4000);
    assert!(out.join("truth.json").is_file());
}

#[test]
fn gen_into_bad_path_fails_without_files() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("plain-file");
    fs::write(&blocker, "x").unwrap();
    let cfg = small_config(tmp.path(), 1);
    let o = deepfrc(&["gen", "--config", s(&cfg), "--out", s(&blocker.join("data"))]);
    assert!(!o.status.success());
    let mut names: Vec<_> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["config.json", "plain-file"]);
}

#[test]
fn gen_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 1);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = deepfrc(&["gen", "--config", s(&cfg), "--out", s(out), "--seed", "7"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let strip = |v: Vec<(PathBuf, Vec<u8>)>| {
        v.into_iter()
            .map(|(p, b)| (p.file_name().unwrap().to_owned(), b))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(snapshot(&a)), strip(snapshot(&b)));
    let c = tmp.path().join("c");
    deepfrc(&["gen", "--config", s(&cfg), "--out", s(&c), "--seed", "8"]);
    assert_ne!(
        fs::read(a.join("train.csv")).unwrap(),
        fs::read(c.join("train.csv")).unwrap()
    );
}

#[test]
fn train_one_epoch_then_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 1);
    let data = tmp.path().join("data");
    assert!(deepfrc(&["gen", "--config", s(&cfg), "--out", s(&data)])
        .status
        .success());
    let before = snapshot(&data);

    let run1 = tmp.path().join("run1");
    let o = deepfrc(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run1)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("resolved config"));
    assert_eq!(line_count(&run1.join("history.csv")), 2);

    let dir3 = tmp.path().join("resume");
    fs::create_dir(&dir3).unwrap();
    let cfg3 = small_config(&dir3, 3);
    let run2 = tmp.path().join("run2");
    let ck = run1.join("checkpoint.json");
    let o = deepfrc(&[
        "train",
        "--config",
        s(&cfg3),
        "--data",
        s(&data),
        "--out",
        s(&run2),
        "--ckpt",
        s(&ck),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let history = fs::read_to_string(run2.join("history.csv")).unwrap();
    let epochs: Vec<&str> = history.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2", "3"]);
    assert_eq!(snapshot(&data), before, "training must not touch its inputs");
}

#[test]
fn trained_checkpoint_evaluates_and_aligns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 15);
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    assert!(deepfrc(&["gen", "--config", s(&cfg), "--out", s(&data)])
        .status
        .success());
    let o = deepfrc(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = run.join("checkpoint.json");

    let ev = tmp.path().join("eval");
    let o = deepfrc(&["eval", "--ckpt", s(&ck), "--data", s(&data), "--out", s(&ev)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(json["metrics"]["accuracy"], 1.0);
    assert_eq!(json["split"], "test");
    assert!(json["metrics"]["rho"].is_f64());
    let written: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(written, json);
    assert_eq!(line_count(&ev.join("metrics.csv")), 2);

    let al = tmp.path().join("align");
    let o = deepfrc(&[
        "align",
        "--ckpt",
        s(&ck),
        "--data",
        s(&data),
        "--out",
        s(&al),
        "--validate",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("all warps valid"));
    assert_eq!(line_count(&al.join("warps.csv")), 51);
    assert_eq!(line_count(&al.join("aligned.csv")), 51);
    let header = fs::read_to_string(al.join("warps.csv")).unwrap();
    assert!(header.starts_with("id,gamma_0,gamma_1,"));
    let grid: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
    assert!(check_warp_file(&al.join("warps.csv"), &grid).unwrap().is_empty());
}

#[test]
fn validator_flags_broken_warp_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("warps.csv");
    fs::write(
        &path,
        "id,gamma_0,gamma_1,gamma_2\n0,0,0.5,1\n1,0,0.7,0.6\n2,0.1,0.5,1\n",
    )
    .unwrap();
    assert_eq!(check_warp_file(&path, &[0.0, 0.5, 1.0]).unwrap(), vec![1, 2]);
}

#[test]
fn gradcheck_micro_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let o = deepfrc(&["gradcheck", "--out", s(tmp.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(json["registration"].as_f64().unwrap() <= 1e-4);
    assert!(json["classification"].as_f64().unwrap() <= 1e-4);
    assert!(json["seconds"].as_f64().unwrap() <= 60.0);
    assert!(tmp.path().join("gradcheck.json").is_file());
}

#[test]
fn tune_writes_best_candidate() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = RunConfig::default();
    c.synth.n_samples = 120;
    c.synth.n_points = 60;
    c.synth.splits = [100, 10, 10];
    c.synth.coeff_k = 29;
    c.train.epochs = 1;
    let cfg = tmp.path().join("config.json");
    fs::write(&cfg, c.to_json()).unwrap();
    let grid = tmp.path().join("grid.json");
    fs::write(
        &grid,
        r#"[{"alpha": 1.0, "beta": 1.0, "lr_reg": 0.001, "lr_class": 0.001}]"#,
    )
    .unwrap();
    let data = tmp.path().join("data");
    assert!(deepfrc(&["gen", "--config", s(&cfg), "--out", s(&data)])
        .status
        .success());
    let out = tmp.path().join("tune");
    let o = deepfrc(&[
        "tune",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--grid",
        s(&grid),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let best: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("best.json")).unwrap()).unwrap();
    assert_eq!(best["result"]["best"], 0);
    assert_eq!(best["result"]["candidate"]["alpha"], 1.0);
}

#[test]
fn exit_codes_by_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(
        deepfrc(&["gen", "--config", s(&bad), "--out", s(tmp.path())])
            .status
            .code(),
        Some(2)
    );

    let invalid = tmp.path().join("invalid.json");
    fs::write(&invalid, r#"{"synth": {"n_points": 2}}"#).unwrap();
    let o = deepfrc(&["gen", "--config", s(&invalid), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("x").exists());

    assert_eq!(deepfrc(&["train"]).status.code(), Some(2));
    let missing = tmp.path().join("nowhere");
    assert_eq!(deepfrc(&["train", "--data", s(&missing)]).status.code(), Some(3));

    let csv = tmp.path().join("broken.csv");
    fs::write(&csv, "0,1.0,2.0,3.0\n1,1.0,abc,3.0\n").unwrap();
    assert_eq!(deepfrc(&["train", "--data", s(&csv)]).status.code(), Some(3));
}

#[test]
fn divergent_learning_rate_is_a_numerical_abort() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = RunConfig::default();
    c.synth.n_samples = 80;
    c.synth.n_points = 50;
    c.synth.splits = [80, 0, 0];
    c.synth.coeff_k = 24;
    c.train.epochs = 5;
    c.train.lr_reg = 1e300;
    c.train.lr_class = 1e300;
    let cfg = tmp.path().join("config.json");
    fs::write(&cfg, c.to_json()).unwrap();
    let data = tmp.path().join("data");
    assert!(deepfrc(&["gen", "--config", s(&cfg), "--out", s(&data)])
        .status
        .success());
    let o = deepfrc(&["train", "--config", s(&cfg), "--data", s(&data)]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}
