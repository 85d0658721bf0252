use std::path::Path;
use std::process::{Command, Output};

use crfrnn_core::io;

fn crfrnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crfrnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&crfrnn(&[])), 1);
    assert_eq!(code(&crfrnn(&["infer", "--bogus"])), 1);
    let o = crfrnn(&["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(
        code(&crfrnn(&["gradcheck", "--config", "x", "--size", "6by6"])),
        1
    );
    assert_eq!(code(&crfrnn(&["--help"])), 0);
    assert_eq!(code(&crfrnn(&["--version"])), 0);
}

#[test]
fn input_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let o = crfrnn(&["compare", "--config", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.cfg"));

    let cfg = write_config(dir.path(), "labels = 2\nbanana = 1\n");
    assert_eq!(code(&crfrnn(&["compare", "--config", &cfg])), 1);

    // beyond the oracle's size guard
    let cfg = write_config(dir.path(), "labels = 2\n");
    let o = crfrnn(&["compare", "--config", &cfg, "--size", "80x80"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("size guard"));

    assert_eq!(code(&crfrnn(&["bench", "--config", &cfg])), 1);
}

#[test]
fn gradcheck_on_defaults_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "labels = 3\n");
    let o = crfrnn(&["gradcheck", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("6x6, 3 labels, 2 kernels"));
    // one row per T
    let rows: Vec<&str> = out
        .lines()
        .filter(|l| l.trim_start().starts_with(char::is_numeric))
        .collect();
    assert_eq!(rows.len(), 2);
}

#[test]
fn compare_on_defaults_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "labels = 3\n");
    let o = crfrnn(&["compare", "--config", &cfg, "--size", "8x8"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("filter 0 (spatial)"));
    assert!(out.contains("filter 1 (bilateral)"));
    assert!(out.contains("mean field T=1"));
}

#[test]
fn synth_train_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("data");
    let o = crfrnn(&[
        "synth",
        "--seed",
        "4",
        "--out",
        d.to_str().unwrap(),
        "--samples",
        "3",
        "--size",
        "24x24",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = d.join("run.cfg");
    let manifest = d.join("manifest.tsv");
    assert!(cfg.exists() && manifest.exists());

    let params = dir.path().join("params.crft");
    let history = dir.path().join("history.csv");
    let o = crfrnn(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out-params",
        params.to_str().unwrap(),
        "--history",
        history.to_str().unwrap(),
        "--epochs",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&history).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,loss,mean_iu"));
    assert_eq!(csv.lines().count(), 4);
    let schedule = io::load_params(&params, 2, 2).unwrap();
    assert_eq!(schedule.len(), 1);

    // infer with the trained parameters; T defaults to t_infer
    let mut text = std::fs::read_to_string(&cfg).unwrap();
    text.push_str(&format!("params = {}\n", params.display()));
    let trained_cfg = dir.path().join("trained.cfg");
    std::fs::write(&trained_cfg, text).unwrap();
    let labels = dir.path().join("labels.pgm");
    let marg = dir.path().join("q.crft");
    let over = dir.path().join("overlay.ppm");
    let o = crfrnn(&[
        "infer",
        "--config",
        trained_cfg.to_str().unwrap(),
        "--image",
        d.join("sample_000.ppm").to_str().unwrap(),
        "--unary",
        d.join("sample_000.crft").to_str().unwrap(),
        "--out-labels",
        labels.to_str().unwrap(),
        "--out-marginals",
        marg.to_str().unwrap(),
        "--overlay",
        over.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("iterations: 10"));
    let l = io::load_labels(&labels).unwrap();
    assert_eq!((l.width(), l.height()), (24, 24));
    assert!(l.labels().iter().all(|&x| x < 2));
    let q = io::read_unary(&marg).unwrap();
    assert_eq!((q.height(), q.width(), q.n_labels()), (24, 24, 2));
    assert_eq!(io::load_image(&over).unwrap().width(), 24);

    // an explicit -T is honored
    let o = crfrnn(&[
        "infer",
        "--config",
        cfg.to_str().unwrap(),
        "--image",
        d.join("sample_001.ppm").to_str().unwrap(),
        "--unary",
        d.join("sample_001.crft").to_str().unwrap(),
        "--out-labels",
        labels.to_str().unwrap(),
        "-T",
        "3",
    ]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("iterations: 3"));

    // unaries that do not match the image
    let other = dir.path().join("small");
    crfrnn(&[
        "synth",
        "--out",
        other.to_str().unwrap(),
        "--samples",
        "1",
        "--size",
        "8x8",
    ]);
    let o = crfrnn(&[
        "infer",
        "--config",
        cfg.to_str().unwrap(),
        "--image",
        d.join("sample_000.ppm").to_str().unwrap(),
        "--unary",
        other.join("sample_000.crft").to_str().unwrap(),
        "--out-labels",
        labels.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gridsearch_and_bench_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("data");
    crfrnn(&[
        "synth",
        "--seed",
        "2",
        "--out",
        d.to_str().unwrap(),
        "--samples",
        "2",
        "--size",
        "16x16",
    ]);
    let cfg = d.join("run.cfg");
    let o = crfrnn(&[
        "gridsearch",
        "--config",
        cfg.to_str().unwrap(),
        "--manifest",
        d.join("manifest.tsv").to_str().unwrap(),
        "--grid",
        "1,3",
        "--grid",
        "0,5",
        "-T",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("weights")).count(), 4);
    assert!(out.contains("best: weights"));
    let o = crfrnn(&[
        "gridsearch",
        "--config",
        cfg.to_str().unwrap(),
        "--manifest",
        d.join("manifest.tsv").to_str().unwrap(),
        "--grid",
        "1,3",
    ]);
    assert_eq!(code(&o), 1);

    let o = crfrnn(&[
        "bench",
        "--config",
        cfg.to_str().unwrap(),
        "--image",
        d.join("sample_000.ppm").to_str().unwrap(),
        "--unary",
        d.join("sample_000.crft").to_str().unwrap(),
        "--repeat",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    for stage in [
        "kernel build",
        "message passing",
        "normalize",
        "one iteration",
    ] {
        assert!(out.contains(stage), "missing {stage}");
    }

    let o = crfrnn(&["bench", "--scaling", "--sides", "8,16", "--repeat", "1"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("R^2"));
}

#[test]
fn output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "labels = 2\n");
    let a = crfrnn(&["gradcheck", "--config", &cfg, "--seed", "5"]);
    let b = crfrnn(&["gradcheck", "--config", &cfg, "--seed", "5"]);
    assert_eq!(a.stdout, b.stdout);
}
