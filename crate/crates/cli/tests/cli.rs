use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--cases", "3",
    "--extents", "8,32,32",
    "--epochs", "1",
    "--ae-epochs", "1",
    "--depth", "2",
    "--base-channels", "2",
    "--ae-depth", "1",
    "--ae-base-channels", "2",
    "--code-channels", "4",
];

fn combreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_combreg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = combreg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY.iter().copied()).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(combreg(&["--help"]).status.code(), Some(0));
    assert_eq!(combreg(&["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(combreg(&["run", "--cases", "1", "--out", "/tmp/x"]).status.code(), Some(1));
    assert_eq!(combreg(&["gen", "--out", "/tmp/x", "--connectivity", "7"]).status.code(), Some(1));
    assert_eq!(combreg(&["gen", "--out", "/tmp/x", "--grid", "base:sideways"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = combreg(&["eval", "--data", s(&missing), "--pred", s(dir.path()), "--method", "m", "--out", "m.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn gen_train_predict_eval_rank_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let models = dir.path().join("models");
    let pred = dir.path().join("pred");
    ok(&with_tiny(&["gen", "--out", s(&data)]));
    assert!(data.join("case_0002_image.json").exists());
    assert!(data.join("case_0002_labels.bin").exists() || data.join("case_0002_labels.json").exists());

    ok(&with_tiny(&[
        "train", "--data", s(&data), "--holdout", "case_0000", "--out", s(&models),
        "--strategy", "multi", "--regularization", "shape",
    ]));
    let seg = models.join("ShapeReg_multi_t0.seg.ckpt");
    let ae = models.join("ShapeReg_multi_t0.ae.ckpt");
    assert!(seg.exists() && ae.exists());
    let log = std::fs::read_to_string(models.join("ShapeReg_multi_t0.loss.tsv")).unwrap();
    assert!(log.starts_with("epoch\t"));
    let train: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(models.join("train.json")).unwrap()).unwrap();
    assert_eq!(train["cases"], serde_json::json!(["case_0001", "case_0002"]));

    ok(&["predict", "--checkpoint", s(&seg), "--data", s(&data), "--case", "case_0000", "--out", s(&pred)]);
    assert!(pred.join("case_0000_pred.json").exists());

    let metrics = dir.path().join("metrics.csv");
    ok(&["eval", "--data", s(&data), "--pred", s(&pred), "--method", "ShapeReg_multi", "--out", s(&metrics)]);
    let text = std::fs::read_to_string(&metrics).unwrap();
    // three structures and the global report of one case
    assert_eq!(text.lines().count(), 5);

    let ranked = dir.path().join("rank");
    let out = ok(&["rank", "--metrics", s(&metrics), "--out", s(&ranked)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("ShapeReg_multi"));
    assert!(ranked.join("leaderboard.csv").exists() && ranked.join("spider.json").exists());

    let codes = dir.path().join("codes.csv");
    ok(&["codes", "--checkpoint", s(&ae), "--data", s(&data), "--out", s(&codes)]);
    let text = std::fs::read_to_string(&codes).unwrap();
    assert_eq!(text.lines().next().unwrap(), "case_id,structure,slice,c0,c1,c2,c3");
    assert!(text.lines().count() > 1);

    let out = combreg(&["codes", "--checkpoint", s(&seg), "--data", s(&data), "--out", s(&codes)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_writes_reports_and_honours_config_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"cases": 5, "grid": [{"regularization": "adv", "strategy": "multi"}], "train": {"epochs": 9}}"#).unwrap();
    let out_dir = dir.path().join("out");
    let args = with_tiny(&["run", "--config", s(&cfg), "--grid", "base:global", "--out", s(&out_dir)]);
    ok(&args);
    for f in ["metrics.csv", "metrics.json", "table.csv", "leaderboard.csv", "boxplot.json", "spider.json", "folds.json", "config.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let used: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(used["cases"], 3);
    assert_eq!(used["train"]["epochs"], 1);
    assert_eq!(used["grid"], serde_json::json!([{"regularization": "base", "strategy": "global"}]));
    let board = std::fs::read_to_string(out_dir.join("leaderboard.csv")).unwrap();
    assert!(board.lines().nth(1).unwrap().starts_with("BaseUNet_global,"));
}
