use std::path::Path;
use std::process::{Command, Output};

fn mnn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mnn"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("MNN_THREADS")
        .output()
        .expect("spawn mnn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

#[test]
fn synth_fit_predict_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = mnn(&["synth", "--n", "60", "--beta", "0", "--seed", "3", "--out", "data"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = stdout_json(&out);
    assert_eq!(summary["n_users"], 60);
    for f in ["observations.csv", "truth.csv", "model.json"] {
        assert!(dir.join("data").join(f).exists(), "{f}");
    }

    let out = mnn(&["ingest", "--input", "data/observations.csv", "--out", "ingested"], dir);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout_json(&out)["observed"], summary["observed"]);
    assert!(dir.join("ingested/users.csv").exists());

    let out = mnn(&["fit", "--input", "data/observations.csv", "--tune", "--out", "model.json"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let out = mnn(&["predict", "--model", "model.json", "--out", "pred.csv"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = std::fs::read_to_string(dir.join("pred.csv")).unwrap().lines().count();
    assert!(rows > 1);

    let out = mnn(&["evaluate", "--predictions", "pred.csv", "--truth", "data/observations.csv"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = stdout_json(&out);
    assert!(metrics["mse"].as_f64().unwrap().is_finite());
    assert!(metrics["r2"].as_f64().unwrap() > 0.0);

    std::fs::write(dir.join("cells.csv"), "user,item\n0,0\n5,7\n").unwrap();
    let out = mnn(&["predict", "--model", "model.json", "--cells", "cells.csv", "--out", "two.csv"], dir);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read_to_string(dir.join("two.csv")).unwrap().lines().count(), 3);

    std::fs::write(dir.join("bad_cells.csv"), "user,item\nnobody,0\n").unwrap();
    let out = mnn(&["predict", "--model", "model.json", "--cells", "bad_cells.csv", "--out", "x.csv"], dir);
    assert_eq!(code(&out), 2);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&mnn(&["--help"], dir)), 0);
    assert_eq!(code(&mnn(&["frobnicate"], dir)), 1);
    assert_eq!(code(&mnn(&["fit", "--out", "m.json"], dir)), 1);

    std::fs::write(dir.join("bad.json"), r#"{"folds": 1}"#).unwrap();
    assert_eq!(code(&mnn(&["experiment", "--config", "bad.json"], dir)), 1);
    std::fs::write(dir.join("typo.json"), r#"{"reapeats": 2}"#).unwrap();
    assert_eq!(code(&mnn(&["experiment", "--config", "typo.json"], dir)), 1);

    let out = mnn(&["fit", "--input", "missing.csv", "--out", "m.json"], dir);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));

    std::fs::write(dir.join("broken.csv"), "user,item,value\na,b,1\na,b,2\n").unwrap();
    let out = mnn(&["ingest", "--input", "broken.csv"], dir);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn experiment_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("cfg.json"),
        r#"{"mode": "fit_predict", "model": {"n_users": 60, "n_items": 60, "d": 2, "r": 2, "beta": 0.0},
            "repeats": 2, "folds": 3}"#,
    )
    .unwrap();
    let out = mnn(&["experiment", "--config", "cfg.json", "--out", "run"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.csv", "report.json", "predictions_sample.csv", "histogram.csv"] {
        assert!(dir.join("run").join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.join("run/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let run = |threads: &str, out: &str| {
        Command::new(env!("CARGO_BIN_EXE_mnn"))
            .args(["experiment", "--mode", "fit-predict", "--n", "60", "--repeats", "1", "--out", out])
            .current_dir(dir)
            .env("RUST_LOG", "warn")
            .env("MNN_THREADS", threads)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("1", "one")), 0);
    assert_eq!(code(&run("3", "three")), 0);
    assert_eq!(
        std::fs::read(dir.join("one/report.csv")).unwrap(),
        std::fs::read(dir.join("three/report.csv")).unwrap()
    );
    assert_eq!(code(&run("lots", "bad")), 1);
}
