use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn megpr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_megpr")).args(args).output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("megpr-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_fit_predict_round_trip() {
    let dir = scratch("roundtrip");
    let data = dir.join("data.csv");
    let out = megpr(&["generate", "--system", "linear-chain", "--n", "30", "--sigma", "0.01", "--seed", "4", "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&data).unwrap();
    assert!(text.starts_with("t,y1,y2,y3\n"));
    assert_eq!(text.lines().count(), 31);

    let cfg = dir.join("fit.cfg");
    std::fs::write(&cfg, "iterations = 60\nseed = 2\ntheta_init = 0.8,1.2\n").unwrap();
    let fit = dir.join("fit.json");
    let trace = dir.join("trace.csv");
    let out = megpr(&[
        "fit", "--system", "linear-chain", "--data", s(&data), "--config", s(&cfg), "--out", s(&fit), "--trace", s(&trace),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&fit).unwrap()).unwrap();
    assert_eq!(json["result"]["theta"].as_array().unwrap().len(), 2);
    assert!(std::fs::read_to_string(&trace).unwrap().starts_with("iter,objective,grad_norm,theta1,theta2"));

    let curve = dir.join("curve.csv");
    let out = megpr(&["predict", "--fit", s(&fit), "--component", "2", "--order", "1", "--grid", "0:10:21", "--out", s(&curve)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&curve).unwrap();
    assert!(text.starts_with("t,mean,variance\n"));
    assert_eq!(text.lines().count(), 22);

    let svg = dir.join("curve.svg");
    let out = megpr(&["predict", "--fit", s(&fit), "--component", "2", "--grid", "50", "--out", s(&svg)]);
    assert!(out.status.success());
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = scratch("config");
    assert_eq!(megpr(&["fit", "--system", "lorenz", "--data", "x.csv"]).status.code(), Some(2));
    let data = dir.join("data.csv");
    std::fs::write(&data, "t,y1,y2,y3\n0,,0.0,\n1,,0.3,\n2,,0.27,\n").unwrap();
    let cfg = dir.join("bad.cfg");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = megpr(&["fit", "--system", "linear-chain", "--data", s(&data), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let missing = megpr(&["fit", "--system", "linear-chain", "--data", s(&dir.join("absent.csv"))]);
    assert_eq!(missing.status.code(), Some(2));
    let spec = dir.join("cell.spec");
    std::fs::write(&spec, "system = linear-chain\nn = 20\nnoise_sigma = 0.02\ntrials = 1\niterations = 5\n").unwrap();
    // no reference values exist for this cell
    assert_eq!(megpr(&["experiment", "--spec", s(&spec), "--check"]).status.code(), Some(2));
    let out = megpr(&["predict", "--fit", s(&dir.join("absent.json")), "--component", "1", "--grid", "5", "--out", "x.txt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_3() {
    let dir = scratch("numerical");
    let out = megpr(&[
        "generate", "--system", "linear-chain", "--n", "10", "--sigma", "0", "--seed", "1", "--truth=-100,1", "--out",
        s(&dir.join("d.csv")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn failed_check_exits_with_4() {
    let dir = scratch("check");
    let spec = dir.join("cell.spec");
    std::fs::write(
        &spec,
        "system = linear-chain\nn = 50\nnoise_sigma = 0.01\ntrials = 2\niterations = 1\ntheta_init = 0.5,0.5\n",
    )
    .unwrap();
    let prefix = dir.join("report");
    let out = megpr(&["experiment", "--spec", s(&spec), "--check", "--out", s(&prefix)]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL linear chain mean theta1"));
    for ext in ["csv", "json", "md"] {
        assert!(dir.join(format!("report.{ext}")).exists());
    }
}
