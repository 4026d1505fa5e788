use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kan-hydro"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n: &str, seed: &str) -> std::path::PathBuf {
    let data = dir.join("synth.csv");
    let o = run(&["synth", "--formula", "kan_fb", "--n", n, "--seed", seed, "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    data
}

#[test]
fn synth_writes_catchment_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "40", "1");
    let text = std::fs::read_to_string(&data).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "gauge_id,p_mm_yr,pet_mm_yr,qb_mm_yr,qd_mm_yr,truth");
    assert_eq!(lines.count(), 40);

    let again = dir.path().join("again.csv");
    run(&["synth", "--formula", "kan_fb", "--n", "40", "--seed", "1", "--out", s(&again)]);
    assert_eq!(text, std::fs::read_to_string(&again).unwrap());
}

#[test]
fn synth_accepts_expressions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e.csv");
    let o = run(&["synth", "--formula", "0.3 + 0.1*x", "--n", "5", "--sigma", "0", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let bad = run(&["synth", "--formula", "0.3 + ", "--out", s(&out)]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn evaluate_named_formula() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "60", "2");
    let out = dir.path().join("ev");
    let o = run(&["evaluate", "--data", s(&data), "--model", "kan_fb", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ev: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("evaluation.json")).unwrap()).unwrap();
    assert!(ev["all"]["nse"].as_f64().unwrap() > 0.9);
    let preds = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert!(preds.lines().next().unwrap().ends_with("phi,prediction"));
    assert_eq!(preds.lines().count(), 61);
}

#[test]
fn evaluate_refit_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "80", "4");
    let out = dir.path().join("rf");
    let o = run(&["evaluate", "--data", s(&data), "--model", "original_fb", "--target", "qb_over_p",
        "--refit", "--repeats", "3", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rf: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("refit.json")).unwrap()).unwrap();
    assert_eq!(rf["runs"].as_array().unwrap().len(), 3);
    assert_eq!(rf["mean_params"].as_array().unwrap().len(), 3);
}

#[test]
fn fit_then_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "60", "5");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"shapes": [[1,1]], "grid_intervals": [3], "seeds": [0], "folds": 3}"#).unwrap();
    let out = dir.path().join("fit");
    let o = run(&["fit", "--data", s(&data), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "report.txt", "network.json", "predictions.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let ck = format!("checkpoint:{}", s(&out.join("network.json")));
    let ev = dir.path().join("ck");
    let o = run(&["evaluate", "--data", s(&data), "--model", &ck, "--target", "qb_over_p", "--out", s(&ev)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let no_target = run(&["evaluate", "--data", s(&data), "--model", &ck, "--out", s(&ev)]);
    assert_eq!(code(&no_target), 1);
}

#[test]
fn fit_rejects_unknown_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "30", "6");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"shapez": [[1,1]]}"#).unwrap();
    let o = run(&["fit", "--data", s(&data), "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn metrics_on_columns() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("m.csv");
    std::fs::write(&f, "obs,sim\n1,1\n2,2\n3,3\n").unwrap();
    let o = run(&["metrics", "--data", s(&f), "--obs-col", "obs", "--sim-col", "sim"]);
    assert_eq!(code(&o), 0);
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(m["nse"].as_f64(), Some(1.0));
    assert_eq!(m["rmse"].as_f64(), Some(0.0));

    let missing = run(&["metrics", "--data", s(&f), "--obs-col", "obs", "--sim-col", "nope"]);
    assert_eq!(code(&missing), 1);
}

#[test]
fn plotdata_writes_curves_and_observations() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "50", "7");
    let out = dir.path().join("curves.csv");
    let o = run(&["plotdata", "--models", "original_fb,kan_fb", "--step", "0.1", "--data", s(&data), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "phi,original_fb,kan_fb");
    assert_eq!(text.lines().count(), 1 + 49);
    assert!(dir.path().join("curves_test.csv").exists());
    assert!(dir.path().join("curves_full.csv").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.csv");
    let o = run(&["evaluate", "--data", s(&missing), "--model", "kan_fb", "--out", s(dir.path())]);
    assert_eq!(code(&o), 3);

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "gauge_id,p_mm_yr,pet_mm_yr,qb_mm_yr,qd_mm_yr\na,-5,100,1,1\n").unwrap();
    let o = run(&["evaluate", "--data", s(&bad), "--model", "kan_fb", "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);

    assert_eq!(code(&run(&["evaluate", "--model", "kan_fb"])), 1);
    assert_eq!(code(&run(&["synth", "--formula", "kan_fb", "--n", "0", "--out", s(&dir.path().join("z.csv"))])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}
