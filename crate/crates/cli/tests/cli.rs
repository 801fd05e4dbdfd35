use std::path::Path;
use std::process::{Command, Output};

use muguide::io::{write_signals, SignalTable};
use muguide::{AcquisitionProtocol, ModelId, ParameterVector, Simulator};
use ndarray::Array2;

fn muguide(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_muguide")).args(args).output().expect("spawn muguide")
}

fn ok(args: &[&str]) -> Output {
    let o = muguide(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest_hash(dir: &Path) -> String {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    v["config_hash"].as_str().unwrap().to_string()
}

#[test]
fn simulate_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        ok(&["simulate", "--model", "standard_model", "--n", "50", "--seed", "11", "--snr", "50", "--out", s(d)]);
    }
    for f in ["dataset.theta.bin", "dataset.x.bin", "dataset.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("manifest.json").exists());
}

#[test]
fn usage_and_config_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let o = muguide(&["simulate", "--model", "ball_stick", "--n", "0", "--seed", "1", "--out", s(t.path())]);
    assert_eq!(o.status.code(), Some(2));

    let o = muguide(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let o = muguide(&["simulate", "--model", "ball_stick", "--n", "5", "--out", s(t.path())]);
    assert_eq!(o.status.code(), Some(2), "missing seed");

    let o = muguide(&["simulate", "--model", "ball_stick", "--n", "5", "--seed", "1", "--snr", "-3", "--out", s(t.path())]);
    assert_eq!(o.status.code(), Some(2), "negative snr");

    let o = muguide(&["compare", "--model", "ball_stick", "--seed", "1", "--checkpoint", "/nonexistent/model", "--out", s(t.path())]);
    assert_eq!(o.status.code(), Some(2), "missing checkpoint");
}

#[test]
fn corrupted_dataset_sidecar_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    let sim = t.path().join("sim");
    ok(&["simulate", "--model", "ball_stick", "--n", "20", "--seed", "3", "--out", s(&sim)]);
    std::fs::write(sim.join("dataset.json"), "{ not json").unwrap();
    let o = muguide(&["train", "--dataset", s(&sim.join("dataset")), "--seed", "3", "--out", s(&t.path().join("tr"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn manifest_hash_tracks_config() {
    let t = tempfile::tempdir().unwrap();
    let run = |name: &str, n: &str| {
        let d = t.path().join(name);
        ok(&["simulate", "--model", "ball_stick", "--n", n, "--seed", "5", "--out", s(&d)]);
        manifest_hash(&d)
    };
    let a = run("a", "10");
    let c = run("c", "12");
    assert_eq!(a.len(), 64);
    assert_ne!(a, c);
    assert_eq!(run("a", "10"), a);
}

#[test]
fn train_then_infer_ball_stick() {
    let t = tempfile::tempdir().unwrap();
    let sim_dir = t.path().join("sim");
    let tr = t.path().join("tr");
    ok(&["simulate", "--model", "ball_stick", "--n", "20000", "--seed", "21", "--out", s(&sim_dir)]);
    let o = ok(&["train", "--dataset", s(&sim_dir.join("dataset")), "--seed", "21", "--max-epochs", "25", "--out", s(&tr)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("final validation loss"));

    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tr.join("training.json")).unwrap()).unwrap();
    let epochs = report["epochs"].as_array().unwrap().len();
    let csv = std::fs::read_to_string(tr.join("training.csv")).unwrap();
    assert_eq!(csv.lines().count(), epochs + 1);
    muguide_harness::Pipeline::load(tr.join("model")).unwrap();

    let simulator = Simulator::with_default_quadrature(
        muguide::ParameterSpace::for_model(ModelId::BallStick),
        AcquisitionProtocol::reference_multishell(),
    )
    .unwrap();
    let truth = ParameterVector::new(vec![0.6, 2.0, 1.0], [0.0, 0.0, 1.0]);
    let clean = simulator.simulate(&truth).unwrap();
    let m = clean.len();
    let mut rows = Array2::<f64>::zeros((3, m));
    rows.row_mut(0).assign(&ndarray::Array1::from(clean.clone()));
    rows.row_mut(2).assign(&ndarray::Array1::from(clean.iter().map(|v| 250.0 * v).collect::<Vec<_>>()));
    let signals = t.path().join("signals.csv");
    write_signals(&signals, &SignalTable { protocol: None, signals: rows }).unwrap();

    let inf = t.path().join("inf");
    ok(&["infer", "--checkpoint", s(&tr.join("model")), "--signals", s(&signals), "--seed", "4", "--samples", "5000", "--out", s(&inf)]);
    let mut rdr = csv::Reader::from_path(inf.join("summary.csv")).unwrap();
    let header = rdr.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    let errors = header.iter().position(|h| h == "errors").unwrap();
    assert_eq!(&rows[0][errors], "");
    assert_eq!(&rows[1][errors], "b0_not_positive");
    assert_eq!(&rows[2][errors], "");

    let f_map = header.iter().position(|h| h == "f_in_map").unwrap();
    for r in [&rows[0], &rows[2]] {
        let f: f64 = r[f_map].parse().unwrap();
        assert!((f - 0.6).abs() < 0.1, "f_in MAP {f}");
    }
}

#[test]
fn compare_writes_reports() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"mcmc": {"n_samples": 1400, "burn_in": 200, "thinning": 1}, "harness": {"n_samples": 1200}}"#,
    )
    .unwrap();
    let out = t.path().join("cmp");
    ok(&[
        "compare", "--config", s(&cfg), "--model", "ball_stick", "--snr", "50", "--seed", "9", "--n", "2", "--n-train", "2000",
        "--max-epochs", "2", "--out", s(&out),
    ]);
    for f in ["comparison.json", "comparison.csv", "bias_histograms.svg", "model.flow", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
}
