mod common;

use std::path::Path;
use std::process::{Command, Output};

use gca::data::io::{read_json, write_json, write_series_csv};
use gca::metrics::EvalReport;
use gca::trainer::Checkpoint;

fn gca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gca"))
        .args(args)
        .env("GCA_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn generate(dir: &Path) {
    ok(&gca(&[
        "generate", "--vars", "3", "--lag", "2", "--density", "0.4", "--length", "600", "--domains", "1,2",
        "--seed", "5", "--out", dir.to_str().unwrap(),
    ]));
}

fn train(data: &Path, run: &Path, mode: &str) -> String {
    ok(&gca(&[
        "train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(), "--mode", mode,
        "--max-lag", "2", "--window", "14", "--horizon", "3", "--n-predict", "6", "--epochs", "3",
        "--batch-size", "32", "--max-steps-per-epoch", "5", "--seed", "9", "--lr", "0.005",
    ]))
}

#[test]
fn generate_train_eval_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let log = train(&data, &a, "gca");
    train(&data, &b, "gca");
    assert!(log.lines().next().unwrap().starts_with("epoch=0 total="), "{log}");
    assert!(log.contains("best_epoch="));
    assert_eq!(common::read(&a.join("history.csv")), common::read(&b.join("history.csv")));
    assert_eq!(common::read(&a.join("best.json")), common::read(&b.join("best.json")));
    for f in ["config.json", "experiment.json", "checkpoints/epoch_2.json", "structures/summary.csv", "structures/lag_2.csv"] {
        assert!(a.join(f).exists(), "{f}");
    }

    let model = a.join("best.json");
    let gt = data.join("ground_truth.json");
    let with_gt = ok(&gca(&[
        "eval", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap(), "--ground-truth",
        gt.to_str().unwrap(),
    ]));
    assert!(with_gt.lines().any(|l| l.starts_with("mse=")));
    assert!(with_gt.lines().any(|l| l.starts_with("auprc=")), "{with_gt}");
    let report: EvalReport = read_json(&a.join("eval.json")).unwrap();
    assert_eq!(report.task.as_deref(), Some("1->2"));

    let plain = ok(&gca(&["eval", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap()]));
    assert!(!plain.contains("auprc="));
    let again = ok(&gca(&["eval", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap()]));
    assert_eq!(plain, again);

    let sdir = tmp.path().join("export");
    let listed = ok(&gca(&[
        "export-structure", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out",
        sdir.to_str().unwrap(),
    ]));
    assert_eq!(listed.lines().count(), 4, "{listed}");
    let exported: gca::metrics::StructureExport = read_json(&sdir.join("structures.json")).unwrap();
    assert_eq!(exported.threshold, 0.5);
    assert_eq!(exported.adjacency.len(), 2);
}

#[test]
fn ablation_and_baseline_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data);
    let r = tmp.path().join("r");
    train(&data, &r, "gca_r");
    let best: Checkpoint = read_json(&r.join("best.json")).unwrap();
    assert_eq!(best.train_config.hyper().gamma, 0.0);
    let hist = common::read(&r.join("history.csv"));
    let l_r: f64 = hist.lines().nth(1).unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert!(l_r > 0.0);

    let base = tmp.path().join("base");
    train(&data, &base, "baseline");
    assert!(base.join("best.json").exists());
    assert!(!base.join("structures").exists());
    let out = gca(&[
        "export-structure", "--model", base.join("best.json").to_str().unwrap(), "--data",
        data.to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_drives_training() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = serde_json::json!({
        "mode": "gca_e", "max_lag": 1, "window": 10, "horizon": 2, "n_predict": 4, "epochs": 2,
        "batch_size": 16, "max_steps_per_epoch": 3, "seed": 4,
        "data": {
            "kind": "synthetic", "vars": 2, "lag": 1, "density": 0.7, "length": 300, "seed": 2,
            "source": {"domain_id": 1, "noise": 1.0, "sample_interval": 1, "nonlinearity_c": 0.02},
            "target": {"domain_id": 3, "noise": 10.0, "sample_interval": 3, "nonlinearity_c": 0.06}
        },
        "out": run,
        "task": "1->3"
    });
    let path = tmp.path().join("cfg.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    ok(&gca(&["train", "--config", path.to_str().unwrap()]));
    let best: Checkpoint = read_json(&run.join("best.json")).unwrap();
    assert_eq!((best.source_domain, best.target_domain), (1, 3));
    assert_eq!(best.train_config.hyper().lambda, 0.0);
    let report: EvalReport = read_json(&run.join("test_report.json")).unwrap();
    assert_eq!(report.task.as_deref(), Some("1->3"));
    assert!(report.auprc.is_some());
}

#[test]
fn oracle_model_evaluates_below_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("flip.csv");
    write_series_csv(&csv, &common::flip_series(500)).unwrap();
    let model = tmp.path().join("oracle.json");
    write_json(&model, &common::oracle_checkpoint(12, 4)).unwrap();
    let out = ok(&gca(&["eval", "--model", model.to_str().unwrap(), "--data", csv.to_str().unwrap()]));
    let mse: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("mse="))
        .expect("mse line")
        .parse()
        .unwrap();
    assert!(mse < 1e-3, "{mse}");
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gca(&["generate", "--vars", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{\"epoch\": 0,\n\"model\": [}").unwrap();
    let out = gca(&["eval", "--model", bad.to_str().unwrap(), "--data", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"), "{}", String::from_utf8_lossy(&out.stderr));

    // Weights far beyond the stable range blow the simulation up.
    let out = gca(&[
        "generate", "--vars", "4", "--density", "1", "--weight-scale", "1e9", "--length", "100", "--out",
        tmp.path().join("g").to_str().unwrap(),
    ]);
    assert!(matches!(out.status.code(), Some(0) | Some(3)));

    let data = tmp.path().join("data");
    generate(&data);
    let out = gca(&[
        "train", "--data", data.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap(),
        "--max-lag", "2", "--window", "14", "--horizon", "3", "--n-predict", "6", "--epochs", "1",
        "--lr", "1e300",
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
