use super::*;

fn call(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["gca"];
    full.extend_from_slice(args);
    let code = run(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

#[test]
fn generate_writes_manifest_with_presets() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let (code, _, err) = call(&[
        "generate", "--vars", "3", "--lag", "2", "--density", "0.3", "--length", "300", "--domains", "1,2",
        "--seed", "7", "--out", d,
    ]);
    assert_eq!(code, 0, "{err}");
    for f in ["domain_1.csv", "domain_2.csv", "ground_truth.json", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let m = Manifest::load(dir.path()).unwrap();
    let d2 = &m.domain(2).unwrap().config;
    assert_eq!((d2.noise, d2.sample_interval, d2.nonlinearity_c), (5.0, 2, 0.04));
    assert_eq!(read_series_csv(&dir.path().join("domain_2.csv")).unwrap().len(), 300);
}

#[test]
fn generate_overrides_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let (code, _, _) = call(&[
        "generate", "--vars", "2", "--length", "100", "--domains", "1", "--noise", "0.5", "--nonlinearity", "0",
        "--out", d,
    ]);
    assert_eq!(code, 0);
    let m = Manifest::load(dir.path()).unwrap();
    assert_eq!((m.domains[0].config.noise, m.domains[0].config.nonlinearity_c), (0.5, 0.0));

    let (code, _, err) = call(&["generate", "--vars", "3"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("--out") && err.contains("Usage"), "{err}");
    assert_eq!(call(&["generate", "--domains", "1,9", "--out", d]).0, EXIT_USAGE);
    assert_eq!(call(&["generate", "--domains", "1,2", "--noise", "1,2,3", "--out", d]).0, EXIT_USAGE);
    assert_eq!(call(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(call(&["--help"]).0, EXIT_OK);
}

#[test]
fn experiment_config_round_trips_with_flat_training_fields() {
    let json = r#"{
        "mode": "gca_r", "epochs": 4, "seed": 3,
        "data": {"kind": "manifest", "dir": "data", "source": 1, "target": 2},
        "out": "runs/a"
    }"#;
    let e: ExperimentConfig = serde_json::from_str(json).unwrap();
    assert_eq!((e.train.mode, e.train.epochs, e.train.window), (Mode::GcaR, 4, 30));
    assert_eq!(e.task_label(), "1->2");
    let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&e).unwrap()).unwrap();
    assert_eq!(back, e);
    let two_kinds = r#"{"data": {"kind": "nope"}, "out": "x"}"#;
    assert!(serde_json::from_str::<ExperimentConfig>(two_kinds).is_err());
}

#[test]
fn error_codes_follow_the_taxonomy() {
    assert_eq!(exit_code(&Error::InvalidArgument(String::new())), 2);
    assert_eq!(exit_code(&Error::UnstableSystem { step: 3 }), 3);
    assert_eq!(exit_code(&Error::Data(String::new())), 3);
    assert_eq!(exit_code(&Error::Numeric(String::new())), 4);
}

#[test]
fn train_rejects_conflicting_sources() {
    let (code, _, err) = call(&["train", "--data", "x", "--source-csv", "a.csv", "--target-csv", "b.csv", "--out", "r"]);
    assert_eq!(code, EXIT_USAGE, "{err}");
    let (code, _, _) = call(&["train", "--out", "r"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn eval_reports_parse_location_for_malformed_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("best.json");
    fs::write(&model, "{\n  \"epoch\": 1,\n  oops\n}").unwrap();
    let (code, _, err) = call(&["eval", "--model", model.to_str().unwrap(), "--data", dir.path().to_str().unwrap()]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("line 3"), "{err}");
    let (code, _, _) = call(&["eval", "--model", "/no/such/file.json", "--data", "."]);
    assert_eq!(code, EXIT_USAGE);
}
