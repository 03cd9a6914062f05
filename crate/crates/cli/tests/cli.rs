use std::path::Path;
use std::process::{Command, Output};

fn oodlens(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oodlens"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn error_kind(out: &Output) -> String {
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    v["error"].as_str().unwrap().to_string()
}

const SPEC: &str = r#"{"n_per_class": 200, "dim": 6,
    "class_means": [[3,0,0,0,0,0],[-3,0,0,0,0,0]],
    "cov": {"kind": "planted", "signal_dims": 6, "signal_gap": 6, "noise_scale": 1}}"#;

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn synth_eval_config(methods: &str) -> String {
    format!(r#"{{"seed": 5, "data": {{"kind": "synth", "spec": {SPEC}}}, "methods": {methods}}}"#)
}

#[test]
fn unknown_method_exits_2() {
    let d = tempfile::tempdir().unwrap();
    write(
        d.path(),
        "c.json",
        &synth_eval_config(r#"[{"name": "bogus"}]"#),
    );
    let out = oodlens(&["eval", "--config", "c.json", "--out-dir", "o"], d.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "ConfigInvalid");
    assert!(!d.path().join("o/report.json").exists());
}

#[test]
fn missing_input_exits_3() {
    let d = tempfile::tempdir().unwrap();
    let out = oodlens(
        &["score", "--method", "msp", "--features", "nope.oodt"],
        d.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_kind(&out), "IoFailure");
}

#[test]
fn bad_thread_count_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_oodlens"))
        .args(["typicality", "--n", "10", "--dim", "3"])
        .env("OODLENS_THREADS", "zero")
        .current_dir(d.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_is_byte_deterministic() {
    let d = tempfile::tempdir().unwrap();
    write(
        d.path(),
        "c.json",
        &synth_eval_config(r#"[{"name": "msp"}, {"name": "maha"}]"#),
    );
    for o in ["a", "b"] {
        let out = Command::new(env!("CARGO_BIN_EXE_oodlens"))
            .args(["eval", "--config", "c.json", "--out-dir", o])
            .env("OODLENS_THREADS", if o == "a" { "1" } else { "4" })
            .current_dir(d.path())
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let read = |p: &str| std::fs::read(d.path().join(p)).unwrap();
    assert_eq!(read("a/report.json"), read("b/report.json"));
    assert_eq!(read("a/report.csv"), read("b/report.csv"));
    let csv = String::from_utf8(read("a/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let maha = csv.lines().find(|l| l.starts_with("maha,")).unwrap();
    let auroc: f64 = maha.split(',').nth(2).unwrap().parse().unwrap();
    assert!(auroc >= 0.95);
    let manifest: serde_json::Value = serde_json::from_slice(&read("a/manifest.json")).unwrap();
    assert!(manifest["timings"].as_array().unwrap().len() >= 3);
    assert_eq!(manifest["seed"], 5);
}

#[test]
fn seed_flag_changes_the_run() {
    let d = tempfile::tempdir().unwrap();
    write(
        d.path(),
        "c.json",
        &synth_eval_config(r#"[{"name": "msp"}]"#),
    );
    assert!(
        oodlens(&["eval", "--config", "c.json", "--out-dir", "a"], d.path())
            .status
            .success()
    );
    assert!(oodlens(
        &[
            "eval",
            "--config",
            "c.json",
            "--out-dir",
            "b",
            "--seed",
            "6"
        ],
        d.path()
    )
    .status
    .success());
    let read = |p: &str| std::fs::read(d.path().join(p)).unwrap();
    assert_ne!(read("a/report.json"), read("b/report.json"));
}

#[test]
fn empty_method_list_writes_header_only_csv() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "c.json", &synth_eval_config("[]"));
    assert!(
        oodlens(&["eval", "--config", "c.json", "--out-dir", "o"], d.path())
            .status
            .success()
    );
    let csv = std::fs::read_to_string(d.path().join("o/report.csv")).unwrap();
    assert_eq!(
        csv,
        "method,ood_set,auroc,fpr_at_tpr,tpr_target,n_id,n_ood\n"
    );
}

#[test]
fn synth_then_file_eval_and_score() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "spec.json", SPEC);
    let out = oodlens(
        &[
            "synth",
            "--config",
            "spec.json",
            "--logits",
            "--out-dir",
            "data",
        ],
        d.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let cfg = r#"{"data": {"kind": "files",
        "train": {"features": "data/train_features.oodt", "labels": "data/train_labels.oodt", "logits": "data/train_logits.oodt"},
        "id_eval": {"features": "data/heldout_features.oodt", "logits": "data/heldout_logits.oodt"},
        "ood": [{"name": "a", "features": "data/ood_features.oodt", "logits": "data/ood_logits.oodt"},
                {"name": "b", "features": "data/ood_features.oodt", "logits": "data/ood_logits.oodt"}]},
        "methods": [{"name": "energy"}, {"name": "rel_maha"}, {"name": "hybrid_add"}]}"#;
    write(d.path(), "c.json", cfg);
    let out = oodlens(&["eval", "--config", "c.json", "--out-dir", "o"], d.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(d.path().join("o/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);

    let out = oodlens(
        &[
            "score",
            "--method",
            "energy",
            "--temperature",
            "2",
            "--features",
            "data/ood_features.oodt",
            "--logits",
            "data/ood_logits.oodt",
            "--out-dir",
            "s",
        ],
        d.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let scores = std::fs::read_to_string(d.path().join("s/scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 400);
}

#[test]
fn missing_logits_are_config_invalid() {
    let d = tempfile::tempdir().unwrap();
    let cfg = r#"{"data": {"kind": "files", "train": {"features": "x"}, "id_eval": {"features": "y"},
        "ood": [{"name": "a", "features": "z"}]}, "methods": [{"name": "msp"}]}"#;
    write(d.path(), "c.json", cfg);
    let out = oodlens(&["eval", "--config", "c.json"], d.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_checkpoints_are_reproducible() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "spec.json", SPEC);
    assert!(oodlens(
        &["synth", "--config", "spec.json", "--out-dir", "data"],
        d.path()
    )
    .status
    .success());
    write(d.path(), "t.json", r#"{"epochs": 20}"#);
    for o in ["a", "b"] {
        let out = oodlens(
            &[
                "train",
                "--config",
                "t.json",
                "--train-features",
                "data/train_features.oodt",
                "--train-labels",
                "data/train_labels.oodt",
                "--eval-features",
                "data/ood_features.oodt",
                "--out-dir",
                o,
            ],
            d.path(),
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for f in [
        "layer0_weight.oodt",
        "layer1_bias.oodt",
        "eval_logits.oodt",
        "loss_trace.csv",
    ] {
        let a = std::fs::read(d.path().join("a").join(f)).unwrap();
        let b = std::fs::read(d.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let trace = std::fs::read_to_string(d.path().join("a/loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 21);
}

#[test]
fn bad_train_config_exits_2() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "spec.json", SPEC);
    assert!(oodlens(
        &["synth", "--config", "spec.json", "--out-dir", "data"],
        d.path()
    )
    .status
    .success());
    write(d.path(), "t.json", r#"{"step_size": -1}"#);
    let out = oodlens(
        &[
            "train",
            "--config",
            "t.json",
            "--train-features",
            "data/train_features.oodt",
            "--train-labels",
            "data/train_labels.oodt",
        ],
        d.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_documents_csv_columns() {
    let d = tempfile::tempdir().unwrap();
    let out = oodlens(&["--help"], d.path());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("method,ood_set,auroc,fpr_at_tpr,tpr_target,n_id,n_ood"));
    assert!(text.contains("OODLENS_THREADS"));
}

#[test]
fn experiment_tables_have_expected_shape() {
    let d = tempfile::tempdir().unwrap();
    assert!(
        oodlens(&["toy1d", "--mu=-1,0,1", "--out-dir", "t"], d.path())
            .status
            .success()
    );
    let t = std::fs::read_to_string(d.path().join("t/toy1d.csv")).unwrap();
    assert_eq!(t.lines().count(), 4);
    assert!(oodlens(&["gmm-interp", "--out-dir", "g"], d.path())
        .status
        .success());
    let g = std::fs::read_to_string(d.path().join("g/gmm_interp.csv")).unwrap();
    assert_eq!(g.lines().count(), 12);
    assert!(oodlens(
        &["typicality", "--n", "50", "--dim", "4", "--out-dir", "y"],
        d.path()
    )
    .status
    .success());
    let y = std::fs::read_to_string(d.path().join("y/typicality.csv")).unwrap();
    assert!(y.lines().last().unwrap().ends_with(",true"));
    assert!(oodlens(&["transfer", "--out-dir", "x"], d.path())
        .status
        .success());
    let x = std::fs::read_to_string(d.path().join("x/transfer.csv")).unwrap();
    assert_eq!(x.lines().count(), 3);
}
