use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adapt-asr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write(path: &Path, text: &str) -> String {
    std::fs::write(path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn small_corpus(dir: &Path) -> String {
    let spec = write(
        &dir.join("spec.json"),
        r#"{"n_source": 30, "n_target": 60, "n_eval_source": 6, "n_eval_target": 6}"#,
    );
    let data = dir.join("data");
    ok(&["gen-data", "--spec", &spec, "--out", data.to_str().unwrap()]);
    data.to_str().unwrap().to_owned()
}

#[test]
fn experiment_writes_identical_reports_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_corpus(dir.path());
    let cfg = write(
        &dir.path().join("cfg.json"),
        r#"{"train": {"steps": 2}, "pretrain": {"steps": 2}, "teacher_train": {"steps": 2}, "confidence_threshold": 0.0}"#,
    );
    let mut csvs = Vec::new();
    for run_dir in ["a", "b"] {
        let out = dir.path().join(run_dir);
        let printed = ok(&[
            "experiment", "--preset", "table4", "--corpus", &data, "--out", out.to_str().unwrap(), "--config", &cfg,
            "--seed", "3",
        ]);
        let csv = std::fs::read_to_string(out.join("table4.csv")).unwrap();
        assert_eq!(printed, csv);
        assert_eq!(csv.lines().count(), 3);
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("table4.json")).unwrap()).unwrap();
        assert_eq!(json["reports"].as_array().unwrap().len(), 2);
        csvs.push(csv);
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn stages_chain_through_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_corpus(dir.path());
    let out = dir.path().join("runs");
    let out_s = out.to_str().unwrap();
    let cfg = write(
        &dir.path().join("w2v.json"),
        r#"{"algorithm": "selfsup_pretrain_finetune", "train": {"steps": 2}, "pretrain": {"steps": 2}}"#,
    );
    ok(&["pretrain", "--corpus", &data, "--out", out_s, "--config", &cfg]);
    let ckpt = out.join("pretrain.ckpt");
    ok(&["train", "--corpus", &data, "--out", out_s, "--config", &cfg, "--pretrained", ckpt.to_str().unwrap()]);

    let student = out.join("student.ckpt");
    let printed = ok(&["eval", "--ckpt", student.to_str().unwrap(), "--corpus", &data, "--split", "eval_MF"]);
    let wer: serde_json::Value = serde_json::from_str(&printed).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("train.json")).unwrap()).unwrap();
    assert_eq!(wer, report["reports"][0]["wer_target"]);

    let nst = write(
        &dir.path().join("nst.json"),
        r#"{"algorithm": "semisup_nst", "data_split": "MD_3p", "teacher_train": {"steps": 2}, "confidence_threshold": 0.0}"#,
    );
    ok(&["pseudo-label", "--corpus", &data, "--out", out_s, "--config", &nst]);
    let manifest = std::fs::read_to_string(out.join("pseudo_labels.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 60 - 2);
    assert!(out.join("teacher.ckpt").exists());
}

#[test]
fn contract_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_corpus(dir.path());
    let out = dir.path().join("runs");
    let out_s = out.to_str().unwrap();

    let bad = write(&dir.path().join("bad.json"), r#"{"confidence_threshold": 1.5}"#);
    assert!(!run(&["train", "--corpus", &data, "--out", out_s, "--config", &bad]).status.success());

    let causal_w2v2 = write(
        &dir.path().join("w2v2.json"),
        r#"{"algorithm": "selfsup_pretrain_finetune", "selfsup": {"kind": "wav2vec2"}}"#,
    );
    assert!(!run(&["pretrain", "--corpus", &data, "--out", out_s, "--config", &causal_w2v2]).status.success());

    let strict = write(
        &dir.path().join("strict.json"),
        r#"{"algorithm": "semisup_nst", "data_split": "MD_3p", "teacher_train": {"steps": 0}, "confidence_threshold": 1.0}"#,
    );
    let failed = run(&["pseudo-label", "--corpus", &data, "--out", out_s, "--config", &strict]);
    assert!(!failed.status.success());
    assert!(String::from_utf8_lossy(&failed.stderr).contains("lower the threshold"));

    assert!(!run(&["experiment", "--preset", "table9", "--corpus", &data, "--out", out_s]).status.success());
    assert!(!run(&["eval", "--ckpt", "missing.ckpt", "--corpus", &data]).status.success());
    assert!(!run(&["train", "--corpus", dir.path().join("nope").to_str().unwrap(), "--out", out_s]).status.success());
}
