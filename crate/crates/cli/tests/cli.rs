use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn write_config(root: &Path, extra: &str) -> PathBuf {
    let path = root.join("cfg.json");
    let text = format!(
        r#"{{"paths": {{"data_dir": "{d}/data", "cache_dir": "{d}/cache", "out_dir": "{d}/out"}},
            "seed": 1, "synth": {{"n": 80}},
            "model": {{"ingest_filters": 4, "block_filters": [4, 4, 8, 8], "kernel": 8, "input_len": 2500, "head_hidden": 8}},
            "train": {{"max_epochs": 2}}{extra}}}"#,
        d = root.display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn leadi(cfg: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_leadi"))
        .arg("--config")
        .arg(cfg)
        .args(args)
        .env_remove("LEADI_DATA_DIR")
        .env_remove("LEADI_CACHE_DIR")
        .env_remove("LEADI_OUT_DIR")
        .env("RUST_LOG", "info")
        .output()
        .unwrap();
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn full_run_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut reports = Vec::new();
    for dir in [&a, &b] {
        let cfg = write_config(dir.path(), "");
        let o = leadi(&cfg, &["run"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let out = dir.path().join("out");
        for f in ["manifest.json", "split.json", "ingest.json", "eval.json", "models/qt.ckpt", "models/prchk.log.jsonl", "predictions/baseline.json"] {
            assert!(out.join(f).exists(), "missing {f}");
        }
        reports.push((std::fs::read(out.join("report.json")).unwrap(), std::fs::read(out.join("report.txt")).unwrap()));
    }
    assert_eq!(reports[0], reports[1]);

    // the config hash is the same in both directories since paths are excluded
    let cfg = write_config(a.path(), "");
    let hash = |dir: &Path| {
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("out/split.json")).unwrap()).unwrap();
        v["config_hash"].as_str().unwrap().to_string()
    };
    assert_eq!(hash(a.path()), hash(b.path()));

    let lines = std::fs::read_to_string(a.path().join("out/predictions/baseline.fiducials.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first["config_hash"].as_str().unwrap(), hash(a.path()));
    assert!(first["delineation"]["beats"].as_array().is_some_and(|b| !b.is_empty()));

    // a different seed changes the hash, and stale artifacts are refused
    let o = leadi(&cfg, &["--seed", "9", "eval"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    assert!(stderr(&o).contains("hash"));
    let o = leadi(&cfg, &["--seed", "9", "--force", "eval"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = leadi(&cfg, &["train", "--task", "pr"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("excluded") && err.contains("without an identifiable P wave"), "{err}");
}

#[test]
fn invalid_config_exits_2_with_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "split": {"train": 0.5, "validation": 0.1, "holdout": 0.1}"#);
    let o = leadi(&cfg, &["--json", "split"]);
    assert_eq!(o.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["exit_code"], 2);
    assert!(v["error"].as_str().unwrap().contains("split"));

    std::fs::write(&cfg, r#"{"modle": {}}"#).unwrap();
    assert_eq!(leadi(&cfg, &["split"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = leadi(&cfg, &["ingest"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = leadi(&cfg, &["eval"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn out_flag_and_env_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    assert!(leadi(&cfg, &["synth"]).status.success());
    let alt = dir.path().join("alt");
    let o = leadi(&cfg, &["--out", alt.to_str().unwrap(), "--json", "ingest"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["kept"], 80);
    assert!(alt.join("ingest.json").exists());
    assert!(!dir.path().join("out/ingest.json").exists());

    let env_out = dir.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_leadi"))
        .arg("--config")
        .arg(&cfg)
        .arg("ingest")
        .env("LEADI_OUT_DIR", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(env_out.join("ingest.json").exists());
}
