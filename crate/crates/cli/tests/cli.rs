use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn optstop(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optstop")).arg("--out").arg(out).args(args).output().unwrap()
}

fn error_line(o: &Output) -> Value {
    let stderr = String::from_utf8(o.stderr.clone()).unwrap();
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON: {line:?} ({e})"))
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(optstop(dir.path(), &["bogus"]).status.code(), Some(2));
    assert_eq!(optstop(dir.path(), &["solve", "--grid", "many"]).status.code(), Some(2));
    let o = optstop(dir.path(), &["ingest"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"], "usage");
}

#[test]
fn domain_errors_exit_1_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&[&str], &str); 5] = [
        (&["simulate", "--policy", "nope"], "policy"),
        (&["simulate", "--policy", "threshold:1.5"], "policy"),
        (&["solve", "--grid", "10"], "solver"),
        (&["solve", "--set", "env.unknown=1"], "config"),
        (&["report"], "report"),
    ];
    for (args, kind) in cases {
        let o = optstop(&dir.path().join("x"), args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        let e = error_line(&o);
        assert_eq!(e["error"], kind, "{args:?}: {e}");
        assert!(e["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"sim.episodes": 40, "sim.policy": "oracle", "seed": 3}"#).unwrap();
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_optstop"))
        .args(["evaluate", "--episodes", "25", "--config"])
        .arg(&cfg)
        .env("OPTSTOP_OUTPUT_DIR", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(metrics["episodes"], 25);
    assert_eq!(metrics["detection_probability"], 1.0);
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(out.join("evaluate.json")).unwrap()).unwrap();
    assert_eq!(doc["config"]["seed"], 3);
    assert_eq!(doc["policy"], "oracle");
    assert!(out.join("meta.json").exists());
}
