mod common;

use std::path::Path;
use std::process::{Command, Output};

fn streamst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamst")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(streamst(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(streamst(&["train"]).status.code(), Some(2));
    assert_eq!(streamst(&["train", "--stage", "3"]).status.code(), Some(2));
    assert!(ok(&streamst(&["--help"])).contains("synthesize"));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = streamst(&["validate", dir.path().join("missing.jsonl").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "latency_multiplier = 0\n").unwrap();
    let out = streamst(&["translate", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn whole_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::mini_config(dir.path());
    let path = dir.path().join("run.toml");
    common::write_config(&cfg, &path);
    let c = path.to_str().unwrap();

    let toy: serde_json::Value = serde_json::from_str(&ok(&streamst(&["toy", "--config", c, "--json"]))).unwrap();
    assert_eq!(toy["train_recordings"], 5);
    let answers = cfg.data.data_dir.join("mock_answers.json");
    let synth = ok(&streamst(&["synthesize", "--config", c, "--mock-endpoint", answers.to_str().unwrap()]));
    assert!(synth.contains("segments"), "{synth}");

    let manifest = cfg.data.work_dir.join("manifest.jsonl");
    let v: serde_json::Value = serde_json::from_str(&ok(&streamst(&["validate", manifest.to_str().unwrap(), "--json"]))).unwrap();
    assert_eq!(v["failed"], 0);
    assert!(v["passed"].as_u64().unwrap() > 0);

    for stage in ["0", "1", "2"] {
        let out = ok(&streamst(&["train", "--config", c, "--stage", stage]));
        assert!(out.starts_with(&format!("stage {stage}:")), "{out}");
    }
    ok(&streamst(&["translate", "--config", c, "--latency-multiplier", "2"]));
    let report_path = dir.path().join("report.json");
    let r: serde_json::Value =
        serde_json::from_str(&ok(&streamst(&["evaluate", "--config", c, "--latency-multiplier", "2", "--json", "--output", report_path.to_str().unwrap()])))
            .unwrap();
    assert_eq!(r["latency_multiplier"], 2);
    assert!(r["stream_laal_ca_ms"].as_f64().unwrap() >= r["stream_laal_ms"].as_f64().unwrap());
    assert!(Path::new(&report_path).exists());

    // one corrupted record fails validation with exit code 1
    let text = std::fs::read_to_string(&manifest).unwrap();
    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, format!("{text}{{\"not\": \"a segment\"}}\n")).unwrap();
    let out = streamst(&["validate", broken.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
