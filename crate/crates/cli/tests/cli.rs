use std::path::Path;
use std::process::{Command, Output};

fn convqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convqa"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = convqa(args);
    assert!(
        out.status.success(),
        "convqa {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["demo", "--dir", p(d)]);
    let config = d.join("config.toml");
    let bench = d.join("benchmark.jsonl");

    let out = ok(&["ingest", "--config", p(&config), "--out", p(&d.join("index.bin"))]);
    assert!(out.contains("indexed 30 evidence"));

    let index = d.join("index.bin");
    for name in ["run1.jsonl", "run2.jsonl"] {
        let table = ok(&[
            "run", "--config", p(&config), "--index", p(&index), "--benchmark", p(&bench),
            "--out", p(&d.join(name)), "--report", p(&d.join(format!("{name}.report.json"))),
        ]);
        assert!(table.contains("soccer") && table.lines().last().unwrap().starts_with("all"));
    }
    assert_eq!(
        std::fs::read(d.join("run1.jsonl")).unwrap(),
        std::fs::read(d.join("run2.jsonl")).unwrap()
    );
    assert_eq!(
        std::fs::read(d.join("run1.jsonl.report.json")).unwrap(),
        std::fs::read(d.join("run2.jsonl.report.json")).unwrap()
    );

    let eval_report = d.join("eval.json");
    ok(&["eval", "--run", p(&d.join("run1.jsonl")), "--report", p(&eval_report)]);
    assert_eq!(
        std::fs::read(&eval_report).unwrap(),
        std::fs::read(d.join("run1.jsonl.report.json")).unwrap()
    );
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&eval_report).unwrap()).unwrap();
    assert_eq!(report["turn_count"], 10);
    assert_eq!(report["p_at_1"], 1.0);

    // sampling insists on a seed
    let missing = convqa(&["sample", "--config", p(&config), "--benchmark", p(&bench), "--out", "x"]);
    assert!(!missing.status.success());

    let log = d.join("sample.jsonl");
    ok(&["sample", "--config", p(&config), "--seed", "42", "--benchmark", p(&bench), "--out", p(&log)]);
    let mined = ok(&["mine", "--log", p(&log), "--out-dir", p(&d.join("data"))]);
    assert!(mined.contains("qu") && mined.contains("erf") && mined.contains("ag"));
    for f in ["sft_qu.jsonl", "dpo_qu.jsonl", "sft_erf.jsonl", "dpo_erf.jsonl", "sft_ag.jsonl", "dpo_ag.jsonl", "manifest.json"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }
}

#[test]
fn bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["demo", "--dir", p(d)]);
    let config = d.join("config.toml");

    let bad = convqa(&["run", "--config", p(&config), "--k", "40", "--n", "30", "--benchmark", "b", "--out", "o"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("k <= n"));

    // a malformed benchmark line is skipped and flagged by the exit code
    let bench = d.join("benchmark.jsonl");
    let mut text = std::fs::read_to_string(&bench).unwrap();
    text.push_str("{not json\n");
    let broken = d.join("broken.jsonl");
    std::fs::write(&broken, text).unwrap();
    let out = convqa(&["run", "--config", p(&config), "--benchmark", p(&broken), "--out", p(&d.join("r.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"));
    assert!(d.join("r.jsonl").exists());
}
