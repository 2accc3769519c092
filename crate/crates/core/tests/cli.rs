use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn ccica(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccica")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = ccica(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_json(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn small_generation(domains: usize) -> Value {
    json!({ "n": 4, "n_s": 2, "domains": domains, "train_per_domain": 200, "test_per_domain": 100, "seed": 0 })
}

#[test]
fn generate_defaults_and_hash_stability() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let h1 = ok(&["generate", "--seed", "7", "--out", p(&a)]);
    let h2 = ok(&["generate", "--seed", "7", "--out", p(&b)]);
    assert_eq!(h1, h2);
    let side: Value = serde_json::from_str(&std::fs::read_to_string(a.join("data.json")).unwrap()).unwrap();
    assert_eq!(side["train_rows"], 10_000 * 5);
    assert_eq!(side["test_rows"], 1_000 * 5);
    assert_eq!(std::fs::read(a.join("data.csv")).unwrap(), std::fs::read(b.join("data.csv")).unwrap());
    let h3 = ok(&["generate", "--seed", "8", "--out", p(&dir.path().join("c"))]);
    assert_ne!(h1, h3);
}

#[test]
fn invalid_generation_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.json");
    let mut v = small_generation(3);
    v["n_s"] = json!(5);
    write_json(&cfg, &v);
    let out = ccica(&["generate", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_s"));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (gen, train) = (dir.path().join("gen.json"), dir.path().join("train.json"));
    write_json(&gen, &small_generation(2));
    write_json(&train, &json!({ "epochs": 2, "batch_size": 50, "memory": 32 }));
    let data = dir.path().join("data");
    ok(&["generate", "--config", p(&gen), "--out", p(&data)]);
    let run = dir.path().join("run");
    ok(&["train", "--data", p(&data), "--config", p(&train), "--regime", "continual-gem", "--out", p(&run)]);
    let mut cks: Vec<_> = std::fs::read_dir(run.join("checkpoints")).unwrap().map(|e| e.unwrap().file_name()).collect();
    cks.sort();
    assert_eq!(cks.len(), 2);
    let log = std::fs::read_to_string(run.join("training_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2 * 2);
    assert!(run.join("manifest.json").exists());
    let last = run.join("checkpoints").join(&cks[1]);
    let ev = dir.path().join("ev");
    let stdout = ok(&["eval", "--data", p(&data), "--checkpoint", p(&last), "--out", p(&ev)]);
    assert!(stdout.starts_with("MCC "));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    let mcc = report["mcc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mcc));
}

#[test]
fn ident_check_reports_degenerate_columns() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&[
        "ident-check", "--scenario", "repeated-partial", "--matrix", "lemma1", "--points", "50", "--out", p(dir.path()),
    ]);
    assert!(stdout.contains("dependent columns       2 and 4 at 50/50 points"), "{stdout}");
    assert!(dir.path().join("ident_report.json").exists());
}

#[test]
fn experiment_writes_per_seed_rows_and_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    write_json(
        &cfg,
        &json!({
            "scenario": "default",
            "generation": small_generation(2),
            "train": { "epochs": 1, "batch_size": 100, "memory": 32 },
            "regimes": ["continual-gem", "joint"],
            "seeds": [0, 1, 2],
            "evaluation": { "regression": { "epochs": 5 }, "save_checkpoints": false }
        }),
    );
    let out = dir.path().join("exp");
    ok(&["experiment", "--config", p(&cfg), "--out", p(&out)]);
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "regime,seed,train_domains,mcc,runtime_s");
    for regime in ["continual-gem", "joint"] {
        let rows: Vec<&&str> = lines.iter().filter(|l| l.starts_with(&format!("{regime},"))).collect();
        assert_eq!(rows.len(), 5, "{csv}");
        assert!(rows.iter().any(|l| l.starts_with(&format!("{regime},mean,"))));
        assert!(rows.iter().any(|l| l.starts_with(&format!("{regime},std,"))));
    }
    assert!(out.join("summary.json").exists());
    assert!(out.join("plots").join("mcc.svg").exists());
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    write_json(&cfg, &json!({ "scenario": "default", "generation": small_generation(2), "seeds": [0], "epoch": 3 }));
    let out = ccica(&["experiment", "--config", p(&cfg), "--out", p(&dir.path().join("x"))]);
    assert!(!out.status.success());
}
