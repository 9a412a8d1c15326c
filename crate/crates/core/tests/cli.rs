use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use assemai::gateway::{DetectionRecord, LogEntry};
use assemai::ontology::{verify, OntologySpec};
use assemai::types::{AnomalyClass, BoundingBox, CycleState};

fn assemai(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_assemai"));
    c.args(args).env_remove("ASSEMAI_SEED");
    if let Some(s) = seed_env {
        c.env("ASSEMAI_SEED", s);
    }
    c.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn perfect_prediction_fixture_reports_full_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("preds.jsonl");
    let mut text = String::new();
    for c in AnomalyClass::ALL {
        for _ in 0..3 {
            text.push_str(&format!("{{\"label\":{0},\"predicted\":{0}}}\n", c.index()));
        }
    }
    fs::write(&preds, text).unwrap();
    let out = dir.path().join("out");
    let o = assemai(&["--out", p(&out), "eval", "--predictions", p(&preds)], None);
    assert!(o.status.success(), "{o:?}");
    let s = stdout(&o);
    let weighted = s.lines().find(|l| l.starts_with("weighted")).unwrap();
    assert!(weighted.contains("100.00%"), "{s}");
    for f in ["metrics.json", "metrics.txt"] {
        assert!(s.contains(p(&out.join(f))), "{f} not reported:\n{s}");
    }
}

#[test]
fn verify_counts_injected_violations() {
    let spec = OntologySpec::default_spec();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("detections.jsonl");
    let rec = |i: u64, state: u8, class: AnomalyClass| {
        let state = CycleState::new(state).unwrap();
        LogEntry::Detection(DetectionRecord {
            ts_ms: i,
            cycle_index: i / 2 + 1,
            cycle_state: state,
            predicted_class: class,
            probs: [0.2; 5],
            bbox: BoundingBox::new(1, 1, 9, 9).unwrap(),
            verdict: verify(state, class, &spec),
            latency_ms: 3.0,
            model_id: "fixture".into(),
        })
        .to_line()
    };
    let mut text = String::new();
    for i in 0..10 {
        text.push_str(&rec(2 * i, 4, AnomalyClass::NoAnomaly));
        text.push_str(&rec(2 * i + 1, 9, AnomalyClass::NoNose));
    }
    for i in 0..3 {
        text.push_str(&rec(100 + i, 4, AnomalyClass::NoNose));
    }
    fs::write(&log, text).unwrap();
    let out = dir.path().join("out");
    let o = assemai(&["--out", p(&out), "verify", "--log", p(&log)], None);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).lines().any(|l| l == "NoNose: 3 out of 13 inconsistent"), "{}", stdout(&o));
    let audit: serde_json::Value = serde_json::from_slice(&fs::read(out.join("audit.json")).unwrap()).unwrap();
    assert_eq!(audit["records"], 23);
}

#[test]
fn usage_errors_exit_one_and_print_usage() {
    for args in [&["frobnicate"][..], &["gen", "--no-such-flag"], &["eval"], &["train"]] {
        let o = assemai(args, None);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"), "{args:?}");
    }
    let o = assemai(&["--help"], None);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("plc-serve"));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("missing.jsonl");
    for args in [
        vec!["--out", p(&out), "preprocess", "--input", p(&missing)],
        vec!["--out", p(&out), "verify", "--log", p(&missing)],
        vec!["--out", p(&out), "gen", "--count", "0"],
    ] {
        let o = assemai(&args, None);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = assemai(&["--out", p(&out), "gen", "--count", "5"], Some("not-a-number"));
    assert_eq!(o.status.code(), Some(2));
    let bad_config = dir.path().join("cfg.json");
    fs::write(&bad_config, r#"{"gen": {"total_cnt": 5}}"#).unwrap();
    let o = assemai(&["--config", p(&bad_config), "--out", p(&out), "gen"], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_precedence_flag_then_env_then_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"gen": {"total_count": 6, "seed": 3}}"#).unwrap();
    let run = |name: &str, extra: &[&str], env: Option<&str>| {
        let out = dir.path().join(name);
        let mut args = vec!["--config", p(&cfg), "--out", p(&out)];
        args.extend_from_slice(extra);
        args.push("gen");
        let o = assemai(&args, env);
        assert!(o.status.success(), "{o:?}");
        fs::read(out.join("manifest.jsonl")).unwrap()
    };
    let from_config = run("cfg", &[], None);
    let from_env = run("env", &[], Some("9"));
    let from_flag = run("flag", &["--seed", "9"], Some("3"));
    let config_again = run("cfg2", &["--seed", "3"], Some("9"));
    assert_eq!(from_env, from_flag);
    assert_eq!(from_config, config_again);
    assert_ne!(from_config, from_env);
}

fn tree_digest(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.display().to_string(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn smoke_chain_on_500_images() {
    let dir = tempfile::tempdir().unwrap();
    let (g, pre, run) = (dir.path().join("gen"), dir.path().join("pre"), dir.path().join("run"));
    let ok = |args: &[&str]| {
        let o = assemai(args, None);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    ok(&["--seed", "21", "--out", p(&g), "gen", "--count", "500"]);
    let gen_before = tree_digest(&g);
    let gen_manifest = g.join("manifest.jsonl");
    ok(&["--out", p(&pre), "preprocess", "--input", p(&gen_manifest)]);
    assert_eq!(tree_digest(&g), gen_before, "preprocess modified its input");

    let m = pre.join("manifest.jsonl");
    let s = ok(&["--seed", "21", "--out", p(&run), "train", "--input", p(&m), "--epochs", "4", "--input-size", "32x32"]);
    assert!(s.contains("model.bin"), "{s}");
    let model = run.join("model.bin");
    let split = run.join("split.json");
    let pre_before = tree_digest(&pre);
    ok(&["--out", p(&run), "eval", "--input", p(&m), "--model", p(&model), "--split", p(&split)]);
    ok(&["--out", p(&run), "explain", "--input", p(&m), "--model", p(&model), "--split", p(&split), "--limit", "6"]);
    assert_eq!(tree_digest(&pre), pre_before, "eval/explain modified their input");
    ok(&["--out", p(&run), "verify", "--log", p(&run.join("detections.jsonl"))]);
    let s = ok(&["--out", p(&run), "report"]);
    assert!(s.contains("report.txt"), "{s}");

    let heatmaps = fs::read_dir(run.join("heatmaps")).unwrap().count();
    assert_eq!(heatmaps, 6);
    let split: serde_json::Value = serde_json::from_slice(&fs::read(&split).unwrap()).unwrap();
    assert_eq!(split["train"].as_array().unwrap().len() + split["test"].as_array().unwrap().len(), 500);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    for key in ["metrics", "history", "saliency", "audit"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["support"], 100);
}
