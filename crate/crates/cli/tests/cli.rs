use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn narrative(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_narrative"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = narrative(dir.path(), &["synth", ".", "--families", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn full_run_then_reports_and_exports() {
    let dir = synth_dir();
    let d = dir.path();
    let o = narrative(d, &["run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("analytics: ran"));

    let again = narrative(d, &["run"]);
    assert!(again.status.success());
    assert!(!stderr(&again).contains(": ran"), "{}", stderr(&again));

    let graph = narrative(d, &["graph"]);
    assert!(graph.status.success());
    assert!(stdout(&graph).starts_with("digraph"));

    let stats = narrative(d, &["stats"]);
    assert!(stdout(&stats).starts_with("test,subject,n,m,statistic,p_value,alpha,decision"));

    let origin = narrative(d, &["origin"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&origin)).unwrap();
    assert!(v.get("topics").is_some());

    let eval = narrative(d, &["evaluate"]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let v: serde_json::Value = serde_json::from_str(&stdout(&eval)).unwrap();
    assert_eq!(v["topics"], 3);
    assert!(v["coherence"].is_number());

    let sweep = narrative(d, &["sweep"]);
    let lines: Vec<String> = stdout(&sweep).lines().map(String::from).collect();
    assert_eq!(lines[0], "threshold,mapped_fraction");
    assert_eq!(lines.len(), 5);
    let fracs: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(fracs.windows(2).all(|w| w[0] >= w[1]));

    let a = narrative(d, &["export", "--what", "topics", "--format", "json", "--dest", "t1.json"]);
    let b = narrative(d, &["export", "--what", "topics", "--format", "json", "--dest", "t2.json"]);
    assert!(a.status.success() && b.status.success());
    assert_eq!(fs::read(d.join("t1.json")).unwrap(), fs::read(d.join("t2.json")).unwrap());
}

#[test]
fn threshold_flag_reruns_match_only() {
    let dir = synth_dir();
    let d = dir.path();
    assert!(narrative(d, &["run"]).status.success());
    let o = narrative(d, &["--threshold", "0.5", "run"]);
    let err = stderr(&o);
    assert!(err.contains("embed: skipped") && err.contains("match: ran"), "{err}");
}

#[test]
fn precision_sample_and_score_round_trip() {
    let dir = synth_dir();
    let d = dir.path();
    assert!(narrative(d, &["run"]).status.success());
    let o = narrative(d, &["precision-sample", "--sheet", "sheet.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let unlabeled = narrative(d, &["precision-score", "--labels", "sheet.csv"]);
    assert_eq!(unlabeled.status.code(), Some(3));

    let text = fs::read_to_string(d.join("sheet.csv")).unwrap();
    let mut labeled: Vec<String> = text.lines().take(1).map(String::from).collect();
    for (i, line) in text.lines().skip(1).enumerate() {
        labeled.push(format!("{line}{}", if i % 4 == 0 { "incorrect" } else { "correct" }));
    }
    fs::write(d.join("labeled.csv"), labeled.join("\n") + "\n").unwrap();
    let scored = narrative(d, &["precision-score", "--labels", "labeled.csv"]);
    assert!(scored.status.success(), "{}", stderr(&scored));
    let v: serde_json::Value = serde_json::from_str(&stdout(&scored)).unwrap();
    assert_eq!(v["labeled"].as_u64().unwrap() as usize, labeled.len() - 1);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // no config file
    assert_eq!(narrative(d, &["run"]).status.code(), Some(2));

    fs::write(d.join("narrative.conf"), "articles = missing.jsonl\n").unwrap();
    assert_eq!(narrative(d, &["ingest"]).status.code(), Some(3));
    assert_eq!(narrative(d, &["--min-cluster-size", "1", "run"]).status.code(), Some(2));
    assert_eq!(narrative(d, &["export", "--what", "graph", "--format", "json"]).status.code(), Some(2));
    assert_eq!(narrative(d, &["export", "--what", "graph", "--format", "dot"]).status.code(), Some(3));
    assert_eq!(narrative(d, &["embed"]).status.code(), Some(3));

    fs::write(d.join("narrative.conf"), "articles = a.jsonl\nunknown = 1\n").unwrap();
    assert_eq!(narrative(d, &["run"]).status.code(), Some(2));
}

#[test]
fn out_flag_redirects_artifacts() {
    let dir = synth_dir();
    let d = dir.path();
    let o = narrative(d, &["--out", "elsewhere", "--dims", "3", "ingest"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("elsewhere").join("sentences.jsonl").exists());
    assert!(!d.join("out").exists());
}
