mod common;

use std::fs;

use common::{ok, pathgen, pipeline, stage};

#[test]
fn pipeline_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path(), "2");
    for name in [
        "paths.jsonl.run.json",
        "gen.ckpt",
        "gen.ckpt.report.json",
        "gen.jsonl",
        "scorer.ckpt",
        "paths.report.json",
        "qa.ckpt",
        "qa.ckpt.predictions.jsonl",
        "qa.ckpt.predictions.jsonl.run.json",
    ] {
        assert!(first.contains_key(name), "missing {name}; have {:?}", first.keys());
    }
    let second = pipeline(b.path(), "2");
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (name, bytes) in &first {
        assert!(bytes == &second[name], "{name} differs between runs");
    }
}

#[test]
fn sampling_ignores_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    stage(dir.path());
    for n in ["1", "3"] {
        let out = format!("paths{n}.jsonl");
        ok(dir.path(), &["--threads", n, "sample-paths", "--kg", "kg.tsv", "--count-per-hop", "300", "--out", &out]);
    }
    let one = fs::read(dir.path().join("paths1.jsonl")).unwrap();
    assert!(!one.is_empty());
    assert_eq!(one, fs::read(dir.path().join("paths3.jsonl")).unwrap());
}

#[test]
fn run_record_holds_resolved_settings() {
    let dir = tempfile::tempdir().unwrap();
    stage(dir.path());
    ok(
        dir.path(),
        &["--seed", "3", "sample-paths", "--kg", "kg.tsv", "--hops", "2", "--count-per-hop", "5", "--out", "p.jsonl"],
    );
    let rec: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("p.jsonl.run.json")).unwrap()).unwrap();
    assert_eq!(rec["command"], "sample-paths");
    assert_eq!(rec["settings"]["seed"], 3);
    assert_eq!(rec["settings"]["hops"], "2");
    assert_eq!(rec["settings"]["strategy"], "global");
    assert_eq!(fs::read_to_string(dir.path().join("p.jsonl")).unwrap().lines().count(), 5);
}

#[test]
fn config_file_fills_flags_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    stage(dir.path());
    fs::write(dir.path().join("run.conf"), "# sampling\nkg = kg.tsv\ncount_per_hop = 4\nhops = 1\nseed = 5\n").unwrap();
    ok(dir.path(), &["--config", "run.conf", "sample-paths", "--out", "a.jsonl"]);
    assert_eq!(fs::read_to_string(dir.path().join("a.jsonl")).unwrap().lines().count(), 4);
    ok(dir.path(), &["--config", "run.conf", "sample-paths", "--count-per-hop", "6", "--out", "b.jsonl"]);
    assert_eq!(fs::read_to_string(dir.path().join("b.jsonl")).unwrap().lines().count(), 6);

    fs::write(dir.path().join("bad.conf"), "kg = kg.tsv\nwidht = 3\n").unwrap();
    let o = pathgen(dir.path(), &["--config", "bad.conf", "sample-paths", "--out", "c.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.starts_with("error: config: unknown config keys: widht"), "{err}");
    assert!(!dir.path().join("c.jsonl").exists());
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = pathgen(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn failures_print_one_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = pathgen(dir.path(), &["sample-paths", "--kg", "missing.tsv", "--out", "p.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: io: ") && err.contains("missing.tsv"), "{err}");

    let o = pathgen(dir.path(), &["sample-paths", "--out", "p.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(String::from_utf8(o.stderr).unwrap().trim(), "error: config: missing required option --kg");
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["grad-check"]);
    assert_eq!(out.lines().count(), 5, "{out}");
    assert!(out.lines().all(|l| l.ends_with("ok")), "{out}");
}
