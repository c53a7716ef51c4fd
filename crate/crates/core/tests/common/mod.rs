//! Shared test helpers: brute-force path oracles and a driver for the
//! `pathgen` binary.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const KG: &str = include_str!("../../data/toy_kg.tsv");
const QA: &str = include_str!("../../data/toy_qa.jsonl");

pub fn pathgen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathgen")).current_dir(dir).args(args).output().expect("binary runs")
}

pub fn ok(dir: &Path, args: &[&str]) -> String {
    let o = pathgen(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

pub fn stage(dir: &Path) {
    fs::write(dir.join("kg.tsv"), KG).unwrap();
    let qa: String = QA.lines().take(60).map(|l| format!("{l}\n")).collect();
    fs::write(dir.join("qa.jsonl"), qa).unwrap();
}

/// Sample, train a small generator, generate, score, then train and
/// evaluate a pg-global model. Returns every file in `dir`.
pub fn pipeline(dir: &Path, threads: &str) -> BTreeMap<String, Vec<u8>> {
    stage(dir);
    let t = ["--seed", "7", "--threads", threads];
    let run = |args: &[&str]| ok(dir, &[&t[..], args].concat());
    run(&["sample-paths", "--kg", "kg.tsv", "--count-per-hop", "150", "--out", "paths.jsonl"]);
    run(&["split", "--in", "paths.jsonl", "--ratio", "90:5:5", "--out-prefix", "paths"]);
    run(&[
        "train-generator",
        "--train",
        "paths.train.jsonl",
        "--dev",
        "paths.dev.jsonl",
        "--kg",
        "kg.tsv",
        "--out",
        "gen.ckpt",
        "--width",
        "16",
        "--heads",
        "2",
        "--ff-width",
        "32",
        "--blocks",
        "1",
        "--max-epochs",
        "2",
        "--batch-size",
        "32",
    ]);
    let pairs: String = fs::read_to_string(dir.join("paths.test.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            let e = v["entities"].as_array().unwrap();
            format!("{}\t{}\n", e[0].as_str().unwrap(), e[e.len() - 1].as_str().unwrap())
        })
        .collect();
    fs::write(dir.join("pairs.tsv"), pairs).unwrap();
    let gen_out =
        run(&["generate", "--model", "gen.ckpt", "--pairs", "pairs.tsv", "--kg", "kg.tsv", "--out", "gen.jsonl"]);
    assert!(gen_out.starts_with("generated "), "{gen_out}");
    run(&["train-scorer", "--kg", "kg.tsv", "--out", "scorer.ckpt", "--dim", "8", "--epochs", "3"]);
    run(&[
        "eval-paths",
        "--paths",
        "gen.jsonl",
        "--kg",
        "kg.tsv",
        "--scorer",
        "scorer.ckpt",
        "--report",
        "paths.report.json",
    ]);
    run(&["split", "--in", "qa.jsonl", "--ratio", "70:15:15", "--out-prefix", "qa"]);
    run(&[
        "train-qa",
        "--dataset",
        "qa.train.jsonl",
        "--dev",
        "qa.dev.jsonl",
        "--kg",
        "kg.tsv",
        "--generator",
        "gen.ckpt",
        "--variant",
        "pg-global",
        "--out",
        "qa.ckpt",
        "--width",
        "16",
        "--max-epochs",
        "2",
    ]);
    let acc = run(&["eval-qa", "--dataset", "qa.test.jsonl", "--model", "qa.ckpt"]);
    assert!(acc.starts_with("accuracy "), "{acc}");

    let mut files = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        files.insert(e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap());
    }
    files
}

/// Directed labelled edges including inverse forms.
pub fn oracle_edges(recs: &[(String, String, String)]) -> BTreeSet<(String, String, String)> {
    let mut out = BTreeSet::new();
    for (h, r, t) in recs {
        out.insert((h.clone(), r.clone(), t.clone()));
        out.insert((t.clone(), format!("_{r}"), h.clone()));
    }
    out
}

pub type NamedPath = (Vec<String>, Vec<String>);

/// Every simple walk of 1..=max_hops edges from `sources` ending in
/// `targets`, grown one layer at a time.
pub fn oracle_paths(
    edges: &BTreeSet<(String, String, String)>,
    sources: &BTreeSet<String>,
    targets: &BTreeSet<String>,
    max_hops: usize,
) -> Vec<NamedPath> {
    let mut layer: Vec<NamedPath> = sources.iter().map(|s| (vec![s.clone()], vec![])).collect();
    let mut out = Vec::new();
    for _ in 0..max_hops {
        let mut next = Vec::new();
        for (ents, rels) in &layer {
            let last = ents.last().unwrap();
            for (h, r, t) in edges {
                if h == last && !ents.contains(t) {
                    let mut e = ents.clone();
                    e.push(t.clone());
                    let mut rs = rels.clone();
                    rs.push(r.clone());
                    if targets.contains(t) {
                        out.push((e.clone(), rs.clone()));
                    }
                    next.push((e, rs));
                }
            }
        }
        layer = next;
    }
    out.sort();
    out
}
