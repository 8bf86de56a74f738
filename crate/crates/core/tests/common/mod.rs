#![allow(dead_code)]

use std::path::PathBuf;

use fbsearch_core::corpus::{CorpusManifest, ManifestEntry, OptLevel};
use fbsearch_core::metrics::{ClassCounts, ScoreClass, ScoreRow};

pub fn fixture(name: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// `all`-class score rows and a one-dataset manifest built from the counts fixture.
pub fn totals_fixture() -> (Vec<ScoreRow>, CorpusManifest) {
    let mut rows = Vec::new();
    let mut manifest = CorpusManifest::new("");
    let text = fixture("totals_counts.csv");
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let n = |i: usize| f[i].parse::<u64>().unwrap();
        let counts = ClassCounts { tp: n(2), fp: n(3), fn_: n(4) };
        rows.push(ScoreRow::new(f[1], "Normal", f[0], ScoreClass::All, counts));
        manifest.entries.push(ManifestEntry {
            path: f[1].into(),
            package: f[1].into(),
            toolchain: f[0].into(),
            version: String::new(),
            arch: "x86_64".into(),
            opt: OptLevel::O2,
            config: "baseline".into(),
            dataset: "Normal".into(),
        });
    }
    (rows, manifest)
}
