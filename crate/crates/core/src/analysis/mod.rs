//! Misclassification mining and heavy-hitter ranking.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binary::{CodeImage, Label, LabelMap};
use crate::detectors::Detection;
use crate::metrics::MetricsError;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("pattern length {k} exceeds the context window of {window} bytes")]
    PatternLongerThanContext { k: usize, window: usize },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("seed file line {line}: {message}")]
    SeedParse { line: u64, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MisclassKind {
    #[serde(rename = "FP_S")]
    FpS,
    #[serde(rename = "FP_E")]
    FpE,
    #[serde(rename = "FN_S")]
    FnS,
    #[serde(rename = "FN_E")]
    FnE,
}

impl MisclassKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MisclassKind::FpS => "FP_S",
            MisclassKind::FpE => "FP_E",
            MisclassKind::FnS => "FN_S",
            MisclassKind::FnE => "FN_E",
        }
    }

    pub fn is_false_positive(self) -> bool {
        matches!(self, MisclassKind::FpS | MisclassKind::FpE)
    }
}

impl fmt::Display for MisclassKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MisclassKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [MisclassKind::FpS, MisclassKind::FpE, MisclassKind::FnS, MisclassKind::FnE]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown misclassification kind {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MisclassRecord {
    pub binary_id: String,
    pub detector_id: String,
    pub address: u64,
    pub kind: MisclassKind,
    pub radius: usize,
    /// Bytes from `address - radius` to `address + radius`, clipped to the section.
    pub context: Vec<u8>,
    /// Index of `address` within `context`.
    pub center: usize,
    /// Set when clipping removed bytes.
    pub truncated: bool,
}

/// One record per false positive and false negative, ordered by address.
pub fn collect_misclassifications(
    gt: &LabelMap,
    pred_binary: &str,
    pred: &[Detection],
    image: &CodeImage,
    radius: usize,
    detector_id: &str,
) -> Result<Vec<MisclassRecord>, AnalysisError> {
    if gt.binary_id() != pred_binary {
        return Err(MetricsError::BinaryMismatch {
            gt: gt.binary_id().to_string(),
            pred: pred_binary.to_string(),
        }
        .into());
    }
    let mut found: BTreeSet<(u64, MisclassKind)> = BTreeSet::new();
    for label in Label::BOUNDARIES {
        let p: BTreeSet<u64> = pred.iter().filter(|d| d.label == label).map(|d| d.address).collect();
        let g = gt.set(label);
        let (fp, fn_) = if label == Label::Start {
            (MisclassKind::FpS, MisclassKind::FnS)
        } else {
            (MisclassKind::FpE, MisclassKind::FnE)
        };
        found.extend(p.difference(g).map(|&a| (a, fp)));
        found.extend(g.difference(&p).map(|&a| (a, fn_)));
    }
    let mut out = Vec::with_capacity(found.len());
    for (address, kind) in found {
        let Ok(section) = image.section_containing(address) else {
            continue;
        };
        let bytes = image.section_bytes(section);
        let pos = (address - section.virtual_address) as usize;
        let lo = pos.saturating_sub(radius);
        let hi = (pos + radius + 1).min(bytes.len());
        out.push(MisclassRecord {
            binary_id: gt.binary_id().to_string(),
            detector_id: detector_id.to_string(),
            address,
            kind,
            radius,
            context: bytes[lo..hi].to_vec(),
            center: pos - lo,
            truncated: hi - lo < 2 * radius + 1,
        });
    }
    Ok(out)
}

/// Where the k-byte pattern sits relative to the misclassified address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// `[address, address + k)`
    #[default]
    AtAddress,
    /// `[address - k, address)`
    BeforeAddress,
    /// `[address - k/2, address - k/2 + k)`
    Centered,
}

impl FromStr for Anchor {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "at_address" | "at" => Ok(Anchor::AtAddress),
            "before_address" | "before" => Ok(Anchor::BeforeAddress),
            "centered" => Ok(Anchor::Centered),
            _ => Err(format!("unknown anchor {s:?}")),
        }
    }
}

impl Anchor {
    fn pattern<'a>(self, r: &'a MisclassRecord, k: usize) -> Option<&'a [u8]> {
        let c = r.center;
        let start = match self {
            Anchor::AtAddress => c,
            Anchor::BeforeAddress => c.checked_sub(k)?,
            Anchor::Centered => c.checked_sub(k / 2)?,
        };
        r.context.get(start..start + k)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackSeed {
    pub rank: usize,
    pub kind: MisclassKind,
    pub incidence: usize,
    pub pattern: Vec<u8>,
}

/// Count distinct (binary, address) occurrences per (kind, pattern) and rank
/// by incidence, breaking ties by pattern bytes, then kind.
pub fn rank_heavy_hitters(
    records: &[MisclassRecord],
    k: usize,
    anchor: Anchor,
) -> Result<Vec<AttackSeed>, AnalysisError> {
    if let Some(r) = records.iter().find(|r| k > 2 * r.radius + 1) {
        return Err(AnalysisError::PatternLongerThanContext {
            k,
            window: 2 * r.radius + 1,
        });
    }
    let mut sites: HashMap<(&[u8], MisclassKind), BTreeSet<(&str, u64)>> = HashMap::new();
    for r in records {
        if let Some(p) = anchor.pattern(r, k) {
            sites.entry((p, r.kind)).or_default().insert((&r.binary_id, r.address));
        }
    }
    let mut seeds: Vec<AttackSeed> = sites
        .into_iter()
        .map(|((p, kind), s)| AttackSeed {
            rank: 0,
            kind,
            incidence: s.len(),
            pattern: p.to_vec(),
        })
        .collect();
    seeds.sort_by(|a, b| {
        b.incidence
            .cmp(&a.incidence)
            .then_with(|| a.pattern.cmp(&b.pattern))
            .then_with(|| a.kind.cmp(&b.kind))
    });
    for (i, s) in seeds.iter_mut().enumerate() {
        s.rank = i + 1;
    }
    Ok(seeds)
}

pub const SEEDS_HEADER: [&str; 4] = ["rank", "kind", "incidence", "pattern_hex"];

pub fn seeds_csv(seeds: &[AttackSeed], comment: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(c) = comment {
        out.push_str(&format!("# {c}\n"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SEEDS_HEADER).unwrap();
    for s in seeds {
        w.write_record([
            s.rank.to_string(),
            s.kind.to_string(),
            s.incidence.to_string(),
            hex::encode(&s.pattern),
        ])
        .unwrap();
    }
    out.push_str(std::str::from_utf8(&w.into_inner().unwrap()).unwrap());
    out
}

pub fn parse_seeds_csv(text: &str) -> Result<Vec<AttackSeed>, AnalysisError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    match reader.headers() {
        Ok(h) if h.iter().eq(SEEDS_HEADER) => {}
        _ => {
            return Err(AnalysisError::SeedParse {
                line: 1,
                message: format!("header must be `{}`", SEEDS_HEADER.join(",")),
            })
        }
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| AnalysisError::SeedParse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| AnalysisError::SeedParse { line, message };
        out.push(AttackSeed {
            rank: record[0].parse().map_err(|_| bad("bad rank".into()))?,
            kind: record[1].parse().map_err(bad)?,
            incidence: record[2].parse().map_err(|_| bad("bad incidence".into()))?,
            pattern: hex::decode(&record[3]).map_err(|e| bad(e.to_string()))?,
        });
    }
    Ok(out)
}
