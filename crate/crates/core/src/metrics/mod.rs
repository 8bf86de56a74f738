//! Boundary confusion counts, precision/recall/F1 and per-group summaries.

mod summary;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binary::{Label, LabelMap};
use crate::detectors::Detection;

pub use summary::{aggregate, format_mean_sd, MeanSd, ScoreSummary, TOTALS};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("ground truth is for {gt} but predictions are for {pred}")]
    BinaryMismatch { gt: String, pred: String },
    #[error("score row for {binary} has no manifest entry")]
    JoinFailure { binary: String },
    #[error("score file line {line}: {message}")]
    ScoreParse { line: u64, message: String },
}

/// Which boundary classes a score covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassFilter {
    #[default]
    Both,
    StartsOnly,
    EndsOnly,
}

impl FromStr for ClassFilter {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both" => Ok(ClassFilter::Both),
            "starts_only" => Ok(ClassFilter::StartsOnly),
            "ends_only" => Ok(ClassFilter::EndsOnly),
            _ => Err(format!("unknown class filter {s:?}")),
        }
    }
}

impl ClassFilter {
    pub fn includes(self, label: Label) -> bool {
        match self {
            ClassFilter::Both => label != Label::Neither,
            ClassFilter::StartsOnly => label == Label::Start,
            ClassFilter::EndsOnly => label == Label::End,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl std::ops::Add for ClassCounts {
    type Output = ClassCounts;
    fn add(self, o: ClassCounts) -> ClassCounts {
        ClassCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub binary_id: String,
    pub filter: ClassFilter,
    pub start: ClassCounts,
    pub end: ClassCounts,
}

impl ConfusionCounts {
    pub fn class(&self, label: Label) -> ClassCounts {
        match label {
            Label::Start => self.start,
            Label::End => self.end,
            Label::Neither => ClassCounts::default(),
        }
    }

    /// Micro-average over the classes the filter includes.
    pub fn total(&self) -> ClassCounts {
        Label::BOUNDARIES
            .into_iter()
            .filter(|&l| self.filter.includes(l))
            .map(|l| self.class(l))
            .fold(ClassCounts::default(), |a, b| a + b)
    }
}

fn predicted(pred: &[Detection], label: Label) -> BTreeSet<u64> {
    pred.iter().filter(|d| d.label == label).map(|d| d.address).collect()
}

fn set_counts(gt: &BTreeSet<u64>, pred: &BTreeSet<u64>) -> ClassCounts {
    let tp = gt.intersection(pred).count() as u64;
    ClassCounts {
        tp,
        fp: pred.len() as u64 - tp,
        fn_: gt.len() as u64 - tp,
    }
}

/// Exact-address confusion. Per class, a prediction is a TP when the ground
/// truth carries the same label at that address; duplicate predictions
/// count once. Excluded classes report zero counts.
pub fn confusion(
    gt: &LabelMap,
    pred_binary: &str,
    pred: &[Detection],
    filter: ClassFilter,
) -> Result<ConfusionCounts, MetricsError> {
    confusion_with_tolerance(gt, pred_binary, pred, filter, 0)
}

/// As [`confusion`], but a ground-truth address counts as found when a
/// same-class prediction lies within `tolerance` bytes, and a prediction
/// is false when no same-class ground truth lies that close.
pub fn confusion_with_tolerance(
    gt: &LabelMap,
    pred_binary: &str,
    pred: &[Detection],
    filter: ClassFilter,
    tolerance: u64,
) -> Result<ConfusionCounts, MetricsError> {
    if gt.binary_id() != pred_binary {
        return Err(MetricsError::BinaryMismatch {
            gt: gt.binary_id().to_string(),
            pred: pred_binary.to_string(),
        });
    }
    let count = |label: Label| {
        if !filter.includes(label) {
            return ClassCounts::default();
        }
        let g = gt.set(label);
        let p = predicted(pred, label);
        if tolerance == 0 {
            return set_counts(g, &p);
        }
        let near = |set: &BTreeSet<u64>, a: u64| {
            set.range(a.saturating_sub(tolerance)..=a.saturating_add(tolerance))
                .next()
                .is_some()
        };
        let tp = g.iter().filter(|&&a| near(&p, a)).count() as u64;
        ClassCounts {
            tp,
            fp: p.iter().filter(|&&a| !near(g, a)).count() as u64,
            fn_: g.len() as u64 - tp,
        }
    };
    Ok(ConfusionCounts {
        binary_id: gt.binary_id().to_string(),
        filter,
        start: count(Label::Start),
        end: count(Label::End),
    })
}

/// `(precision, recall, f1)` with zero-denominator conventions: each is 0
/// when its denominator is 0.
pub fn prf1(c: &ClassCounts) -> (f64, f64, f64) {
    let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Score-row class column: a single boundary class or the micro average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScoreClass {
    S,
    E,
    #[serde(rename = "all")]
    All,
}

impl fmt::Display for ScoreClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreClass::S => "S",
            ScoreClass::E => "E",
            ScoreClass::All => "all",
        })
    }
}

impl FromStr for ScoreClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "S" => Ok(ScoreClass::S),
            "E" => Ok(ScoreClass::E),
            "all" => Ok(ScoreClass::All),
            _ => Err(format!("unknown score class {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub binary: String,
    pub dataset: String,
    pub detector: String,
    pub class: ScoreClass,
    pub counts: ClassCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ScoreRow {
    pub fn new(binary: &str, dataset: &str, detector: &str, class: ScoreClass, counts: ClassCounts) -> Self {
        let (precision, recall, f1) = prf1(&counts);
        ScoreRow {
            binary: binary.into(),
            dataset: dataset.into(),
            detector: detector.into(),
            class,
            counts,
            precision,
            recall,
            f1,
        }
    }
}

/// Rows for each included class followed by the micro-averaged `all` row.
pub fn score_rows(c: &ConfusionCounts, dataset: &str, detector: &str) -> Vec<ScoreRow> {
    let mut rows = Vec::new();
    if c.filter.includes(Label::Start) {
        rows.push(ScoreRow::new(&c.binary_id, dataset, detector, ScoreClass::S, c.start));
    }
    if c.filter.includes(Label::End) {
        rows.push(ScoreRow::new(&c.binary_id, dataset, detector, ScoreClass::E, c.end));
    }
    rows.push(ScoreRow::new(&c.binary_id, dataset, detector, ScoreClass::All, c.total()));
    rows
}

pub const SCORE_HEADER: [&str; 10] = [
    "binary", "dataset", "detector", "class", "tp", "fp", "fn", "precision", "recall", "f1",
];

pub fn scores_csv(rows: &[ScoreRow], comment: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(c) = comment {
        out.push_str(&format!("# {c}\n"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SCORE_HEADER).unwrap();
    for r in rows {
        w.write_record([
            r.binary.clone(),
            r.dataset.clone(),
            r.detector.clone(),
            r.class.to_string(),
            r.counts.tp.to_string(),
            r.counts.fp.to_string(),
            r.counts.fn_.to_string(),
            format!("{:.6}", r.precision),
            format!("{:.6}", r.recall),
            format!("{:.6}", r.f1),
        ])
        .unwrap();
    }
    out.push_str(std::str::from_utf8(&w.into_inner().unwrap()).unwrap());
    out
}

/// Parse a score CSV. Precision/recall/F1 are recomputed from the counts.
pub fn parse_scores_csv(text: &str) -> Result<Vec<ScoreRow>, MetricsError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    match reader.headers() {
        Ok(h) if h.iter().eq(SCORE_HEADER) => {}
        _ => {
            return Err(MetricsError::ScoreParse {
                line: 1,
                message: format!("header must be `{}`", SCORE_HEADER.join(",")),
            })
        }
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| MetricsError::ScoreParse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| MetricsError::ScoreParse { line, message };
        let num = |i: usize| record[i].parse::<u64>().map_err(|_| bad(format!("bad count {:?}", &record[i])));
        let counts = ClassCounts {
            tp: num(4)?,
            fp: num(5)?,
            fn_: num(6)?,
        };
        rows.push(ScoreRow::new(
            &record[0],
            &record[1],
            &record[2],
            record[3].parse().map_err(bad)?,
            counts,
        ));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt(starts: &[u64], ends: &[u64]) -> LabelMap {
        let mut text = String::new();
        let mut all: Vec<(u64, Label)> = starts
            .iter()
            .map(|&a| (a, Label::Start))
            .chain(ends.iter().map(|&a| (a, Label::End)))
            .collect();
        all.sort();
        for (a, l) in all {
            text.push_str(&format!("{a:#x} {l}\n"));
        }
        LabelMap::parse(&text, "b", vec![0..0x1000]).unwrap()
    }

    fn dets(v: &[(u64, Label)]) -> Vec<Detection> {
        v.iter().map(|&(a, l)| Detection::certain(a, l)).collect()
    }

    #[test]
    fn identity() {
        let g = gt(&[0x10], &[0x14]);
        let c = confusion(&g, "b", &dets(&[(0x10, Label::Start), (0x14, Label::End)]), ClassFilter::Both).unwrap();
        assert_eq!(c.start, ClassCounts { tp: 1, fp: 0, fn_: 0 });
        assert_eq!(c.end, ClassCounts { tp: 1, fp: 0, fn_: 0 });
    }

    #[test]
    fn missing_start() {
        let g = gt(&[0x10], &[0x14]);
        let c = confusion(&g, "b", &[], ClassFilter::StartsOnly).unwrap();
        assert_eq!(c.start, ClassCounts { tp: 0, fp: 0, fn_: 1 });
        assert_eq!(c.end, ClassCounts::default());
        assert_eq!(c.total(), c.start);
    }

    #[test]
    fn wrong_label_is_fp_and_fn() {
        let g = gt(&[0x10], &[0x14]);
        let c = confusion(&g, "b", &dets(&[(0x10, Label::Start), (0x14, Label::Start), (0x14, Label::Start)]), ClassFilter::Both).unwrap();
        assert_eq!(c.start, ClassCounts { tp: 1, fp: 1, fn_: 0 });
        assert_eq!(c.end, ClassCounts { tp: 0, fp: 0, fn_: 1 });
    }

    #[test]
    fn mismatch_rejected() {
        let g = gt(&[0x10], &[0x14]);
        assert!(matches!(confusion(&g, "other", &[], ClassFilter::Both), Err(MetricsError::BinaryMismatch { .. })));
    }

    #[test]
    fn prf1_cases() {
        assert_eq!(prf1(&ClassCounts { tp: 3, fp: 1, fn_: 1 }), (0.75, 0.75, 0.75));
        assert_eq!(prf1(&ClassCounts { tp: 0, fp: 0, fn_: 5 }), (0.0, 0.0, 0.0));
        assert_eq!(prf1(&ClassCounts { tp: 4, fp: 0, fn_: 0 }), (1.0, 1.0, 1.0));
        assert_eq!(prf1(&ClassCounts::default()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn tolerance_window() {
        let g = gt(&[0x10], &[0x14]);
        let p = dets(&[(0x11, Label::Start)]);
        let exact = confusion(&g, "b", &p, ClassFilter::StartsOnly).unwrap();
        assert_eq!(exact.start, ClassCounts { tp: 0, fp: 1, fn_: 1 });
        let loose = confusion_with_tolerance(&g, "b", &p, ClassFilter::StartsOnly, 1).unwrap();
        assert_eq!(loose.start, ClassCounts { tp: 1, fp: 0, fn_: 0 });
    }

    #[test]
    fn score_csv_round_trip() {
        let g = gt(&[0x10, 0x20], &[0x14, 0x30]);
        let c = confusion(&g, "b", &dets(&[(0x10, Label::Start), (0x15, Label::End)]), ClassFilter::Both).unwrap();
        let rows = score_rows(&c, "Normal", "pattern");
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].counts, ClassCounts { tp: 1, fp: 1, fn_: 3 });
        let text = scores_csv(&rows, Some("config-hash: x"));
        assert_eq!(parse_scores_csv(&text).unwrap(), rows);
    }

    fn functions() -> impl Strategy<Value = (Vec<u64>, Vec<u64>)> {
        proptest::collection::btree_set(0u64..64, 0..16).prop_map(|cuts| {
            let v: Vec<u64> = cuts.into_iter().collect();
            let (mut s, mut e) = (Vec::new(), Vec::new());
            for pair in v.chunks(2) {
                if let [a, b] = pair {
                    s.push(*a);
                    e.push(*b);
                } else {
                    s.push(pair[0]);
                    e.push(pair[0]);
                }
            }
            (s, e)
        })
    }

    fn preds() -> impl Strategy<Value = Vec<(u64, Label)>> {
        proptest::collection::vec((0u64..64, prop_oneof![Just(Label::Start), Just(Label::End)]), 0..24)
    }

    proptest! {
        #[test]
        fn correct_prediction_never_lowers_recall((s, e) in functions(), p in preds()) {
            let g = gt(&s, &e);
            let base = confusion(&g, "b", &dets(&p), ClassFilter::Both).unwrap().total();
            for &a in s.iter().take(1) {
                let mut more = p.clone();
                more.push((a, Label::Start));
                let after = confusion(&g, "b", &dets(&more), ClassFilter::Both).unwrap().total();
                prop_assert!(prf1(&after).1 >= prf1(&base).1);
            }
        }

        #[test]
        fn wrong_prediction_never_raises_precision((s, e) in functions(), p in preds(), a in 64u64..128) {
            let g = gt(&s, &e);
            let base = confusion(&g, "b", &dets(&p), ClassFilter::Both).unwrap().total();
            let mut more = p.clone();
            more.push((a, Label::End));
            let after = confusion(&g, "b", &dets(&more), ClassFilter::Both).unwrap().total();
            prop_assert!(prf1(&after).0 <= prf1(&base).0);
        }

        #[test]
        fn swapping_roles_swaps_counts((s, e) in functions(), p in preds()) {
            // Swap on raw sets: roles of S and E exchange in both inputs.
            let flip = |l: Label| if l == Label::Start { Label::End } else { Label::Start };
            let gs: BTreeSet<u64> = s.iter().copied().collect();
            let ge: BTreeSet<u64> = e.iter().copied().collect();
            let swapped: Vec<(u64, Label)> = p.iter().map(|&(a, l)| (a, flip(l))).collect();
            let d = dets(&p);
            let ds = dets(&swapped);
            prop_assert_eq!(set_counts(&gs, &predicted(&d, Label::Start)), set_counts(&gs, &predicted(&ds, Label::End)));
            prop_assert_eq!(set_counts(&ge, &predicted(&d, Label::End)), set_counts(&ge, &predicted(&ds, Label::Start)));
        }
    }
}
