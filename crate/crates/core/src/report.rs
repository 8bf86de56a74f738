//! Plot data and summary tables.

use crate::metrics::{format_mean_sd, ScoreClass, ScoreRow, ScoreSummary};
use crate::search::{search_log_csv, SearchResult};

pub const SCATTER_HEADER: [&str; 5] = ["binary", "dataset", "detector", "precision", "recall"];
pub const SUMMARY_HEADER: [&str; 5] = ["dataset", "system", "precision", "recall", "f1"];

/// Files produced by [`emit_report`], as text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    /// One precision/recall point per (binary, detector).
    pub scatter_csv: String,
    /// `mean (sd)` cells per (dataset, system).
    pub summary_csv: String,
    pub search_csv: Option<String>,
}

fn csv_text(comment: Option<&str>, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut out = String::new();
    if let Some(c) = comment {
        out.push_str(&format!("# {c}\n"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).unwrap();
    for r in rows {
        w.write_record(&r).unwrap();
    }
    out.push_str(std::str::from_utf8(&w.into_inner().unwrap()).unwrap());
    out
}

/// Scatter rows come from `scores` rows of class `headline`, sorted by
/// (detector, dataset, binary); summaries keep the order they are given in.
pub fn emit_report(
    scores: &[ScoreRow],
    headline: ScoreClass,
    summaries: &[ScoreSummary],
    search: Option<&SearchResult>,
    comment: Option<&str>,
) -> Report {
    let mut points: Vec<&ScoreRow> = scores.iter().filter(|r| r.class == headline).collect();
    points.sort_by(|a, b| (&a.detector, &a.dataset, &a.binary).cmp(&(&b.detector, &b.dataset, &b.binary)));
    let scatter_csv = csv_text(
        comment,
        &SCATTER_HEADER,
        points.iter().map(|r| {
            vec![
                r.binary.clone(),
                r.dataset.clone(),
                r.detector.clone(),
                format!("{:.6}", r.precision),
                format!("{:.6}", r.recall),
            ]
        }),
    );
    let summary_csv = csv_text(
        comment,
        &SUMMARY_HEADER,
        summaries.iter().map(|s| {
            vec![
                s.dataset.clone(),
                s.detector.clone(),
                format_mean_sd(&s.precision),
                format_mean_sd(&s.recall),
                format_mean_sd(&s.f1),
            ]
        }),
    );
    Report {
        scatter_csv,
        summary_csv,
        search_csv: search.map(|r| search_log_csv(r, comment)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{ClassCounts, MeanSd};

    #[test]
    fn empty_inputs_give_headers() {
        let r = emit_report(&[], ScoreClass::All, &[], None, None);
        assert_eq!(r.scatter_csv, "binary,dataset,detector,precision,recall\n");
        assert_eq!(r.summary_csv, "dataset,system,precision,recall,f1\n");
        assert!(r.search_csv.is_none());
    }

    #[test]
    fn one_point_per_binary_and_detector() {
        let mut rows = Vec::new();
        for det in ["b", "a"] {
            for bin in ["x", "y", "z"] {
                for class in [ScoreClass::S, ScoreClass::E, ScoreClass::All] {
                    rows.push(ScoreRow::new(bin, "Normal", det, class, ClassCounts { tp: 3, fp: 1, fn_: 0 }));
                }
            }
        }
        let r = emit_report(&rows, ScoreClass::All, &[], None, Some("config-hash: 0"));
        let lines: Vec<&str> = r.scatter_csv.lines().collect();
        assert_eq!(lines.len(), 2 + 6);
        assert_eq!(lines[2], "x,Normal,a,0.750000,1.000000");
    }

    #[test]
    fn mean_sd_cells() {
        let s = ScoreSummary {
            dataset: "Totals".into(),
            detector: "XDA".into(),
            n_binaries: 10,
            precision: MeanSd { mean: 0.98166, sd: 0.04032 },
            recall: MeanSd { mean: 0.959, sd: 0.062 },
            f1: MeanSd { mean: 0.969, sd: 0.044 },
        };
        let r = emit_report(&[], ScoreClass::All, &[s], None, None);
        assert_eq!(r.summary_csv.lines().nth(1), Some("Totals,XDA,0.982 (0.040),0.959 (0.062),0.969 (0.044)"));
    }
}
