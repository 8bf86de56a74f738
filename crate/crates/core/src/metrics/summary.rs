use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{MetricsError, ScoreClass, ScoreRow};
use crate::corpus::CorpusManifest;

/// Group label for the all-datasets summary.
pub const TOTALS: &str = "Totals";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Population standard deviation.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return MeanSd { mean: 0.0, sd: 0.0 };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MeanSd { mean, sd: var.sqrt() }
    }
}

/// `0.982 (0.040)`
pub fn format_mean_sd(m: &MeanSd) -> String {
    format!("{:.3} ({:.3})", m.mean, m.sd)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSummary {
    pub dataset: String,
    pub detector: String,
    pub n_binaries: usize,
    pub precision: MeanSd,
    pub recall: MeanSd,
    pub f1: MeanSd,
}

/// Summaries per (dataset, detector) over the rows of class `headline`,
/// datasets taken from the manifest. Groups come out in sorted key order;
/// with `totals`, one [`TOTALS`] group per detector follows them.
pub fn aggregate(
    rows: &[ScoreRow],
    manifest: &CorpusManifest,
    headline: ScoreClass,
    totals: bool,
) -> Result<Vec<ScoreSummary>, MetricsError> {
    let datasets: HashMap<String, &str> = manifest
        .entries
        .iter()
        .map(|e| (e.binary_id(), e.dataset.as_str()))
        .collect();
    let mut groups: BTreeMap<(String, String), Vec<&ScoreRow>> = BTreeMap::new();
    let mut all: BTreeMap<String, Vec<&ScoreRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.class == headline) {
        let dataset = datasets.get(&r.binary).ok_or_else(|| MetricsError::JoinFailure {
            binary: r.binary.clone(),
        })?;
        groups
            .entry((dataset.to_string(), r.detector.clone()))
            .or_default()
            .push(r);
        all.entry(r.detector.clone()).or_default().push(r);
    }
    let summarize = |dataset: &str, detector: &str, rs: &[&ScoreRow]| {
        let col = |f: fn(&ScoreRow) -> f64| MeanSd::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
        ScoreSummary {
            dataset: dataset.to_string(),
            detector: detector.to_string(),
            n_binaries: rs.len(),
            precision: col(|r| r.precision),
            recall: col(|r| r.recall),
            f1: col(|r| r.f1),
        }
    };
    let mut out: Vec<ScoreSummary> = groups
        .iter()
        .map(|((d, det), rs)| summarize(d, det, rs))
        .collect();
    if totals {
        out.extend(all.iter().map(|(det, rs)| summarize(TOTALS, det, rs)));
    }
    Ok(out)
}
