//! Models under test: a prologue-pattern matcher, a trainable byte-window
//! classifier and an adapter for external detector programs.

mod external;
mod pattern;
mod window;

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binary::{CodeImage, Label};

pub use external::{parse_adapter_output, ExternalDetector};
pub use pattern::{Pattern, PatternDetector, PatternTable};
pub use window::{
    corpus_fingerprint, train_window_classifier, TrainingMeta, WindowClassifierModel,
    WindowDetector, WindowHyper, CLASS_ORDER, PAD_TOKEN, VOCAB,
};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("training loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("adapter exited with {status}: {stderr}")]
    AdapterCrash { status: String, stderr: String },
    #[error("adapter output line {line}: {message}")]
    ProtocolViolation { line: usize, message: String },
    #[error("adapter timed out after {seconds:.1}s")]
    Timeout { seconds: f64 },
    #[error("pattern table line {line}: {message}")]
    PatternParse { line: usize, message: String },
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One inferred boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub address: u64,
    /// `Start` or `End`.
    pub label: Label,
    /// Deterministic detectors emit 1.0.
    pub confidence: f64,
}

impl Detection {
    pub fn certain(address: u64, label: Label) -> Self {
        Detection {
            address,
            label,
            confidence: 1.0,
        }
    }
}

/// The detection invariant: S/E only, confidence in [0, 1], address inside
/// an executable section.
pub fn check_detection(image: &CodeImage, d: &Detection) -> Result<(), String> {
    if d.label == Label::Neither {
        return Err(format!("{:#x}: N is not a detection label", d.address));
    }
    if !(0.0..=1.0).contains(&d.confidence) {
        return Err(format!("{:#x}: confidence {} outside [0, 1]", d.address, d.confidence));
    }
    if image.section_containing(d.address).is_err() {
        return Err(format!("{:#x} is not in an executable section", d.address));
    }
    Ok(())
}

/// Sort by (address, label) and drop exact duplicates.
pub fn normalize(dets: &mut Vec<Detection>) {
    dets.sort_by(|a, b| (a.address, a.label).cmp(&(b.address, b.label)));
    dets.dedup_by(|b, a| a.address == b.address && a.label == b.label);
}

pub trait Detector: Send + Sync {
    /// Short name used in score rows.
    fn id(&self) -> &str;

    /// Changes whenever the detector's behaviour could change; keys caches.
    fn fingerprint(&self) -> String;

    fn detect(&self, image: &CodeImage) -> Result<Vec<Detection>, DetectorError>;

    /// Detect on `mutated`, which differs from `original` only inside
    /// `changed`. Detectors with bounded context override this to reuse
    /// `baseline` (the detections on `original`).
    fn detect_mutated(
        &self,
        original: &CodeImage,
        baseline: &[Detection],
        mutated: &CodeImage,
        changed: &[Range<u64>],
    ) -> Result<Vec<Detection>, DetectorError> {
        let _ = (original, baseline, changed);
        self.detect(mutated)
    }
}

pub const DETECTIONS_HEADER: [&str; 4] = ["binary", "address", "label", "confidence"];

/// Detections of several binaries as CSV.
pub fn detections_csv(rows: &[(&str, &[Detection])], comment: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(c) = comment {
        out.push_str(&format!("# {c}\n"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(DETECTIONS_HEADER).unwrap();
    for (binary, dets) in rows {
        for d in dets.iter() {
            w.write_record([
                binary.to_string(),
                format!("{:#x}", d.address),
                d.label.to_string(),
                format!("{:.6}", d.confidence),
            ])
            .unwrap();
        }
    }
    out.push_str(std::str::from_utf8(&w.into_inner().unwrap()).unwrap());
    out
}

/// Parse [`detections_csv`] output, grouped by binary in first-seen order.
pub fn parse_detections_csv(text: &str) -> Result<Vec<(String, Vec<Detection>)>, DetectorError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let bad = |line: usize, message: String| DetectorError::ProtocolViolation { line, message };
    match reader.headers() {
        Ok(h) if h.iter().eq(DETECTIONS_HEADER) => {}
        _ => return Err(bad(1, format!("header must be `{}`", DETECTIONS_HEADER.join(",")))),
    }
    let mut out: Vec<(String, Vec<Detection>)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad(0, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let (address, label) = crate::binary::parse_boundary_line(&format!("{} {}", &record[1], &record[2]))
            .map_err(|m| bad(line, m))?;
        let confidence: f64 = record[3].parse().map_err(|_| bad(line, "bad confidence".into()))?;
        let d = Detection {
            address,
            label,
            confidence,
        };
        match out.last_mut() {
            Some((b, v)) if b == &record[0] => v.push(d),
            _ => out.push((record[0].to_string(), vec![d])),
        }
    }
    Ok(out)
}
