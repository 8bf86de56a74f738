//! Targeted re-injection to confirm individual misclassifications.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{AttackSurface, SearchError, SurfaceBinary, TargetKind};
use crate::binary::Label;
use crate::detectors::{Detection, Detector};
use crate::rewriter::{InjectionMode, PadRegion};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub binary: String,
    /// Start address of the targeted function.
    pub function: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetOutcome {
    pub target: Target,
    pub payload: Vec<u8>,
    pub pad: u64,
    pub confirmed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub outcomes: Vec<TargetOutcome>,
}

impl ValidationReport {
    pub fn confirmed(&self) -> impl Iterator<Item = &TargetOutcome> {
        self.outcomes.iter().filter(|o| o.confirmed)
    }

    pub fn unconfirmed(&self) -> impl Iterator<Item = &TargetOutcome> {
        self.outcomes.iter().filter(|o| !o.confirmed)
    }
}

/// The pad directly behind the function, or else the one leading into it.
fn target_pad(b: &SurfaceBinary, function: u64, mode: InjectionMode, len: usize) -> Option<PadRegion> {
    let end = b.binary.labels.functions().find(|&(s, _)| s == function)?.1;
    let after = b.pads.iter().find(|p| p.address == end + 1);
    let before = b.pads.iter().find(|p| p.range().end == function);
    after.into_iter().chain(before).find(|p| p.usable(mode, len)).copied()
}

fn has(dets: &[Detection], address: u64, label: Label) -> bool {
    dets.iter().any(|d| d.address == address && d.label == label)
}

/// Re-inject each payload into the pad of each target only and check that
/// the intended misclassification appears. For [`TargetKind::InduceFn`] a
/// true boundary next to the pad (the function's own start and end, and the
/// start right after the pad) must go from detected to undetected; for
/// [`TargetKind::InduceFp`] a new boundary must be reported inside the pad.
pub fn validate_attack(
    detector: &dyn Detector,
    surface: &AttackSurface,
    payloads: &[Vec<u8>],
    targets: &[Target],
    mode: InjectionMode,
    kind: TargetKind,
) -> Result<ValidationReport, SearchError> {
    surface.check_detector(detector)?;
    let mut report = ValidationReport::default();
    for t in targets {
        let b = surface.find(&t.binary)?;
        let gt = &b.binary.labels;
        for payload in payloads {
            let pad = target_pad(b, t.function, mode, payload.len()).ok_or_else(|| SearchError::TargetWithoutPad {
                binary: t.binary.clone(),
                function: t.function,
            })?;
            let (post, _) = surface.detect_injected(detector, b, &[pad], payload, mode, false)?;
            let pre = &b.baseline;
            let confirmed = match kind {
                TargetKind::InduceFn => {
                    let end = gt.functions().find(|&(s, _)| s == t.function).map(|f| f.1);
                    let mut near: BTreeSet<(u64, Label)> = BTreeSet::new();
                    near.insert((t.function, Label::Start));
                    if let Some(e) = end {
                        near.insert((e, Label::End));
                    }
                    if gt.has(pad.range().end, Label::Start) {
                        near.insert((pad.range().end, Label::Start));
                    }
                    if pad.address > 0 && gt.has(pad.address - 1, Label::End) {
                        near.insert((pad.address - 1, Label::End));
                    }
                    near.iter().any(|&(a, l)| has(pre, a, l) && !has(&post, a, l))
                }
                TargetKind::InduceFp => post.iter().any(|d| {
                    pad.range().contains(&d.address) && d.label != Label::Neither && !has(pre, d.address, d.label)
                }),
            };
            report.outcomes.push(TargetOutcome {
                target: t.clone(),
                payload: payload.clone(),
                pad: pad.address,
                confirmed,
            });
        }
    }
    Ok(report)
}

/// Whole-binary validation: functions whose start and end are both still
/// detected after injecting into every usable pad.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recovery {
    pub binary: String,
    pub recovered: usize,
    pub total: usize,
}

impl fmt::Display for Recovery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "recovered {} of {} functions", self.recovered, self.total)
    }
}

pub fn recovery(
    detector: &dyn Detector,
    surface: &AttackSurface,
    payload: &[u8],
    mode: InjectionMode,
) -> Result<Vec<Recovery>, SearchError> {
    surface.check_detector(detector)?;
    surface
        .binaries
        .iter()
        .map(|b| {
            let (dets, _) = surface.detect_injected(detector, b, &b.pads, payload, mode, true)?;
            let starts: BTreeSet<u64> = dets.iter().filter(|d| d.label == Label::Start).map(|d| d.address).collect();
            let ends: BTreeSet<u64> = dets.iter().filter(|d| d.label == Label::End).map(|d| d.address).collect();
            let gt = &b.binary.labels;
            Ok(Recovery {
                binary: b.binary.id().to_string(),
                recovered: gt
                    .functions()
                    .filter(|(s, e)| starts.contains(s) && ends.contains(e))
                    .count(),
                total: gt.function_count(),
            })
        })
        .collect()
}
