//! Black-box payload search against a boundary detector.
//!
//! A corpus is first turned into an [`AttackSurface`]: its pads are scanned
//! and the detector's output on the unmodified images (pads still NOP) is
//! recorded as the baseline. Every candidate payload is then injected into
//! every usable pad of every binary and scored against the original labels.

mod retrain;
mod validate;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusBinary, LoadedCorpus};
use crate::detectors::{Detection, Detector, DetectorError};
use crate::metrics::{confusion, prf1, ClassCounts, ClassFilter, MeanSd, MetricsError};
use crate::rewriter::{apply_injections, plan_all, scan_pads, InjectionMode, PadHint, PadRegion, RewriteError};
use crate::x86;

pub use retrain::{adversarial_retrain, build_attack_corpus, RetrainReport};
pub use validate::{recovery, validate_attack, Recovery, Target, TargetOutcome, ValidationReport};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("no binary has a pad that can hold a {len}-byte payload in {mode} mode")]
    NoUsablePads { len: usize, mode: InjectionMode },
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("function {function:#x} of {binary} has no usable pad")]
    TargetWithoutPad { binary: String, function: u64 },
    #[error("binary {0} is not part of the attack surface")]
    UnknownBinary(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// `n` distinct `k`-byte payloads. With `valid_only`, each decodes as one
/// complete instruction of exactly `k` bytes. Fewer than `n` come back only
/// when the space (or the valid subset found by sampling) is smaller.
pub fn random_payloads(k: usize, n: usize, rng_seed: u64, valid_only: bool) -> Vec<Vec<u8>> {
    sample_payloads(k, n, rng_seed, valid_only, &HashSet::new())
}

fn sample_payloads(
    k: usize,
    n: usize,
    rng_seed: u64,
    valid_only: bool,
    exclude: &HashSet<Vec<u8>>,
) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let accept = |p: &[u8]| !exclude.contains(p) && (!valid_only || x86::is_single_instruction(p));
    if k <= 2 {
        // Small spaces: shuffle the whole space.
        let mut all: Vec<Vec<u8>> = (0..1usize << (8 * k))
            .map(|v| v.to_le_bytes()[..k].to_vec())
            .filter(|p| accept(p))
            .collect();
        for i in (1..all.len()).rev() {
            all.swap(i, rng.gen_range(0..=i));
        }
        all.truncate(n);
        return all;
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    let limit = n.saturating_mul(10_000).max(1 << 20);
    while out.len() < n && attempts < limit {
        attempts += 1;
        let mut p = vec![0u8; k];
        rng.fill(&mut p[..]);
        if accept(&p) && seen.insert(p.clone()) {
            out.push(p);
        }
    }
    out
}

/// Per-binary state shared by every candidate evaluation.
#[derive(Debug)]
pub struct SurfaceBinary {
    pub binary: CorpusBinary,
    pub pads: Vec<PadRegion>,
    /// Detections on the unmodified image.
    pub baseline: Vec<Detection>,
    pub baseline_counts: ClassCounts,
    pub baseline_f1: f64,
}

type CacheKey = (Vec<u8>, InjectionMode, String, String);

pub struct AttackSurface {
    pub binaries: Vec<SurfaceBinary>,
    pub filter: ClassFilter,
    detector_fingerprint: String,
    cache: Mutex<HashMap<CacheKey, Arc<Vec<Detection>>>>,
}

impl fmt::Debug for AttackSurface {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttackSurface")
            .field("binaries", &self.binaries.len())
            .field("filter", &self.filter)
            .field("detector", &self.detector_fingerprint)
            .finish()
    }
}

fn micro(gt: &CorpusBinary, dets: &[Detection], filter: ClassFilter) -> Result<ClassCounts, MetricsError> {
    Ok(confusion(&gt.labels, gt.id(), dets, filter)?.total())
}

impl AttackSurface {
    /// Scan pads and record baseline detections for every binary.
    pub fn prepare(
        detector: &dyn Detector,
        corpus: &LoadedCorpus,
        hint: PadHint,
        filter: ClassFilter,
    ) -> Result<Self, SearchError> {
        let binaries = corpus
            .binaries
            .par_iter()
            .map(|b| {
                let baseline = detector.detect(&b.image)?;
                let counts = micro(b, &baseline, filter)?;
                Ok(SurfaceBinary {
                    pads: scan_pads(&b.image, &b.labels, hint),
                    binary: b.clone(),
                    baseline_f1: prf1(&counts).2,
                    baseline_counts: counts,
                    baseline,
                })
            })
            .collect::<Result<Vec<_>, SearchError>>()?;
        Ok(AttackSurface {
            binaries,
            filter,
            detector_fingerprint: detector.fingerprint(),
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn baseline_mean_f1(&self) -> f64 {
        mean(self.binaries.iter().map(|b| b.baseline_f1))
    }

    pub fn baseline(&self) -> Baseline {
        Baseline {
            mean_f1: self.baseline_mean_f1(),
            per_binary: self
                .binaries
                .iter()
                .map(|b| (b.binary.id().to_string(), b.baseline_f1))
                .collect(),
        }
    }

    pub fn find(&self, id: &str) -> Result<&SurfaceBinary, SearchError> {
        self.binaries
            .iter()
            .find(|b| b.binary.id() == id)
            .ok_or_else(|| SearchError::UnknownBinary(id.to_string()))
    }

    fn check_detector(&self, detector: &dyn Detector) -> Result<(), SearchError> {
        if detector.fingerprint() != self.detector_fingerprint {
            return Err(SearchError::InvalidConfig(
                "detector differs from the one the surface was prepared with".into(),
            ));
        }
        Ok(())
    }

    /// Detections after injecting into `pads` of `b`, reusing the cache for
    /// the all-usable-pads case.
    fn detect_injected(
        &self,
        detector: &dyn Detector,
        b: &SurfaceBinary,
        pads: &[PadRegion],
        payload: &[u8],
        mode: InjectionMode,
        cache: bool,
    ) -> Result<(Arc<Vec<Detection>>, usize), SearchError> {
        let plans = plan_all(pads, payload, mode);
        if plans.is_empty() {
            return Ok((Arc::new(b.baseline.clone()), 0));
        }
        let key = (payload.to_vec(), mode, b.binary.id().to_string(), self.detector_fingerprint.clone());
        if cache {
            if let Some(hit) = self.cache.lock().unwrap().get(&key) {
                return Ok((hit.clone(), plans.len()));
            }
        }
        let mutated = apply_injections(&b.binary.image, &plans)?;
        let changed: Vec<_> = plans.iter().map(|p| p.pad.range()).collect();
        let dets = Arc::new(detector.detect_mutated(&b.binary.image, &b.baseline, &mutated, &changed)?);
        if cache {
            self.cache.lock().unwrap().insert(key, dets.clone());
        }
        Ok((dets, plans.len()))
    }
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        0.0
    } else {
        xs.sum::<f64>() / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub mean_f1: f64,
    pub per_binary: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryEval {
    pub binary: String,
    pub injected_pads: usize,
    pub counts: ClassCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `f1 - baseline f1`; negative means degradation.
    pub delta_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadEval {
    pub payload: Vec<u8>,
    pub mode: InjectionMode,
    pub mean_f1: f64,
    pub delta_f1: f64,
    pub fp_total: u64,
    pub fn_total: u64,
    pub per_binary: Vec<BinaryEval>,
}

impl PayloadEval {
    /// Mean F1 drop against the NOP baseline (positive = degradation).
    pub fn f1_drop(&self) -> f64 {
        -self.delta_f1
    }
}

/// Inject `payload` into every usable pad of every binary, re-run the
/// detector and score against the unchanged ground truth.
pub fn evaluate_payload(
    detector: &dyn Detector,
    surface: &AttackSurface,
    payload: &[u8],
    mode: InjectionMode,
) -> Result<PayloadEval, SearchError> {
    surface.check_detector(detector)?;
    let usable = surface
        .binaries
        .iter()
        .any(|b| b.pads.iter().any(|p| p.usable(mode, payload.len())));
    if !usable {
        return Err(SearchError::NoUsablePads {
            len: payload.len(),
            mode,
        });
    }
    let per_binary = surface
        .binaries
        .iter()
        .map(|b| {
            let (dets, injected) = surface.detect_injected(detector, b, &b.pads, payload, mode, true)?;
            let counts = micro(&b.binary, &dets, surface.filter)?;
            let (precision, recall, f1) = prf1(&counts);
            Ok(BinaryEval {
                binary: b.binary.id().to_string(),
                injected_pads: injected,
                counts,
                precision,
                recall,
                f1,
                delta_f1: f1 - b.baseline_f1,
            })
        })
        .collect::<Result<Vec<_>, SearchError>>()?;
    let mean_f1 = mean(per_binary.iter().map(|b| b.f1));
    Ok(PayloadEval {
        payload: payload.to_vec(),
        mode,
        delta_f1: mean_f1 - surface.baseline_mean_f1(),
        fp_total: per_binary.iter().map(|b| b.counts.fp).sum(),
        fn_total: per_binary.iter().map(|b| b.counts.fn_).sum(),
        mean_f1,
        per_binary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    MinF1,
    MaxFpCount,
}

impl Objective {
    /// The ranked quantity; smaller is better for both objectives.
    pub fn key(self, e: &PayloadEval) -> f64 {
        match self {
            Objective::MinF1 => e.mean_f1,
            Objective::MaxFpCount => -(e.fp_total as f64),
        }
    }

    /// The value as reported (F1, or FP count).
    pub fn value(self, e: &PayloadEval) -> f64 {
        match self {
            Objective::MinF1 => e.mean_f1,
            Objective::MaxFpCount => e.fp_total as f64,
        }
    }
}

impl FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "min_f1" => Ok(Objective::MinF1),
            "max_fp_count" => Ok(Objective::MaxFpCount),
            _ => Err(format!("unknown objective {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    #[default]
    #[serde(rename = "induce_FN", alias = "induce_fn")]
    InduceFn,
    #[serde(rename = "induce_FP", alias = "induce_fp")]
    InduceFp,
}

impl FromStr for TargetKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "induce_FN" | "induce_fn" | "fn" => Ok(TargetKind::InduceFn),
            "induce_FP" | "induce_fp" | "fp" => Ok(TargetKind::InduceFp),
            _ => Err(format!("unknown target kind {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub payload_length: usize,
    pub budget: usize,
    #[serde(default, with = "hex_list")]
    pub seeds: Vec<Vec<u8>>,
    pub mode: InjectionMode,
    #[serde(default)]
    pub target_kind: TargetKind,
    pub rng_seed: u64,
    #[serde(default)]
    pub objective: Objective,
    /// Restrict random candidates to single valid instructions.
    #[serde(default)]
    pub valid_only: bool,
}

mod hex_list {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec<u8>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(hex::encode))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<u8>>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|h| hex::decode(h).map_err(serde::de::Error::custom))
            .collect()
    }
}

impl SearchConfig {
    pub fn new(payload_length: usize, budget: usize, mode: InjectionMode, rng_seed: u64) -> Self {
        SearchConfig {
            payload_length,
            budget,
            seeds: Vec::new(),
            mode,
            target_kind: TargetKind::default(),
            rng_seed,
            objective: Objective::default(),
            valid_only: false,
        }
    }

    pub fn with_seeds(mut self, seeds: Vec<Vec<u8>>) -> Self {
        self.seeds = seeds;
        self
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: String| Err(SearchError::InvalidConfig(m));
        if self.payload_length == 0 {
            return bad("payload_length must be at least 1".into());
        }
        if self.budget == 0 {
            return bad("budget must be at least 1".into());
        }
        if self.budget < self.seeds.len() {
            return bad(format!("budget {} is below the {} seeds", self.budget, self.seeds.len()));
        }
        if let Some(s) = self.seeds.iter().find(|s| s.len() != self.payload_length) {
            return bad(format!(
                "seed {} is not {} bytes long",
                hex::encode(s),
                self.payload_length
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Seed,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub origin: Origin,
    pub eval: PayloadEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub config: SearchConfig,
    pub baseline: Baseline,
    /// In evaluation order.
    pub candidates: Vec<Candidate>,
    /// Candidate indices, best first; ties keep evaluation order.
    pub ranking: Vec<usize>,
}

impl SearchResult {
    pub fn best(&self) -> Option<&Candidate> {
        self.ranking.first().map(|&i| &self.candidates[i])
    }

    pub fn ranked(&self) -> impl Iterator<Item = &Candidate> {
        self.ranking.iter().map(|&i| &self.candidates[i])
    }

    /// 1-based count of evaluations until `reached` first holds.
    pub fn evaluations_to(&self, reached: impl Fn(&PayloadEval) -> bool) -> Option<usize> {
        self.candidates.iter().position(|c| reached(&c.eval)).map(|i| i + 1)
    }
}

/// Evaluate the seeds, then distinct random payloads up to the budget, and
/// rank them by the objective.
pub fn attack_search(
    detector: &dyn Detector,
    surface: &AttackSurface,
    config: &SearchConfig,
) -> Result<SearchResult, SearchError> {
    config.validate()?;
    let mut payloads: Vec<(Origin, Vec<u8>)> = Vec::with_capacity(config.budget);
    let mut seen = HashSet::new();
    for s in &config.seeds {
        if seen.insert(s.clone()) {
            payloads.push((Origin::Seed, s.clone()));
        }
    }
    let random = sample_payloads(
        config.payload_length,
        config.budget - payloads.len(),
        config.rng_seed,
        config.valid_only,
        &seen,
    );
    payloads.extend(random.into_iter().map(|p| (Origin::Random, p)));
    let candidates = payloads
        .par_iter()
        .enumerate()
        .map(|(index, (origin, p))| {
            Ok(Candidate {
                index,
                origin: *origin,
                eval: evaluate_payload(detector, surface, p, config.mode)?,
            })
        })
        .collect::<Result<Vec<_>, SearchError>>()?;
    let mut ranking: Vec<usize> = (0..candidates.len()).collect();
    ranking.sort_by(|&a, &b| {
        let ka = config.objective.key(&candidates[a].eval);
        let kb = config.objective.key(&candidates[b].eval);
        ka.total_cmp(&kb).then(a.cmp(&b))
    });
    Ok(SearchResult {
        config: config.clone(),
        baseline: surface.baseline(),
        candidates,
        ranking,
    })
}

pub const SEARCH_LOG_HEADER: [&str; 6] = ["candidate_idx", "payload_hex", "mean_f1", "delta_f1", "fp_total", "fn_total"];

/// One row per candidate, in evaluation order.
pub fn search_log_csv(result: &SearchResult, comment: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(c) = comment {
        out.push_str(&format!("# {c}\n"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SEARCH_LOG_HEADER).unwrap();
    for c in &result.candidates {
        w.write_record([
            c.index.to_string(),
            hex::encode(&c.eval.payload),
            format!("{:.6}", c.eval.mean_f1),
            format!("{:.6}", c.eval.delta_f1),
            c.eval.fp_total.to_string(),
            c.eval.fn_total.to_string(),
        ])
        .unwrap();
    }
    out.push_str(std::str::from_utf8(&w.into_inner().unwrap()).unwrap());
    out
}

/// Mean and population SD of per-binary micro F1 over a corpus.
pub fn corpus_f1(detector: &dyn Detector, corpus: &LoadedCorpus, filter: ClassFilter) -> Result<MeanSd, SearchError> {
    let f1s = corpus
        .binaries
        .par_iter()
        .map(|b| {
            let dets = detector.detect(&b.image)?;
            Ok(prf1(&micro(b, &dets, filter)?).2)
        })
        .collect::<Result<Vec<f64>, SearchError>>()?;
    Ok(MeanSd::of(&f1s))
}

#[cfg(test)]
mod tests;
