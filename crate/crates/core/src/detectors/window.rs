//! Multinomial linear classifier over one-hot byte windows.
//!
//! Each byte is classified from the `2r+1` bytes centred on it. Window
//! positions falling outside the byte's section take the reserved token
//! [`PAD_TOKEN`], so the one-hot vocabulary has 257 entries per position.

use std::ops::Range;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{normalize, Detection, Detector, DetectorError};
use crate::binary::{CodeImage, Label};
use crate::corpus::{CorpusBinary, LoadedCorpus};

pub const VOCAB: usize = 257;
pub const PAD_TOKEN: usize = 256;
/// Class index order; also the tie-break priority at equal scores.
pub const CLASS_ORDER: [Label; 3] = [Label::Neither, Label::Start, Label::End];
const CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowHyper {
    pub radius: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// N samples drawn per S label each epoch (S:E:N = 1:1:n).
    pub neither_per_start: usize,
    /// L2 penalty coefficient on the weights.
    pub weight_decay: f64,
}

impl Default for WindowHyper {
    fn default() -> Self {
        WindowHyper {
            radius: 4,
            epochs: 10,
            learning_rate: 0.2,
            batch_size: 32,
            neither_per_start: 20,
            weight_decay: 0.0,
        }
    }
}

impl WindowHyper {
    fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::InvalidHyper(m.into()));
        if self.radius < 1 {
            return bad("radius must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub hyper: WindowHyper,
    pub corpus_fingerprint: String,
    pub samples_per_epoch: usize,
    pub final_loss: f64,
    /// Fingerprint of the model training continued from, if any.
    pub initialized_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowClassifierModel {
    pub radius: usize,
    /// Feature-major: index `((offset * VOCAB) + token) * 3 + class`.
    pub weights: Vec<f64>,
    pub bias: [f64; CLASSES],
    pub meta: Option<TrainingMeta>,
}

/// Hash over every training binary's bytes and labels, in corpus order.
pub fn corpus_fingerprint(corpus: &LoadedCorpus) -> String {
    let mut h = Sha256::new();
    for b in &corpus.binaries {
        h.update(b.id().as_bytes());
        h.update([0]);
        h.update(b.image.data());
        h.update(b.labels.to_text());
    }
    hex::encode(h.finalize())
}

struct Sample {
    tokens: Vec<u16>,
    class: usize,
}

fn window_tokens(bytes: &[u8], pos: usize, radius: usize, out: &mut Vec<u16>) {
    out.clear();
    for j in 0..2 * radius + 1 {
        let k = pos as isize + j as isize - radius as isize;
        out.push(if k < 0 || k as usize >= bytes.len() {
            PAD_TOKEN as u16
        } else {
            bytes[k as usize] as u16
        });
    }
}

fn softmax(scores: [f64; CLASSES]) -> [f64; CLASSES] {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = scores.map(|s| (s - m).exp());
    let z: f64 = e.iter().sum();
    e.map(|x| x / z)
}

/// Argmax honouring [`CLASS_ORDER`] at ties.
fn argmax(scores: &[f64; CLASSES]) -> usize {
    let mut best = 0;
    for c in 1..CLASSES {
        if scores[c] > scores[best] {
            best = c;
        }
    }
    best
}

impl WindowClassifierModel {
    pub fn zeros(radius: usize) -> Self {
        WindowClassifierModel {
            radius,
            weights: vec![0.0; (2 * radius + 1) * VOCAB * CLASSES],
            bias: [0.0; CLASSES],
            meta: None,
        }
    }

    pub fn window_len(&self) -> usize {
        2 * self.radius + 1
    }

    fn scores_of(&self, tokens: &[u16]) -> [f64; CLASSES] {
        let mut s = self.bias;
        for (j, &t) in tokens.iter().enumerate() {
            let base = (j * VOCAB + t as usize) * CLASSES;
            s[0] += self.weights[base];
            s[1] += self.weights[base + 1];
            s[2] += self.weights[base + 2];
        }
        s
    }

    /// Class scores for the byte at `pos` of `bytes` (one section).
    fn scores_at(&self, bytes: &[u8], pos: usize) -> [f64; CLASSES] {
        let r = self.radius as isize;
        let mut s = self.bias;
        for j in 0..self.window_len() {
            let k = pos as isize + j as isize - r;
            let t = if k < 0 || k as usize >= bytes.len() {
                PAD_TOKEN
            } else {
                bytes[k as usize] as usize
            };
            let base = (j * VOCAB + t) * CLASSES;
            s[0] += self.weights[base];
            s[1] += self.weights[base + 1];
            s[2] += self.weights[base + 2];
        }
        s
    }

    /// Per-class probabilities at a virtual address.
    pub fn probabilities(&self, image: &CodeImage, address: u64) -> Option<[f64; CLASSES]> {
        let s = image.section_containing(address).ok()?;
        let bytes = image.section_bytes(s);
        Some(softmax(self.scores_at(bytes, (address - s.virtual_address) as usize)))
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.radius as u64).to_le_bytes());
        for w in self.weights.iter().chain(&self.bias) {
            h.update(w.to_bits().to_le_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }

    fn check(&self) -> Result<(), DetectorError> {
        if self.radius < 1 {
            return Err(DetectorError::ModelFormat("radius must be at least 1".into()));
        }
        if self.weights.len() != self.window_len() * VOCAB * CLASSES {
            return Err(DetectorError::ModelFormat(format!(
                "expected {} weights for radius {}, found {}",
                self.window_len() * VOCAB * CLASSES,
                self.radius,
                self.weights.len()
            )));
        }
        if !self.weights.iter().chain(&self.bias).all(|w| w.is_finite()) {
            return Err(DetectorError::ModelFormat("non-finite weight".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).unwrap()
    }

    pub fn from_json(text: &str) -> Result<Self, DetectorError> {
        let m: Self = serde_json::from_str(text).map_err(|e| DetectorError::ModelFormat(e.to_string()))?;
        m.check()?;
        Ok(m)
    }

    #[cfg(test)]
    /// Mean cross-entropy plus `weight_decay/2 * |w|^2`, with the dense
    /// gradient (weights, bias).
    fn loss_and_gradient(&self, batch: &[Sample], weight_decay: f64) -> (f64, Vec<f64>, [f64; CLASSES]) {
        let mut gw = vec![0.0; self.weights.len()];
        let mut gb = [0.0; CLASSES];
        let n = batch.len() as f64;
        let mut loss = 0.0;
        for s in batch {
            let p = softmax(self.scores_of(&s.tokens));
            loss -= p[s.class].ln();
            for c in 0..CLASSES {
                let g = (p[c] - (c == s.class) as u8 as f64) / n;
                gb[c] += g;
                for (j, &t) in s.tokens.iter().enumerate() {
                    gw[(j * VOCAB + t as usize) * CLASSES + c] += g;
                }
            }
        }
        loss /= n;
        let sq: f64 = self.weights.iter().map(|w| w * w).sum();
        loss += 0.5 * weight_decay * sq;
        for (g, w) in gw.iter_mut().zip(&self.weights) {
            *g += weight_decay * w;
        }
        (loss, gw, gb)
    }

    /// One minibatch SGD step; returns the batch's mean cross-entropy.
    fn sgd_step(&mut self, batch: &[&Sample], lr: f64, weight_decay: f64) -> f64 {
        let n = batch.len() as f64;
        let probs: Vec<[f64; CLASSES]> = batch.iter().map(|s| softmax(self.scores_of(&s.tokens))).collect();
        if weight_decay > 0.0 {
            let shrink = 1.0 - lr * weight_decay;
            self.weights.iter_mut().for_each(|w| *w *= shrink);
        }
        let mut loss = 0.0;
        for (s, p) in batch.iter().zip(&probs) {
            loss -= p[s.class].ln();
            for c in 0..CLASSES {
                let step = lr * (p[c] - (c == s.class) as u8 as f64) / n;
                self.bias[c] -= step;
                for (j, &t) in s.tokens.iter().enumerate() {
                    self.weights[(j * VOCAB + t as usize) * CLASSES + c] -= step;
                }
            }
        }
        loss / n
    }

    /// Continue training from these weights on `corpus`.
    pub fn continue_training(
        &self,
        corpus: &LoadedCorpus,
        hyper: &WindowHyper,
        seed: u64,
    ) -> Result<Self, DetectorError> {
        if hyper.radius != self.radius {
            return Err(DetectorError::InvalidHyper(format!(
                "radius {} differs from the model's {}",
                hyper.radius, self.radius
            )));
        }
        let mut model = self.clone();
        model.meta = None;
        let from = self.fingerprint();
        fit(&mut model, corpus, hyper, seed)?;
        if let Some(m) = model.meta.as_mut() {
            m.initialized_from = Some(from);
        }
        Ok(model)
    }
}

/// Positions of one binary's code bytes, for uniform N sampling.
struct CodeIndex<'a> {
    // (binary, section bytes, section base, flat offset of first byte)
    spans: Vec<(&'a CorpusBinary, &'a [u8], u64, usize)>,
    total: usize,
}

impl<'a> CodeIndex<'a> {
    fn new(corpus: &'a LoadedCorpus) -> Self {
        let mut spans = Vec::new();
        let mut total = 0;
        for b in &corpus.binaries {
            for s in b.image.executable_sections() {
                let bytes = b.image.section_bytes(s);
                if bytes.is_empty() {
                    continue;
                }
                spans.push((b, bytes, s.virtual_address, total));
                total += bytes.len();
            }
        }
        CodeIndex { spans, total }
    }

    fn locate(&self, flat: usize) -> (&'a CorpusBinary, &'a [u8], u64, usize) {
        let i = self.spans.partition_point(|s| s.3 <= flat) - 1;
        let (b, bytes, base, first) = self.spans[i];
        (b, bytes, base, flat - first)
    }
}

fn fit(
    model: &mut WindowClassifierModel,
    corpus: &LoadedCorpus,
    hyper: &WindowHyper,
    seed: u64,
) -> Result<(), DetectorError> {
    hyper.validate()?;
    if corpus.is_empty() {
        return Err(DetectorError::EmptyCorpus);
    }
    let index = CodeIndex::new(corpus);
    if index.total == 0 {
        return Err(DetectorError::EmptyCorpus);
    }
    let r = hyper.radius;

    let mut positives = Vec::new();
    let mut n_starts = 0;
    for &(b, bytes, base, _) in &index.spans {
        let range = base..base + bytes.len() as u64;
        for (&a, class) in b
            .labels
            .starts()
            .range(range.clone())
            .map(|a| (a, 1))
            .chain(b.labels.ends().range(range).map(|a| (a, 2)))
        {
            let mut tokens = Vec::with_capacity(2 * r + 1);
            window_tokens(bytes, (a - base) as usize, r, &mut tokens);
            positives.push(Sample { tokens, class });
            n_starts += (class == 1) as usize;
        }
    }
    let n_neither = hyper.neither_per_start * n_starts.max(1);
    let n_labeled = positives.len();
    let neither_available = index.total - n_labeled;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_loss = f64::NAN;
    for epoch in 0..hyper.epochs {
        let mut epoch_samples: Vec<Sample> = Vec::with_capacity(n_labeled + n_neither);
        if neither_available > 0 {
            while epoch_samples.len() < n_neither {
                let (b, bytes, base, off) = index.locate(rng.gen_range(0..index.total));
                if b.labels.label_at(base + off as u64) != Label::Neither {
                    continue;
                }
                let mut tokens = Vec::with_capacity(2 * r + 1);
                window_tokens(bytes, off, r, &mut tokens);
                epoch_samples.push(Sample { tokens, class: 0 });
            }
        }
        let mut order: Vec<usize> = (0..n_labeled + epoch_samples.len()).collect();
        order.shuffle(&mut rng);
        let get = |i: usize| -> &Sample {
            if i < n_labeled {
                &positives[i]
            } else {
                &epoch_samples[i - n_labeled]
            }
        };
        let mut total = 0.0;
        let mut batches = 0;
        let mut batch: Vec<&Sample> = Vec::with_capacity(hyper.batch_size);
        for chunk in order.chunks(hyper.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| get(i)));
            total += model.sgd_step(&batch, hyper.learning_rate, hyper.weight_decay);
            batches += 1;
        }
        last_loss = total / batches.max(1) as f64;
        if !last_loss.is_finite() || !model.bias.iter().all(|b| b.is_finite()) {
            return Err(DetectorError::NonFiniteLoss { epoch });
        }
    }
    if model.weights.iter().any(|w| !w.is_finite()) {
        return Err(DetectorError::NonFiniteLoss {
            epoch: hyper.epochs.saturating_sub(1),
        });
    }
    model.meta = Some(TrainingMeta {
        seed,
        hyper: hyper.clone(),
        corpus_fingerprint: corpus_fingerprint(corpus),
        samples_per_epoch: n_labeled + n_neither,
        final_loss: last_loss,
        initialized_from: None,
    });
    Ok(())
}

/// Train from zero weights. Deterministic given `(corpus, hyper, seed)`.
pub fn train_window_classifier(
    corpus: &LoadedCorpus,
    hyper: &WindowHyper,
    seed: u64,
) -> Result<WindowClassifierModel, DetectorError> {
    hyper.validate()?;
    let mut model = WindowClassifierModel::zeros(hyper.radius);
    fit(&mut model, corpus, hyper, seed)?;
    Ok(model)
}

/// A trained model used as a detector. With a threshold, boundary labels
/// whose probability falls below it are reported as N.
#[derive(Debug, Clone)]
pub struct WindowDetector {
    pub model: Arc<WindowClassifierModel>,
    pub threshold: Option<f64>,
    id: String,
    fingerprint: String,
}

impl WindowDetector {
    pub fn new(model: impl Into<Arc<WindowClassifierModel>>, threshold: Option<f64>) -> Self {
        let model = model.into();
        let fingerprint = format!(
            "window:{}:{}",
            model.fingerprint(),
            threshold.map_or("argmax".to_string(), |t| t.to_string())
        );
        WindowDetector {
            model,
            threshold,
            id: "window".into(),
            fingerprint,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    fn classify(&self, bytes: &[u8], base: u64, positions: Range<usize>, out: &mut Vec<Detection>) {
        for pos in positions {
            let s = self.model.scores_at(bytes, pos);
            let c = argmax(&s);
            if c == 0 {
                continue;
            }
            let p = softmax(s)[c];
            if self.threshold.is_some_and(|t| p < t) {
                continue;
            }
            out.push(Detection {
                address: base + pos as u64,
                label: CLASS_ORDER[c],
                confidence: p,
            });
        }
    }
}

impl Detector for WindowDetector {
    fn id(&self) -> &str {
        &self.id
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn detect(&self, image: &CodeImage) -> Result<Vec<Detection>, DetectorError> {
        let mut out = Vec::new();
        for s in image.executable_sections() {
            let bytes = image.section_bytes(s);
            self.classify(bytes, s.virtual_address, 0..bytes.len(), &mut out);
        }
        normalize(&mut out);
        Ok(out)
    }

    fn detect_mutated(
        &self,
        _original: &CodeImage,
        baseline: &[Detection],
        mutated: &CodeImage,
        changed: &[Range<u64>],
    ) -> Result<Vec<Detection>, DetectorError> {
        let r = self.model.radius as u64;
        let mut affected: Vec<Range<u64>> = changed
            .iter()
            .filter(|c| !c.is_empty())
            .map(|c| c.start.saturating_sub(r)..c.end + r)
            .collect();
        affected.sort_by_key(|a| a.start);
        let mut merged: Vec<Range<u64>> = Vec::new();
        for a in affected {
            match merged.last_mut() {
                Some(m) if a.start <= m.end => m.end = m.end.max(a.end),
                _ => merged.push(a),
            }
        }
        let inside = |addr: u64| {
            let i = merged.partition_point(|m| m.start <= addr);
            i > 0 && merged[i - 1].end > addr
        };
        let mut out: Vec<Detection> = baseline.iter().filter(|d| !inside(d.address)).copied().collect();
        for s in mutated.executable_sections() {
            let bytes = mutated.section_bytes(s);
            let sec = s.address_range();
            for m in &merged {
                let lo = m.start.max(sec.start);
                let hi = m.end.min(sec.end);
                if lo < hi {
                    let base = s.virtual_address;
                    self.classify(bytes, base, (lo - base) as usize..(hi - base) as usize, &mut out);
                }
            }
        }
        normalize(&mut out);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SynthSpec};
    use crate::metrics::{confusion, prf1, ClassFilter};

    fn small_corpus(functions: usize, variants: &[(&str, u32)], seed: u64) -> LoadedCorpus {
        generate_synthetic_corpus(&SynthSpec::new(functions, variants), seed)
            .unwrap()
            .to_loaded()
    }

    #[test]
    fn zero_weights_detect_nothing() {
        let c = small_corpus(5, &[("plain", 1)], 1);
        let det = WindowDetector::new(WindowClassifierModel::zeros(3), None);
        assert!(det.detect(&c.binaries[0].image).unwrap().is_empty());
    }

    #[test]
    fn empty_corpus_rejected() {
        let c = LoadedCorpus {
            manifest: Default::default(),
            binaries: vec![],
        };
        assert!(matches!(
            train_window_classifier(&c, &WindowHyper::default(), 0),
            Err(DetectorError::EmptyCorpus)
        ));
    }

    #[test]
    fn divergence_reported() {
        let c = small_corpus(5, &[("plain", 1)], 1);
        let hyper = WindowHyper {
            learning_rate: 1e308,
            epochs: 3,
            ..WindowHyper::default()
        };
        assert!(matches!(
            train_window_classifier(&c, &hyper, 0),
            Err(DetectorError::NonFiniteLoss { .. })
        ));
    }

    #[test]
    fn memorizes_one_binary() {
        let c = small_corpus(50, &[("plain", 1)], 3);
        // Run to convergence.
        let hyper = WindowHyper {
            epochs: 40,
            ..WindowHyper::default()
        };
        let model = train_window_classifier(&c, &hyper, 7).unwrap();
        let det = WindowDetector::new(model, None);
        let b = &c.binaries[0];
        let pred = det.detect(&b.image).unwrap();
        let counts = confusion(&b.labels, b.id(), &pred, ClassFilter::Both).unwrap();
        let (_, _, f1) = prf1(&counts.total());
        assert!(f1 >= 0.99, "f1 {f1}");
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let c = small_corpus(20, &[("plain", 1), ("frameless", 1)], 5);
        let h = WindowHyper {
            epochs: 3,
            ..WindowHyper::default()
        };
        let a = train_window_classifier(&c, &h, 11).unwrap();
        let b = train_window_classifier(&c, &h, 11).unwrap();
        assert_eq!(a.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>(), b.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.fingerprint(), b.fingerprint());
        let other = train_window_classifier(&c, &h, 12).unwrap();
        assert_ne!(a.fingerprint(), other.fingerprint());
        let meta = a.meta.as_ref().unwrap();
        assert_eq!(meta.seed, 11);
        assert_eq!(meta.corpus_fingerprint, corpus_fingerprint(&c));
        assert!(meta.final_loss.is_finite());
        let back = WindowClassifierModel::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut model = WindowClassifierModel::zeros(1);
        for w in model.weights.iter_mut() {
            *w = rng.gen_range(-0.5..0.5);
        }
        model.bias = [0.1, -0.2, 0.05];
        let batch: Vec<Sample> = (0..3)
            .map(|i| Sample {
                tokens: vec![rng.gen_range(0..257), rng.gen_range(0..256), PAD_TOKEN as u16],
                class: i,
            })
            .collect();
        let wd = 0.01;
        let (_, gw, gb) = model.loss_and_gradient(&batch, wd);
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        // Every weight touched by the batch, plus a few untouched ones.
        let mut idx: Vec<usize> = batch
            .iter()
            .flat_map(|s| {
                s.tokens
                    .iter()
                    .enumerate()
                    .flat_map(|(j, &t)| (0..3).map(move |c| (j * VOCAB + t as usize) * 3 + c))
            })
            .collect();
        idx.extend([0, 100, 2000]);
        for i in idx {
            let mut plus = model.clone();
            plus.weights[i] += h;
            let mut minus = model.clone();
            minus.weights[i] -= h;
            let num = (plus.loss_and_gradient(&batch, wd).0 - minus.loss_and_gradient(&batch, wd).0) / (2.0 * h);
            assert!(rel(gw[i], num) < 1e-4 || (gw[i] - num).abs() < 1e-9, "w[{i}] {} vs {num}", gw[i]);
        }
        for c in 0..3 {
            let mut plus = model.clone();
            plus.bias[c] += h;
            let mut minus = model.clone();
            minus.bias[c] -= h;
            let num = (plus.loss_and_gradient(&batch, wd).0 - minus.loss_and_gradient(&batch, wd).0) / (2.0 * h);
            assert!(rel(gb[c], num) < 1e-4, "b[{c}]");
        }
    }

    #[test]
    fn incremental_matches_full() {
        use crate::rewriter::{apply_injections, plan_all, scan_pads, InjectionMode, PadHint};
        let mut spec = SynthSpec::new(30, &[("plain", 1)]);
        spec.pad = Some(crate::corpus::synth::PadSpec {
            position: crate::rewriter::PadPosition::EpiloguePad,
            size: 4,
        });
        let c = generate_synthetic_corpus(&spec, 2).unwrap().to_loaded();
        let model = train_window_classifier(&c, &WindowHyper { epochs: 2, ..Default::default() }, 1).unwrap();
        let det = WindowDetector::new(model, None);
        let b = &c.binaries[0];
        let base = det.detect(&b.image).unwrap();
        let pads = scan_pads(&b.image, &b.labels, PadHint::Auto);
        let plans = plan_all(&pads, &[0x55, 0x48, 0x89, 0xe5], InjectionMode::VerbatimAfterReturn);
        let mutated = apply_injections(&b.image, &plans).unwrap();
        let changed: Vec<_> = plans.iter().map(|p| p.pad.range()).collect();
        let inc = det.detect_mutated(&b.image, &base, &mutated, &changed).unwrap();
        assert_eq!(inc, det.detect(&mutated).unwrap());
    }

    #[test]
    fn threshold_suppresses_low_confidence() {
        let c = small_corpus(10, &[("plain", 1)], 3);
        let model = Arc::new(train_window_classifier(&c, &WindowHyper { epochs: 2, ..Default::default() }, 1).unwrap());
        let img = &c.binaries[0].image;
        let all = WindowDetector::new(model.clone(), None).detect(img).unwrap();
        let strict = WindowDetector::new(model, Some(0.999_999)).detect(img).unwrap();
        assert!(strict.len() <= all.len());
        assert!(strict.iter().all(|d| d.confidence >= 0.999_999));
    }
}
