//! Fine-tuning on injected binaries and the cost it carries elsewhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{corpus_f1, SearchError};
use crate::corpus::LoadedCorpus;
use crate::detectors::{WindowClassifierModel, WindowDetector, WindowHyper};
use crate::metrics::{ClassFilter, MeanSd};
use crate::rewriter::{apply_injections, plan_injection, scan_pads, InjectionMode, PadHint};

/// Copy of `corpus` with every usable pad holding a payload drawn uniformly
/// from `payloads`. Labels are untouched.
pub fn build_attack_corpus(
    corpus: &LoadedCorpus,
    payloads: &[Vec<u8>],
    mode: InjectionMode,
    hint: PadHint,
    rng_seed: u64,
) -> Result<LoadedCorpus, SearchError> {
    if payloads.is_empty() {
        return Err(SearchError::InvalidConfig("attack corpus needs at least one payload".into()));
    }
    let mut out = corpus.clone();
    for (i, b) in out.binaries.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        rng.set_stream(i as u64);
        let mut plans = Vec::new();
        for pad in scan_pads(&b.image, &b.labels, hint) {
            let p = &payloads[rng.gen_range(0..payloads.len())];
            if pad.usable(mode, p.len()) {
                plans.push(plan_injection(&pad, p, mode)?);
            }
        }
        b.image = apply_injections(&b.image, &plans)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrainReport {
    pub model: WindowClassifierModel,
    pub attack_before: MeanSd,
    pub attack_after: MeanSd,
    pub heldout_before: MeanSd,
    pub heldout_after: MeanSd,
}

/// Continue training `model` on `clean` plus `attack`, then score the old
/// and new model on `attack` and on `heldout`.
pub fn adversarial_retrain(
    model: &WindowClassifierModel,
    clean: &LoadedCorpus,
    attack: &LoadedCorpus,
    heldout: &LoadedCorpus,
    hyper: &WindowHyper,
    seed: u64,
) -> Result<RetrainReport, SearchError> {
    let union = LoadedCorpus::merged(&[clean, attack]);
    let retrained = model.continue_training(&union, hyper, seed)?;
    let before = WindowDetector::new(model.clone(), None);
    let after = WindowDetector::new(retrained.clone(), None);
    Ok(RetrainReport {
        attack_before: corpus_f1(&before, attack, ClassFilter::Both)?,
        attack_after: corpus_f1(&after, attack, ClassFilter::Both)?,
        heldout_before: corpus_f1(&before, heldout, ClassFilter::Both)?,
        heldout_after: corpus_f1(&after, heldout, ClassFilter::Both)?,
        model: retrained,
    })
}
