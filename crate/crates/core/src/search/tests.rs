use super::*;
use crate::corpus::synth::PadSpec;
use crate::corpus::{generate_synthetic_corpus, SynthSpec};
use crate::detectors::PatternDetector;
use crate::rewriter::PadPosition;

const B: InjectionMode = InjectionMode::VerbatimAfterReturn;

fn padded(functions: usize, seed: u64) -> LoadedCorpus {
    let mut spec = SynthSpec::new(functions, &[("plain", 1)]);
    spec.binaries = 2;
    spec.alignment = vec![1];
    spec.pad = Some(PadSpec {
        position: PadPosition::EpiloguePad,
        size: 4,
    });
    generate_synthetic_corpus(&spec, seed).unwrap().to_loaded()
}

fn no_extents() -> PatternDetector {
    PatternDetector::new(Default::default(), false)
}

#[test]
fn exhaustive_single_bytes() {
    let all = random_payloads(1, 256, 3, false);
    assert_eq!(all.len(), 256);
    assert_eq!(all.iter().collect::<HashSet<_>>().len(), 256);
    assert_eq!(random_payloads(1, 300, 3, false).len(), 256);
}

#[test]
fn payloads_deterministic_and_distinct() {
    let a = random_payloads(4, 100, 9, false);
    assert_eq!(a, random_payloads(4, 100, 9, false));
    assert_ne!(a, random_payloads(4, 100, 10, false));
    assert_eq!(a.iter().collect::<HashSet<_>>().len(), 100);
    for p in random_payloads(4, 100, 9, true) {
        assert_eq!(x86::instruction_len(&p), Some(4));
    }
}

#[test]
fn nop_payload_is_degenerate() {
    let corpus = padded(20, 1);
    let det = no_extents();
    let surface = AttackSurface::prepare(&det, &corpus, PadHint::Auto, ClassFilter::Both).unwrap();
    let e = evaluate_payload(&det, &surface, x86::NOPS[3], B).unwrap();
    assert_eq!(e.delta_f1, 0.0);
    assert!(e.per_binary.iter().all(|b| b.delta_f1 == 0.0 && b.injected_pads > 0));
}

#[test]
fn prologue_bytes_in_epilogue_pads() {
    let corpus = padded(20, 1);
    let det = no_extents();
    let surface = AttackSurface::prepare(&det, &corpus, PadHint::Auto, ClassFilter::Both).unwrap();
    let e = evaluate_payload(&det, &surface, &crate::corpus::synth::PUSH_RBP_MOV_RBP_RSP, B).unwrap();
    for (b, s) in e.per_binary.iter().zip(&surface.binaries) {
        // One false start per injected pad, nothing else changes.
        assert_eq!(b.counts.fp, s.baseline_counts.fp + b.injected_pads as u64);
        assert_eq!(b.counts.tp, s.baseline_counts.tp);
        assert!(b.precision < 0.8);
    }
    assert!(e.delta_f1 < 0.0);
}

#[test]
fn oversized_payload_has_no_pads() {
    let corpus = padded(5, 1);
    let det = no_extents();
    let surface = AttackSurface::prepare(&det, &corpus, PadHint::Auto, ClassFilter::Both).unwrap();
    assert!(matches!(
        evaluate_payload(&det, &surface, &[0xcc; 5], B),
        Err(SearchError::NoUsablePads { len: 5, .. })
    ));
}

#[test]
fn single_seed_budget_one() {
    let corpus = padded(10, 2);
    let det = no_extents();
    let surface = AttackSurface::prepare(&det, &corpus, PadHint::Auto, ClassFilter::Both).unwrap();
    let p = vec![0x55, 0x48, 0x89, 0xe5];
    let r = attack_search(&det, &surface, &SearchConfig::new(4, 1, B, 0).with_seeds(vec![p.clone()])).unwrap();
    assert_eq!(r.candidates.len(), 1);
    assert_eq!(r.best().unwrap().eval.payload, p);
    assert_eq!(r.best().unwrap().origin, Origin::Seed);
    assert!(SearchConfig::new(4, 0, B, 0).validate().is_err());
    assert!(SearchConfig::new(4, 1, B, 0).with_seeds(vec![p.clone(), vec![1; 4]]).validate().is_err());
    assert!(SearchConfig::new(4, 2, B, 0).with_seeds(vec![vec![1; 3]]).validate().is_err());
}

#[test]
fn search_is_deterministic_and_ranked() {
    let corpus = padded(10, 2);
    let det = no_extents();
    let surface = AttackSurface::prepare(&det, &corpus, PadHint::Auto, ClassFilter::Both).unwrap();
    let cfg = SearchConfig::new(1, 40, B, 7).with_seeds(vec![vec![0x55]]);
    let a = attack_search(&det, &surface, &cfg).unwrap();
    let b = attack_search(&det, &surface, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(search_log_csv(&a, None), search_log_csv(&b, None));
    for w in a.ranking.windows(2) {
        assert!(a.candidates[w[0]].eval.mean_f1 <= a.candidates[w[1]].eval.mean_f1);
    }
    let log = search_log_csv(&a, Some("config-hash: x"));
    assert!(log.starts_with("# config-hash: x\ncandidate_idx,payload_hex,mean_f1,delta_f1,fp_total,fn_total\n0,55,"));
    assert_eq!(log.lines().count(), 42);
}

#[test]
fn max_fp_objective_ranks_by_false_positives() {
    let corpus = padded(10, 2);
    let det = no_extents();
    let surface = AttackSurface::prepare(&det, &corpus, PadHint::Auto, ClassFilter::Both).unwrap();
    let mut cfg = SearchConfig::new(4, 3, B, 1).with_seeds(vec![vec![0x90; 4], vec![0x55, 0x48, 0x89, 0xe5]]);
    cfg.objective = Objective::MaxFpCount;
    let r = attack_search(&det, &surface, &cfg).unwrap();
    assert_eq!(r.best().unwrap().index, 1);
}

#[test]
fn validation_round() {
    let corpus = padded(10, 4);
    let det = no_extents();
    let surface = AttackSurface::prepare(&det, &corpus, PadHint::Auto, ClassFilter::Both).unwrap();
    let prologue = vec![0x55, 0x48, 0x89, 0xe5];
    let empty = validate_attack(&det, &surface, &[prologue.clone()], &[], B, TargetKind::InduceFp).unwrap();
    assert!(empty.outcomes.is_empty());

    let b = &surface.binaries[0];
    let f = b.binary.labels.functions().next().unwrap().0;
    let t = Target {
        binary: b.binary.id().to_string(),
        function: f,
    };
    let r = validate_attack(&det, &surface, &[prologue.clone()], &[t.clone()], B, TargetKind::InduceFp).unwrap();
    assert_eq!(r.confirmed().count(), 1);
    // The pattern detector never loses boundaries by epilogue injection.
    let r = validate_attack(&det, &surface, &[prologue.clone()], &[t], B, TargetKind::InduceFn).unwrap();
    assert_eq!(r.unconfirmed().count(), 1);

    let missing = Target {
        binary: b.binary.id().to_string(),
        function: f + 1,
    };
    assert!(matches!(
        validate_attack(&det, &surface, &[prologue.clone()], &[missing], B, TargetKind::InduceFp),
        Err(SearchError::TargetWithoutPad { .. })
    ));

    let rec = recovery(&det, &surface, &prologue, B).unwrap();
    assert_eq!(rec[0].total, 10);
    assert_eq!(
        Recovery {
            binary: "x".into(),
            recovered: 36,
            total: 145
        }
        .to_string(),
        "recovered 36 of 145 functions"
    );
}

#[test]
fn confirmed_false_negative() {
    // A detector that forgets starts whenever the preceding byte is not a NOP
    // or ret.
    struct Fragile;
    impl Detector for Fragile {
        fn id(&self) -> &str {
            "fragile"
        }
        fn fingerprint(&self) -> String {
            "fragile".into()
        }
        fn detect(&self, image: &crate::binary::CodeImage) -> Result<Vec<Detection>, DetectorError> {
            let mut out = Vec::new();
            for s in image.executable_sections() {
                let bytes = image.section_bytes(s);
                for w in bytes.windows(5).enumerate() {
                    let (i, w) = w;
                    if matches!(w[0], 0x90 | 0xc3 | 0x00) && w[1..] == [0x55, 0x48, 0x89, 0xe5] {
                        out.push(Detection::certain(s.virtual_address + i as u64 + 1, crate::binary::Label::Start));
                    }
                }
            }
            Ok(out)
        }
    }
    let corpus = padded(6, 5);
    let surface = AttackSurface::prepare(&Fragile, &corpus, PadHint::Auto, ClassFilter::Both).unwrap();
    let b = &surface.binaries[0];
    let f = b.binary.labels.functions().next().unwrap().0;
    let t = Target {
        binary: b.binary.id().to_string(),
        function: f,
    };
    let r = validate_attack(&Fragile, &surface, &[vec![0xcc; 4]], &[t], B, TargetKind::InduceFn).unwrap();
    assert!(r.outcomes[0].confirmed);
}

#[test]
fn attack_corpus_keeps_labels() {
    let corpus = padded(8, 6);
    let attack = build_attack_corpus(&corpus, &[vec![0xcc; 4], vec![0x55, 0x48, 0x89, 0xe5]], B, PadHint::Auto, 1).unwrap();
    for (a, c) in attack.binaries.iter().zip(&corpus.binaries) {
        assert_eq!(a.labels, c.labels);
        assert_eq!(a.image.data().len(), c.image.data().len());
        assert_ne!(a.image.data(), c.image.data());
    }
}
