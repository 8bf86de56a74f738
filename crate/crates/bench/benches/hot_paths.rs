use criterion::{black_box, criterion_group, criterion_main, Criterion};

use fbsearch_core::corpus::synth::PadSpec;
use fbsearch_core::corpus::{generate_synthetic_corpus, LoadedCorpus, SynthSpec};
use fbsearch_core::detectors::{train_window_classifier, Detector, PatternDetector, WindowDetector, WindowHyper};
use fbsearch_core::metrics::{confusion, ClassFilter};
use fbsearch_core::rewriter::{apply_injections, plan_all, scan_pads, InjectionMode, PadHint, PadPosition};
use fbsearch_core::search::{evaluate_payload, AttackSurface};

fn corpus(seed: u64) -> LoadedCorpus {
    let mut spec = SynthSpec::new(80, &[("plain", 1), ("frameless", 1)]);
    spec.binaries = 4;
    spec.alignment = vec![1];
    spec.pad = Some(PadSpec {
        position: PadPosition::EpiloguePad,
        size: 4,
    });
    generate_synthetic_corpus(&spec, seed).unwrap().to_loaded()
}

fn benches(c: &mut Criterion) {
    let train = corpus(1);
    let test = corpus(2);
    let model = train_window_classifier(&train, &WindowHyper::default(), 1).unwrap();
    let window = WindowDetector::new(model, None);
    let pattern = PatternDetector::new(Default::default(), true);
    let b = &test.binaries[0];

    c.bench_function("window_detect_binary", |x| x.iter(|| window.detect(black_box(&b.image)).unwrap()));
    c.bench_function("pattern_detect_binary", |x| x.iter(|| pattern.detect(black_box(&b.image)).unwrap()));

    let dets = window.detect(&b.image).unwrap();
    c.bench_function("confusion_binary", |x| {
        x.iter(|| confusion(black_box(&b.labels), b.id(), black_box(&dets), ClassFilter::Both).unwrap())
    });

    let mode = InjectionMode::VerbatimAfterReturn;
    c.bench_function("scan_plan_apply", |x| {
        x.iter(|| {
            let pads = scan_pads(&b.image, &b.labels, PadHint::Auto);
            let plans = plan_all(&pads, &[0x55, 0x48, 0x89, 0xe5], mode);
            apply_injections(&b.image, &plans).unwrap()
        })
    });

    let surface = AttackSurface::prepare(&window, &test, PadHint::Auto, ClassFilter::Both).unwrap();
    c.bench_function("evaluate_payload_window", |x| {
        x.iter(|| evaluate_payload(&window, &surface, black_box(&[0x48, 0x83, 0xec, 0x08]), mode).unwrap())
    });
}

criterion_group!(hot_paths, benches);
criterion_main!(hot_paths);
