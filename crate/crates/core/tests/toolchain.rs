//! Cross-checks against binutils and a real compiler. Each test skips (with a
//! note on stderr) when the tool it needs is not installed.

use std::path::Path;
use std::process::Command;

use fbsearch_core::binary::{ground_truth_of, load_image};
use fbsearch_core::corpus::synth::PadSpec;
use fbsearch_core::corpus::{build_corpus, builtin_config, generate_synthetic_corpus, LoadedCorpus, OptLevel, Package, SynthSpec, Toolchain};
use fbsearch_core::rewriter::{apply_injections, plan_all, scan_pads, InjectionMode, PadHint, PadPosition};
use fbsearch_core::search::random_payloads;
use fbsearch_core::x86;

fn have(tool: &str) -> bool {
    let found = Command::new(tool).arg("--version").output().is_ok_and(|o| o.status.success());
    if !found {
        eprintln!("skipping: {tool} not available");
    }
    found
}

/// `(offset, length, assembly)` for each instruction objdump finds in raw bytes.
fn objdump_raw(bytes: &[u8]) -> Vec<(usize, usize, String)> {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("raw.bin");
    std::fs::write(&p, bytes).unwrap();
    let o = Command::new("objdump")
        .args(["-D", "-b", "binary", "-m", "i386:x86-64", "-M", "intel", "--insn-width=16"])
        .arg(&p)
        .output()
        .unwrap();
    assert!(o.status.success());
    let mut out: Vec<(usize, usize, String)> = Vec::new();
    for line in String::from_utf8_lossy(&o.stdout).lines() {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() < 3 || !parts[0].trim_end().ends_with(':') {
            continue;
        }
        let Ok(off) = usize::from_str_radix(parts[0].trim().trim_end_matches(':'), 16) else {
            continue;
        };
        let len = parts[1].split_whitespace().count();
        let asm = parts[2..].join(" ").split_whitespace().collect::<Vec<_>>().join(" ");
        // A REX byte not adjacent to the opcode is shown as its own line but
        // belongs to the next instruction.
        if let Some(prev) = out.last_mut() {
            if prev.2.starts_with("rex") && !prev.2.contains(' ') {
                prev.1 += len;
                prev.2 = format!("{} {asm}", prev.2);
                continue;
            }
        }
        out.push((off, len, asm));
    }
    out
}

#[test]
fn objdump_agrees_on_canonical_nops() {
    if !have("objdump") {
        return;
    }
    let all: Vec<u8> = x86::NOPS.concat();
    let insns = objdump_raw(&all);
    assert_eq!(insns.len(), 9);
    for (i, (_, len, asm)) in insns.iter().enumerate() {
        assert_eq!(*len, i + 1);
        assert!(asm.starts_with("nop") || asm == "xchg ax,ax", "{asm}");
    }
    let fill = objdump_raw(&x86::nop_fill(23));
    assert_eq!(fill.iter().map(|i| i.1).collect::<Vec<_>>(), [9, 9, 5]);
}

#[test]
fn objdump_agrees_on_valid_payloads() {
    if !have("objdump") {
        return;
    }
    let payloads = random_payloads(4, 64, 11, true);
    let insns = objdump_raw(&payloads.concat());
    assert_eq!(insns.len(), payloads.len());
    for (i, (off, len, asm)) in insns.iter().enumerate() {
        assert_eq!((*off, *len), (4 * i, 4), "{}", hex::encode(&payloads[i]));
        assert!(!asm.contains("(bad)"));
    }
}

#[test]
fn jump_over_immediate_decodes_as_jmp_then_movs() {
    if !have("objdump") {
        return;
    }
    let corpus = padded_corpus(9, 3);
    let b = &corpus.binaries[0];
    let pads = scan_pads(&b.image, &b.labels, PadHint::Auto);
    let plans = plan_all(&pads, &[0xde, 0xad, 0xbe, 0xef, 0x01], InjectionMode::JumpOverImmediate);
    assert!(!plans.is_empty());
    let insns = objdump_raw(&plans[0].rendered);
    assert!(insns[0].2.starts_with("jmp"), "{}", insns[0].2);
    assert_eq!(insns[1].2, "mov eax,0xefbeadde");
    assert_eq!(insns[2].2, "mov eax,0x1");
}

fn padded_corpus(pad: usize, binaries: usize) -> LoadedCorpus {
    let mut spec = SynthSpec::new(20, &[("plain", 1), ("endbr64+stack_protector", 1)]);
    spec.binaries = binaries;
    spec.pad = Some(PadSpec {
        position: PadPosition::EpiloguePad,
        size: pad,
    });
    generate_synthetic_corpus(&spec, 7).unwrap().to_loaded()
}

/// FUNC symbols as `(address, size)` according to readelf.
fn readelf_functions(path: &Path) -> Vec<(u64, u64)> {
    let o = Command::new("readelf").args(["-sW"]).arg(path).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut out: Vec<(u64, u64)> = String::from_utf8_lossy(&o.stdout)
        .lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (f.len() >= 8 && f[3] == "FUNC").then(|| (u64::from_str_radix(f[1], 16).unwrap(), f[2].parse().unwrap()))
        })
        .filter(|&(_, size)| size > 0)
        .collect();
    out.sort();
    out.dedup();
    out
}

#[test]
fn readelf_agrees_on_synthetic_and_injected_binaries() {
    if !have("readelf") || !have("objdump") {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SynthSpec::new(15, &[("plain", 1), ("safestack", 1)]);
    spec.binaries = 2;
    spec.pad = Some(PadSpec {
        position: PadPosition::EpiloguePad,
        size: 6,
    });
    let manifest = generate_synthetic_corpus(&spec, 4).unwrap().write(dir.path()).unwrap();
    for e in &manifest.entries {
        let path = manifest.resolve(e);
        let image = load_image(&path, e.binary_id()).unwrap();
        let (records, labels) = ground_truth_of(&image).unwrap();
        let ours: Vec<(u64, u64)> = records.iter().map(|r| (r.start, r.size)).collect();
        assert_eq!(ours, readelf_functions(&path));

        let pads = scan_pads(&image, &labels, PadHint::Auto);
        let plans = plan_all(&pads, &[0x55, 0x48, 0x89, 0xe5], InjectionMode::VerbatimAfterReturn);
        let mutated = apply_injections(&image, &plans).unwrap();
        let out = dir.path().join(format!("{}.mut", e.binary_id()));
        std::fs::write(&out, mutated.data()).unwrap();
        assert_eq!(readelf_functions(&out), ours);
        let d = Command::new("objdump").args(["-d"]).arg(&out).output().unwrap();
        assert!(d.status.success());
        let text = String::from_utf8_lossy(&d.stdout);
        assert!(text.matches("push   %rbp").count() >= records.len());
    }
}

#[test]
fn gcc_stack_protector_build() {
    if !have("gcc") {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("buf.c");
    std::fs::write(
        &src,
        "#include <string.h>\n\
         int fill(const char *s) { char b[64]; strcpy(b, s); return b[3]; }\n\
         int twice(int x) { return 2 * x; }\n\
         int main(int argc, char **argv) { return fill(argv[0]) + twice(argc); }\n",
    )
    .unwrap();
    let packages = [Package::from_path(&src).unwrap()];
    let gcc = Toolchain::resolve("gcc", "gcc").unwrap();
    let configs = [builtin_config("no_stack_protector").unwrap(), builtin_config("stack_protector_all").unwrap()];
    let out = dir.path().join("corpus");
    let report = build_corpus(&packages, &[gcc], &configs, &[OptLevel::O0], &out, "Normal").unwrap();
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    assert_eq!(report.manifest.entries.len(), 2);
    let corpus = LoadedCorpus::load(report.manifest).unwrap();
    // mov rax, fs:0x28 loads the canary.
    let canary = [0x64, 0x48, 0x8b, 0x04, 0x25, 0x28, 0x00, 0x00, 0x00];
    for b in &corpus.binaries {
        let starts: Vec<u64> = b.labels.starts().iter().copied().collect();
        assert!(starts.len() >= 3, "{}", b.id());
        let text = b.image.executable_sections().flat_map(|s| b.image.section_bytes(s).to_vec()).collect::<Vec<_>>();
        let protected = text.windows(canary.len()).any(|w| w == canary);
        assert_eq!(protected, b.entry.config == "stack_protector_all", "{}", b.id());
        assert_eq!(readelf_functions(&corpus.manifest.resolve(&b.entry)).len() >= starts.len(), true);
    }
}
