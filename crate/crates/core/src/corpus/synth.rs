//! Deterministic synthetic x86-64 corpus generator.
//!
//! Each binary's `.text` is a run of generated functions. A function is a
//! prologue drawn from a variant template, a filler body assembled from
//! common instruction encodings, and an epilogue that ends in `ret`. Layout
//! (alignment fill and NOP pads) is applied afterwards and consumes no
//! randomness, so the same seed yields the same function bytes whatever the
//! layout options are.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusBinary, CorpusError, CorpusManifest, LoadedCorpus, ManifestEntry, OptLevel};
use crate::binary::elf::{ElfWriter, SectionKind};
use crate::binary::{CodeImage, FunctionRecord, LabelMap};
use crate::rewriter::PadPosition;
use crate::x86;

pub const TEXT_BASE: u64 = 0x401000;

/// The stack-adjust instruction whose mid-function occurrences are confusable
/// with a frameless prologue: `sub rsp, 8`.
pub const SUB_RSP_8: [u8; 4] = [0x48, 0x83, 0xec, 0x08];
pub const ENDBR64: [u8; 4] = [0xf3, 0x0f, 0x1e, 0xfa];
pub const PUSH_RBP_MOV_RBP_RSP: [u8; 4] = [0x55, 0x48, 0x89, 0xe5];
/// `mov rax, qword ptr fs:0x28`
pub const GUARD_LOAD: [u8; 9] = [0x64, 0x48, 0x8b, 0x04, 0x25, 0x28, 0x00, 0x00, 0x00];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// `push rbp; mov rbp, rsp`
    Plain,
    /// `sub rsp, imm8` with no frame pointer, as emitted at higher optimization levels.
    Frameless,
    /// Guard load from `fs:0x28` in the prologue and a checked epilogue.
    StackProtector,
    /// Page-sized probing loop ahead of the allocation.
    StackClash,
    /// Unsafe-stack pointer bookkeeping through a TLS slot.
    Safestack,
}

/// A function shape: optional `endbr64` followed by a frame template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Variant {
    pub endbr: bool,
    pub frame: Frame,
}

impl FromStr for Variant {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut endbr = false;
        let mut frame = None;
        for part in s.split('+') {
            let f = match part.trim() {
                "endbr64" | "cet" => {
                    endbr = true;
                    continue;
                }
                "plain" => Frame::Plain,
                "frameless" => Frame::Frameless,
                "stack_protector" => Frame::StackProtector,
                "stack_clash" => Frame::StackClash,
                "safestack" => Frame::Safestack,
                other => {
                    return Err(CorpusError::InvalidSpec(format!("unknown variant {other:?}")))
                }
            };
            if frame.replace(f).is_some() {
                return Err(CorpusError::InvalidSpec(format!(
                    "variant {s:?} names more than one frame"
                )));
            }
        }
        Ok(Variant {
            endbr,
            frame: frame.unwrap_or(Frame::Plain),
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let frame = match self.frame {
            Frame::Plain => "plain",
            Frame::Frameless => "frameless",
            Frame::StackProtector => "stack_protector",
            Frame::StackClash => "stack_clash",
            Frame::Safestack => "safestack",
        };
        if self.endbr {
            write!(f, "endbr64+{frame}")
        } else {
            f.write_str(frame)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PadSpec {
    pub position: PadPosition,
    pub size: usize,
}

/// Generator configuration (the `--spec` TOML file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "defaults::binaries")]
    pub binaries: usize,
    /// Functions per binary.
    pub functions: usize,
    /// Variant name -> relative weight, e.g. `{ plain = 3, "endbr64+stack_protector" = 1 }`.
    pub variants: BTreeMap<String, u32>,
    /// Inclusive range of filler body length in bytes.
    #[serde(default = "defaults::body_len")]
    pub body_len: [usize; 2],
    /// Probability that a body slot is a stack-argument call sequence
    /// beginning with `sub rsp, 8`.
    #[serde(default)]
    pub confusable_rate: f64,
    /// Function alignment, cycled per binary. `1` packs functions tightly.
    #[serde(default = "defaults::alignment")]
    pub alignment: Vec<u64>,
    #[serde(default)]
    pub pad: Option<PadSpec>,
    #[serde(default = "defaults::dataset")]
    pub dataset: String,
    #[serde(default = "defaults::package")]
    pub package: String,
    #[serde(default = "defaults::opt")]
    pub opt: OptLevel,
    #[serde(default = "defaults::config")]
    pub config: String,
}

mod defaults {
    use super::OptLevel;
    pub fn binaries() -> usize {
        1
    }
    pub fn body_len() -> [usize; 2] {
        [12, 48]
    }
    pub fn alignment() -> Vec<u64> {
        vec![16]
    }
    pub fn dataset() -> String {
        "Synthetic".into()
    }
    pub fn package() -> String {
        "synth".into()
    }
    pub fn opt() -> OptLevel {
        OptLevel::O0
    }
    pub fn config() -> String {
        "baseline".into()
    }
}

impl SynthSpec {
    pub fn new(functions: usize, variants: &[(&str, u32)]) -> Self {
        SynthSpec {
            binaries: 1,
            functions,
            variants: variants
                .iter()
                .map(|&(v, w)| (v.to_string(), w))
                .collect(),
            body_len: defaults::body_len(),
            confusable_rate: 0.0,
            alignment: defaults::alignment(),
            pad: None,
            dataset: defaults::dataset(),
            package: defaults::package(),
            opt: defaults::opt(),
            config: defaults::config(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CorpusError> {
        toml::from_str(text).map_err(|e| CorpusError::InvalidSpec(e.to_string()))
    }

    fn parsed_variants(&self) -> Result<Vec<(Variant, u32)>, CorpusError> {
        let mut out = Vec::new();
        for (name, &w) in &self.variants {
            if w > 0 {
                out.push((name.parse()?, w));
            }
        }
        if out.is_empty() {
            return Err(CorpusError::InvalidSpec("no variant with positive weight".into()));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidSpec(m.into()));
        if self.functions == 0 {
            return bad("functions per binary must be at least 1");
        }
        if self.binaries == 0 {
            return bad("binaries must be at least 1");
        }
        if self.body_len[0] > self.body_len[1] {
            return bad("body_len range is inverted");
        }
        if !(0.0..=1.0).contains(&self.confusable_rate) {
            return bad("confusable_rate must lie in [0, 1]");
        }
        if self.alignment.is_empty() || self.alignment.iter().any(|a| *a == 0 || !a.is_power_of_two()) {
            return bad("alignment values must be powers of two");
        }
        if let Some(pad) = self.pad {
            if pad.size < x86::NOPS[0].len() {
                return bad("pad smaller than the smallest NOP encoding");
            }
        }
        self.parsed_variants()?;
        Ok(())
    }
}

/// A pad emitted by the generator, recorded for cross-checking the scanner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratedPad {
    pub address: u64,
    pub len: u64,
    pub position: PadPosition,
}

#[derive(Debug, Clone)]
pub struct SyntheticBinary {
    pub file_name: String,
    pub entry: ManifestEntry,
    pub elf: Vec<u8>,
    pub functions: Vec<FunctionRecord>,
    pub variants: Vec<Variant>,
    pub labels: LabelMap,
    pub pads: Vec<GeneratedPad>,
    /// Addresses of mid-function `sub rsp, 8` instructions.
    pub confusable_sites: Vec<u64>,
    /// Address ranges of alignment fill between functions.
    pub alignment_fill: Vec<(u64, u64)>,
}

impl SyntheticBinary {
    pub fn image(&self) -> CodeImage {
        CodeImage::parse(self.entry.binary_id(), &self.elf).expect("generator emits valid ELF")
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SynthSpec,
    pub seed: u64,
    pub binaries: Vec<SyntheticBinary>,
}

impl SyntheticCorpus {
    /// Write binaries and `.labels` files into `out_dir`, returning the manifest
    /// (paths relative to `out_dir`).
    pub fn write(&self, out_dir: &Path) -> Result<CorpusManifest, CorpusError> {
        std::fs::create_dir_all(out_dir)?;
        let mut manifest = CorpusManifest::new(out_dir);
        for b in &self.binaries {
            std::fs::write(out_dir.join(&b.file_name), &b.elf)?;
            std::fs::write(
                out_dir.join(super::labels_file_name(&b.file_name)),
                b.labels.to_text(),
            )?;
            manifest.entries.push(b.entry.clone());
        }
        Ok(manifest)
    }

    pub fn to_loaded(&self) -> LoadedCorpus {
        let mut manifest = CorpusManifest::new("");
        let mut binaries = Vec::with_capacity(self.binaries.len());
        for b in &self.binaries {
            manifest.entries.push(b.entry.clone());
            binaries.push(CorpusBinary {
                entry: b.entry.clone(),
                image: b.image(),
                labels: b.labels.clone(),
            });
        }
        LoadedCorpus { manifest, binaries }
    }
}

pub fn generate_synthetic_corpus(spec: &SynthSpec, seed: u64) -> Result<SyntheticCorpus, CorpusError> {
    spec.validate()?;
    let variants = spec.parsed_variants()?;
    let binaries = (0..spec.binaries)
        .map(|i| generate_binary(spec, &variants, seed, i))
        .collect::<Result<_, _>>()?;
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        seed,
        binaries,
    })
}

struct GeneratedFunction {
    bytes: Vec<u8>,
    variant: Variant,
    confusable_offsets: Vec<usize>,
}

fn generate_binary(
    spec: &SynthSpec,
    variants: &[(Variant, u32)],
    seed: u64,
    index: usize,
) -> Result<SyntheticBinary, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let total_weight: u32 = variants.iter().map(|(_, w)| w).sum();

    let functions: Vec<GeneratedFunction> = (0..spec.functions)
        .map(|_| {
            let mut pick = rng.gen_range(0..total_weight);
            let variant = variants
                .iter()
                .find(|(_, w)| {
                    if pick < *w {
                        true
                    } else {
                        pick -= w;
                        false
                    }
                })
                .map(|(v, _)| *v)
                .unwrap();
            emit_function(&mut rng, variant, spec)
        })
        .collect();

    // Layout: [align fill][entry pad] function [epilogue pad] ...
    let alignment = spec.alignment[index % spec.alignment.len()];
    let mut text = Vec::new();
    let mut records = Vec::with_capacity(functions.len());
    let mut pads = Vec::new();
    let mut confusable_sites = Vec::new();
    let mut alignment_fill = Vec::new();
    let entry_pad = spec.pad.filter(|p| p.position == PadPosition::EntryPad);
    let epilogue_pad = spec.pad.filter(|p| p.position == PadPosition::EpiloguePad);
    for (i, f) in functions.iter().enumerate() {
        let here = TEXT_BASE + text.len() as u64;
        let pre = entry_pad.map_or(0, |p| p.size as u64);
        // The function start (after any entry pad) is what gets aligned.
        let misalign = (here + pre) % alignment;
        if i > 0 && misalign != 0 {
            let fill = alignment - misalign;
            alignment_fill.push((here, fill));
            text.extend(x86::nop_fill(fill as usize));
        }
        if let Some(p) = entry_pad {
            pads.push(GeneratedPad {
                address: TEXT_BASE + text.len() as u64,
                len: p.size as u64,
                position: PadPosition::EntryPad,
            });
            text.extend(x86::nop_fill(p.size));
        }
        let start = TEXT_BASE + text.len() as u64;
        confusable_sites.extend(f.confusable_offsets.iter().map(|&o| start + o as u64));
        records.push(FunctionRecord {
            name: if i == 0 {
                "main".to_string()
            } else {
                format!("fn_{i:04}")
            },
            start,
            size: f.bytes.len() as u64,
        });
        text.extend_from_slice(&f.bytes);
        if let Some(p) = epilogue_pad {
            pads.push(GeneratedPad {
                address: TEXT_BASE + text.len() as u64,
                len: p.size as u64,
                position: PadPosition::EpiloguePad,
            });
            text.extend(x86::nop_fill(p.size));
        }
    }

    let text_end = TEXT_BASE + text.len() as u64;
    let mut writer = ElfWriter::new();
    let text_idx = writer.section(".text", SectionKind::Code, TEXT_BASE, text);
    let rodata_addr = (text_end + 0xfff) & !0xfff;
    writer.section(
        ".rodata",
        SectionKind::ReadOnly,
        rodata_addr,
        b"%s %d %ld %f\n\0synthetic\0".to_vec(),
    );
    writer.section(".data", SectionKind::Data, rodata_addr + 0x1000, vec![0; 16]);
    for r in &records {
        writer.function(&r.name, text_idx, r.start, r.size);
    }
    writer.entry(TEXT_BASE);
    let elf = writer.write();

    let file_name = format!(
        "{}{:03}_synth_{}_{}.elf",
        spec.package, index, spec.opt, spec.config
    );
    let entry = ManifestEntry {
        path: file_name.clone().into(),
        package: format!("{}{:03}", spec.package, index),
        toolchain: "synth".into(),
        version: "1".into(),
        arch: "x86_64".into(),
        opt: spec.opt,
        config: spec.config.clone(),
        dataset: spec.dataset.clone(),
    };
    let labels = LabelMap::from_functions(entry.binary_id(), &records, vec![TEXT_BASE..text_end])
        .map_err(|e| CorpusError::InvalidSpec(e.to_string()))?;
    Ok(SyntheticBinary {
        file_name,
        entry,
        elf,
        functions: records,
        variants: functions.iter().map(|f| f.variant).collect(),
        labels,
        pads,
        confusable_sites,
        alignment_fill,
    })
}

fn emit_function(rng: &mut ChaCha8Rng, variant: Variant, spec: &SynthSpec) -> GeneratedFunction {
    let mut out = Vec::with_capacity(64);
    if variant.endbr {
        out.extend(ENDBR64);
    }
    let frame_size = [0x10u8, 0x20, 0x30, 0x40][rng.gen_range(0..4)];
    let epilogue: Vec<u8> = match variant.frame {
        Frame::Plain => {
            out.extend(PUSH_RBP_MOV_RBP_RSP);
            if rng.gen_bool(0.6) {
                out.extend([0x48, 0x83, 0xec, frame_size]);
                vec![0xc9, 0xc3]
            } else {
                vec![0x5d, 0xc3]
            }
        }
        Frame::Frameless => {
            let adj = [0x08u8, 0x08, 0x18, 0x28][rng.gen_range(0..4)];
            out.extend([0x48, 0x83, 0xec, adj]);
            vec![0x48, 0x83, 0xc4, adj, 0xc3]
        }
        Frame::StackProtector => {
            out.extend(PUSH_RBP_MOV_RBP_RSP);
            out.extend([0x48, 0x83, 0xec, frame_size.max(0x20)]);
            out.extend(GUARD_LOAD);
            out.extend([0x48, 0x89, 0x45, 0xf8]); // mov [rbp-8], rax
            out.extend([0x31, 0xc0]); // xor eax, eax
            let mut e = vec![0x48, 0x8b, 0x45, 0xf8]; // mov rax, [rbp-8]
            e.extend([0x64, 0x48, 0x2b, 0x04, 0x25, 0x28, 0x00, 0x00, 0x00]); // sub rax, fs:0x28
            e.extend([0x74, 0x05]); // je +5
            e.push(0xe8); // call __stack_chk_fail
            e.extend(rel32(rng));
            e.extend([0xc9, 0xc3]);
            e
        }
        Frame::StackClash => {
            out.extend(PUSH_RBP_MOV_RBP_RSP);
            out.extend([0x4c, 0x8d, 0x9c, 0x24, 0x00, 0xf0, 0xff, 0xff]); // lea r11, [rsp-0x1000]
            out.extend([0x48, 0x81, 0xec, 0x00, 0x10, 0x00, 0x00]); // sub rsp, 0x1000
            out.extend([0x48, 0x83, 0x0c, 0x24, 0x00]); // or qword [rsp], 0
            out.extend([0x4c, 0x39, 0xdc]); // cmp rsp, r11
            out.extend([0x75, 0xef]); // jne back to sub
            out.extend([0x48, 0x83, 0xec, frame_size]);
            vec![0xc9, 0xc3]
        }
        Frame::Safestack => {
            out.extend(PUSH_RBP_MOV_RBP_RSP);
            out.extend([0x41, 0x56, 0x53]); // push r14; push rbx
            out.extend([0x48, 0x8b, 0x1d]); // mov rbx, [rip+disp32]
            out.extend(rel32(rng));
            out.extend([0x64, 0x4c, 0x8b, 0x33]); // mov r14, fs:[rbx]
            out.extend([0x49, 0x8d, 0x46, 0x100u16.wrapping_sub(frame_size as u16) as u8]); // lea rax, [r14-n]
            out.extend([0x64, 0x48, 0x89, 0x03]); // mov fs:[rbx], rax
            // mov fs:[rbx], r14; pop rbx; pop r14; pop rbp; ret
            vec![0x64, 0x4c, 0x89, 0x33, 0x5b, 0x41, 0x5e, 0x5d, 0xc3]
        }
    };

    let target = rng.gen_range(spec.body_len[0]..=spec.body_len[1]);
    let body_start = out.len();
    let mut confusable_offsets = Vec::new();
    while out.len() - body_start < target {
        if spec.confusable_rate > 0.0 && rng.gen_bool(spec.confusable_rate) {
            confusable_offsets.push(out.len());
            emit_stack_arg_call(rng, &mut out);
        } else {
            emit_filler(rng, &mut out);
        }
    }
    out.extend(epilogue);
    GeneratedFunction {
        bytes: out,
        variant,
        confusable_offsets,
    }
}

fn rel32(rng: &mut ChaCha8Rng) -> [u8; 4] {
    rng.gen_range(-0x4000i32..0x4000).to_le_bytes()
}

fn disp8(rng: &mut ChaCha8Rng) -> u8 {
    [0xf8, 0xf0, 0xec, 0xe8, 0xe4, 0xe0, 0xd8, 0xd0][rng.gen_range(0..8)]
}

/// Call with a seventh stack argument: `sub rsp, 8; push [rbp-d]; push 0;
/// call rel32; add rsp, 0x18`.
fn emit_stack_arg_call(rng: &mut ChaCha8Rng, out: &mut Vec<u8>) {
    out.extend(SUB_RSP_8);
    out.extend([0xff, 0x75, disp8(rng)]);
    out.extend([0x6a, 0x00]);
    out.push(0xe8);
    out.extend(rel32(rng));
    out.extend([0x48, 0x83, 0xc4, 0x18]);
}

fn emit_filler(rng: &mut ChaCha8Rng, out: &mut Vec<u8>) {
    let d = disp8(rng);
    match rng.gen_range(0..22) {
        0 => out.extend([0x48, 0x8b, 0x45, d]), // mov rax, [rbp-d]
        1 => out.extend([0x48, 0x89, 0x45, d]), // mov [rbp-d], rax
        2 => out.extend([0x8b, 0x45, d]),       // mov eax, [rbp-d]
        3 => out.extend([0x89, 0x7d, d]),       // mov [rbp-d], edi
        4 => out.extend([0x48, 0x89, 0x75, d]), // mov [rbp-d], rsi
        5 => out.extend([0x48, 0x01, 0xd0]),    // add rax, rdx
        6 => out.extend([0x48, 0x89, 0xc7]),    // mov rdi, rax
        7 => {
            out.push(0xb8); // mov eax, imm32
            out.extend(rng.gen_range(0u32..0x400).to_le_bytes());
        }
        8 => {
            out.extend([0x48, 0x8d, 0x05]); // lea rax, [rip+disp32]
            out.extend(rel32(rng));
        }
        9 => out.extend([0x83, 0x7d, d, rng.gen_range(0..16)]), // cmp dword [rbp-d], imm8
        10 => out.extend([0x0f, 0xb6, 0x45, d]),               // movzx eax, byte [rbp-d]
        11 => out.extend([0x8b, 0x55, d]),                     // mov edx, [rbp-d]
        12 => out.extend([0x0f, 0xaf, 0xc2]),                  // imul eax, edx
        13 => out.extend([0x85, 0xc0]),                        // test eax, eax
        14 => {
            out.push(0xbe); // mov esi, imm32
            out.extend(rng.gen_range(0u32..0x100).to_le_bytes());
        }
        15 => {
            out.push(0xe8); // call rel32
            out.extend(rel32(rng));
        }
        16 => out.extend([[0x74u8, 0x75, 0x7e, 0xeb][rng.gen_range(0..4)], rng.gen_range(2..0x30)]),
        // Register forms whose ModRM byte is 0xc3.
        17 => out.extend([0x48, 0x89, 0xc3]), // mov rbx, rax
        18 => out.extend([0x01, 0xc3]),       // add ebx, eax
        19 => out.extend([0x48, 0x39, 0xc3]), // cmp rbx, rax
        // Early exit: test eax, eax; jne +2; leave; ret
        20 => out.extend([0x85, 0xc0, 0x75, 0x02, 0xc9, 0xc3]),
        _ => out.extend([0x31, 0xc0]), // xor eax, eax
    }
}
