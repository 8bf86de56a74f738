//! Length-preserving injection of byte sequences into NOP pads.

mod plan_csv;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binary::{BinaryError, CodeImage, LabelMap};
use crate::x86;

pub use plan_csv::{parse_plan_csv, plan_csv, PlanRow, PLAN_HEADER};

#[derive(Debug, Error)]
pub enum RewriteError {
    #[error("payload needs a pad of at least {min_pad} bytes")]
    PayloadTooLarge { min_pad: usize },
    #[error("verbatim injection requires a pad that follows a return")]
    IncompatibleGuard,
    #[error("plans for pads at {first:#x} and {second:#x} overlap")]
    OverlappingPlans { first: u64, second: u64 },
    #[error("pad at {address:#x} no longer holds NOPs")]
    PadMismatch { address: u64 },
    #[error("plan file line {line}: {message}")]
    PlanParse { line: u64, message: String },
    #[error(transparent)]
    Binary(#[from] BinaryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadPosition {
    #[serde(alias = "entry")]
    EntryPad,
    #[serde(alias = "epilogue")]
    EpiloguePad,
}

impl PadPosition {
    pub fn as_str(self) -> &'static str {
        match self {
            PadPosition::EntryPad => "entry_pad",
            PadPosition::EpiloguePad => "epilogue_pad",
        }
    }
}

impl fmt::Display for PadPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guard {
    AfterReturn,
    BeforeEntry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PadRegion {
    pub address: u64,
    pub length: u64,
    pub position: PadPosition,
    pub guard: Guard,
}

impl PadRegion {
    pub fn range(&self) -> std::ops::Range<u64> {
        self.address..self.address + self.length
    }

    /// Whether a payload of `payload_len` bytes fits this pad under `mode`.
    pub fn usable(&self, mode: InjectionMode, payload_len: usize) -> bool {
        if mode == InjectionMode::VerbatimAfterReturn && self.guard != Guard::AfterReturn {
            return false;
        }
        self.length as usize >= mode.min_pad(payload_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// `jmp` over one or more `mov eax, imm32` carriers holding the payload.
    JumpOverImmediate,
    /// Payload bytes placed as-is behind the preceding `ret`.
    VerbatimAfterReturn,
}

/// Bytes of payload carried per `mov eax, imm32`.
const CARRIER_IMM: usize = 4;
const CARRIER_LEN: usize = 1 + CARRIER_IMM;
const MAX_JUMP: usize = i8::MAX as usize;

impl InjectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InjectionMode::JumpOverImmediate => "jump_over_immediate",
            InjectionMode::VerbatimAfterReturn => "verbatim_after_return",
        }
    }

    fn carriers(payload_len: usize) -> usize {
        payload_len.div_ceil(CARRIER_IMM).max(1)
    }

    /// Smallest pad that can hold a payload of this length.
    pub fn min_pad(self, payload_len: usize) -> usize {
        match self {
            InjectionMode::VerbatimAfterReturn => payload_len,
            InjectionMode::JumpOverImmediate => 2 + CARRIER_LEN * Self::carriers(payload_len),
        }
    }
}

impl fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InjectionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jump_over_immediate" | "A" | "a" => Ok(InjectionMode::JumpOverImmediate),
            "verbatim_after_return" | "B" | "b" => Ok(InjectionMode::VerbatimAfterReturn),
            _ => Err(format!("unknown injection mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectionPlan {
    pub pad: PadRegion,
    pub mode: InjectionMode,
    pub payload: Vec<u8>,
    /// Exactly `pad.length` bytes.
    pub rendered: Vec<u8>,
}

/// How ambiguous runs (after a return *and* before a start) are classified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadHint {
    /// A run directly behind a function's final `ret` is an epilogue pad;
    /// otherwise a run ending at a start is an entry pad.
    #[default]
    Auto,
    /// Prefer the NOP run ending at the next start.
    Entry,
    /// Only report runs behind a return.
    Epilogue,
}

impl FromStr for PadHint {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(PadHint::Auto),
            "entry" => Ok(PadHint::Entry),
            "epilogue" => Ok(PadHint::Epilogue),
            _ => Err(format!("unknown pad hint {s:?}")),
        }
    }
}

/// Locate maximal NOP runs adjacent to function boundaries.
///
/// Each gap between consecutive functions (and between a section edge and
/// its nearest function) yields at most one pad.
pub fn scan_pads(image: &CodeImage, gt: &LabelMap, hint: PadHint) -> Vec<PadRegion> {
    let mut pads = Vec::new();
    for section in image.executable_sections() {
        let bytes = image.section_bytes(section);
        let base = section.virtual_address;
        let starts: Vec<u64> = gt.starts().range(section.address_range()).copied().collect();
        let ends: Vec<u64> = gt.ends().range(section.address_range()).copied().collect();
        // Gaps: [section start, first start), (end_i, start_{i+1}), (last end, section end).
        let mut gaps = Vec::with_capacity(starts.len() + 1);
        let mut cursor = (base, None::<u64>);
        for (&s, &e) in starts.iter().zip(&ends) {
            gaps.push((cursor.0, s, cursor.1, true));
            cursor = (e + 1, Some(e));
        }
        gaps.push((cursor.0, base + section.size, cursor.1, false));

        for (lo, hi, prev_end, before_start) in gaps {
            if hi <= lo {
                continue;
            }
            let gap = &bytes[(lo - base) as usize..(hi - base) as usize];
            let after_ret = prev_end.is_some_and(|e| bytes[(e - base) as usize] == x86::RET);
            let prefix = x86::nop_run_len(gap);
            let suffix_from = if before_start {
                (0..gap.len()).find(|&i| x86::is_nop_sequence(&gap[i..]))
            } else {
                None
            };
            let epilogue = (after_ret && prefix > 0).then_some(PadRegion {
                address: lo,
                length: prefix as u64,
                position: PadPosition::EpiloguePad,
                guard: Guard::AfterReturn,
            });
            let entry = suffix_from
                .filter(|&i| i < gap.len())
                .map(|i| PadRegion {
                    address: lo + i as u64,
                    length: (gap.len() - i) as u64,
                    position: PadPosition::EntryPad,
                    guard: Guard::BeforeEntry,
                });
            let chosen = match hint {
                PadHint::Auto => epilogue.or(entry),
                PadHint::Entry => entry.or(epilogue),
                PadHint::Epilogue => epilogue,
            };
            pads.extend(chosen);
        }
    }
    pads
}

pub fn plan_injection(
    pad: &PadRegion,
    payload: &[u8],
    mode: InjectionMode,
) -> Result<InjectionPlan, RewriteError> {
    let len = pad.length as usize;
    let mut rendered = Vec::with_capacity(len);
    match mode {
        InjectionMode::VerbatimAfterReturn => {
            if pad.guard != Guard::AfterReturn {
                return Err(RewriteError::IncompatibleGuard);
            }
            if payload.len() > len {
                return Err(RewriteError::PayloadTooLarge {
                    min_pad: payload.len(),
                });
            }
            rendered.extend_from_slice(payload);
        }
        InjectionMode::JumpOverImmediate => {
            let min = mode.min_pad(payload.len());
            let carriers = InjectionMode::carriers(payload.len());
            if carriers * CARRIER_LEN > MAX_JUMP || len < min {
                return Err(RewriteError::PayloadTooLarge { min_pad: min });
            }
            rendered.push(x86::JMP_REL8);
            rendered.push((carriers * CARRIER_LEN) as u8);
            for i in 0..carriers {
                let mut imm = [0u8; CARRIER_IMM];
                let chunk = payload.get(i * CARRIER_IMM..).unwrap_or(&[]);
                let n = chunk.len().min(CARRIER_IMM);
                imm[..n].copy_from_slice(&chunk[..n]);
                rendered.push(x86::MOV_EAX_IMM32);
                rendered.extend_from_slice(&imm);
            }
        }
    }
    rendered.extend(x86::nop_fill(len - rendered.len()));
    Ok(InjectionPlan {
        pad: *pad,
        mode,
        payload: payload.to_vec(),
        rendered,
    })
}

/// Plan `payload` into every pad that can hold it; other pads are skipped.
pub fn plan_all(pads: &[PadRegion], payload: &[u8], mode: InjectionMode) -> Vec<InjectionPlan> {
    pads.iter()
        .filter(|p| p.usable(mode, payload.len()))
        .filter_map(|p| plan_injection(p, payload, mode).ok())
        .collect()
}

pub fn apply_injections(image: &CodeImage, plans: &[InjectionPlan]) -> Result<CodeImage, RewriteError> {
    let mut order: Vec<&InjectionPlan> = plans.iter().collect();
    order.sort_by_key(|p| p.pad.address);
    for w in order.windows(2) {
        if w[0].pad.range().end > w[1].pad.address {
            return Err(RewriteError::OverlappingPlans {
                first: w[0].pad.address,
                second: w[1].pad.address,
            });
        }
    }
    let mut out = image.clone();
    for p in order {
        let current = image.read(p.pad.address, p.pad.length)?;
        if !x86::is_nop_sequence(current) || p.rendered.len() as u64 != p.pad.length {
            return Err(RewriteError::PadMismatch {
                address: p.pad.address,
            });
        }
        out.write(p.pad.address, &p.rendered)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    SizeChanged { original: usize, mutated: usize },
    GeometryChanged,
    OutOfPadByte { address: u64 },
    /// A byte outside every executable section (file offset).
    OutOfSectionByte { offset: u64 },
    RenderedMissing { pad: u64 },
    GuardInvalid { pad: u64, reason: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SizeChanged { original, mutated } => {
                write!(f, "file size changed from {original} to {mutated}")
            }
            Violation::GeometryChanged => f.write_str("section geometry changed"),
            Violation::OutOfPadByte { address } => write!(f, "byte at {address:#x} changed outside any pad"),
            Violation::OutOfSectionByte { offset } => {
                write!(f, "file byte at offset {offset:#x} changed outside code")
            }
            Violation::RenderedMissing { pad } => write!(f, "pad {pad:#x} does not hold its rendered bytes"),
            Violation::GuardInvalid { pad, reason } => write!(f, "pad {pad:#x}: {reason}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerificationReport {
    pub plans_checked: usize,
    pub violations: Vec<Violation>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn verify_injection(
    original: &CodeImage,
    mutated: &CodeImage,
    plans: &[InjectionPlan],
) -> VerificationReport {
    let mut report = VerificationReport {
        plans_checked: plans.len(),
        violations: Vec::new(),
    };
    let v = &mut report.violations;
    if original.data().len() != mutated.data().len() {
        v.push(Violation::SizeChanged {
            original: original.data().len(),
            mutated: mutated.data().len(),
        });
        return report;
    }
    if original.sections() != mutated.sections() {
        v.push(Violation::GeometryChanged);
        return report;
    }

    // Map every differing file byte back to an address and check pad cover.
    let mut covered: Vec<(u64, u64)> = plans.iter().map(|p| (p.pad.address, p.pad.range().end)).collect();
    covered.sort_unstable();
    for (off, (a, b)) in original.data().iter().zip(mutated.data()).enumerate() {
        if a == b {
            continue;
        }
        let off = off as u64;
        let addr = original
            .executable_sections()
            .find(|s| s.has_file_bytes && s.file_range().contains(&off))
            .map(|s| s.virtual_address + off - s.file_offset);
        match addr {
            None => v.push(Violation::OutOfSectionByte { offset: off }),
            Some(addr) => {
                let i = covered.partition_point(|&(s, _)| s <= addr);
                if i == 0 || covered[i - 1].1 <= addr {
                    v.push(Violation::OutOfPadByte { address: addr });
                }
            }
        }
    }

    for p in plans {
        let addr = p.pad.address;
        match mutated.read(addr, p.pad.length) {
            Ok(bytes) if bytes == p.rendered.as_slice() => {}
            _ => {
                v.push(Violation::RenderedMissing { pad: addr });
                continue;
            }
        }
        if let Err(reason) = check_guard(original, p) {
            v.push(Violation::GuardInvalid { pad: addr, reason });
        }
    }
    report
}

fn check_guard(image: &CodeImage, p: &InjectionPlan) -> Result<(), String> {
    let r = &p.rendered;
    match p.mode {
        InjectionMode::VerbatimAfterReturn => {
            let before = p
                .pad
                .address
                .checked_sub(1)
                .and_then(|a| image.byte_at(a).ok());
            if before != Some(x86::RET) {
                return Err("payload is not preceded by a return".into());
            }
            if !r.starts_with(&p.payload) || !x86::is_nop_sequence(&r[p.payload.len()..]) {
                return Err("rendered bytes differ from payload plus NOP fill".into());
            }
        }
        InjectionMode::JumpOverImmediate => {
            if r.len() < 2 || r[0] != x86::JMP_REL8 {
                return Err("missing short jump".into());
            }
            let target = 2 + r[1] as usize;
            let carriers = InjectionMode::carriers(p.payload.len());
            if target != 2 + carriers * CARRIER_LEN || target > r.len() {
                return Err(format!("jump displacement {} does not skip the carriers", r[1]));
            }
            // Linear decode from after the jump must land exactly on the target.
            let mut at = 2;
            let mut carried = Vec::new();
            while at < target {
                match x86::instruction_len(&r[at..target]) {
                    Some(CARRIER_LEN) if r[at] == x86::MOV_EAX_IMM32 => {
                        carried.extend_from_slice(&r[at + 1..at + CARRIER_LEN]);
                        at += CARRIER_LEN;
                    }
                    _ => return Err(format!("carrier at pad offset {at} does not decode")),
                }
            }
            if at != target || !carried.starts_with(&p.payload) {
                return Err("carrier immediates do not hold the payload".into());
            }
            if !x86::is_nop_sequence(&r[target..]) {
                return Err("jump target is not followed by NOP fill".into());
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binary::elf::{ElfWriter, SectionKind};
    use crate::binary::ground_truth_of;

    /// Two returning functions separated by `gap`.
    fn two_funcs(gap: &[u8]) -> (CodeImage, LabelMap) {
        let f = [0x55, 0x48, 0x89, 0xe5, 0x5d, 0xc3];
        let mut text = f.to_vec();
        text.extend_from_slice(gap);
        text.extend_from_slice(&f);
        let mut w = ElfWriter::new();
        let t = w.section(".text", SectionKind::Code, 0x1000, text);
        w.function("a", t, 0x1000, 6);
        w.function("b", t, 0x1006 + gap.len() as u64, 6);
        let img = CodeImage::parse("t", &w.write()).unwrap();
        let (_, gt) = ground_truth_of(&img).unwrap();
        (img, gt)
    }

    fn epilogue_pad(address: u64, length: u64) -> PadRegion {
        PadRegion {
            address,
            length,
            position: PadPosition::EpiloguePad,
            guard: Guard::AfterReturn,
        }
    }

    #[test]
    fn scans_four_byte_epilogue_pad() {
        let (img, gt) = two_funcs(&[0x0f, 0x1f, 0x40, 0x00]);
        let pads = scan_pads(&img, &gt, PadHint::Auto);
        assert_eq!(pads, vec![epilogue_pad(0x1006, 4)]);
        let entry = scan_pads(&img, &gt, PadHint::Entry);
        assert_eq!(entry[0].position, PadPosition::EntryPad);
        assert_eq!(entry[0].guard, Guard::BeforeEntry);
        let (img, gt) = two_funcs(&[]);
        assert!(scan_pads(&img, &gt, PadHint::Auto).is_empty());
    }

    #[test]
    fn scan_stops_at_non_nop() {
        let (img, gt) = two_funcs(&[0x90, 0xcc, 0x90]);
        let pads = scan_pads(&img, &gt, PadHint::Auto);
        assert_eq!(pads, vec![epilogue_pad(0x1006, 1)]);
        let pads = scan_pads(&img, &gt, PadHint::Entry);
        assert_eq!(pads[0].address, 0x1008);
    }

    #[test]
    fn mode_b_renders_payload() {
        let pad = epilogue_pad(0x1006, 4);
        let plan = plan_injection(&pad, &[0x48, 0x83, 0xec, 0x08], InjectionMode::VerbatimAfterReturn).unwrap();
        assert_eq!(plan.rendered, [0x48, 0x83, 0xec, 0x08]);
        let too_big = plan_injection(&pad, &[0; 8], InjectionMode::VerbatimAfterReturn);
        assert!(matches!(too_big, Err(RewriteError::PayloadTooLarge { min_pad: 8 })));
        let entry = PadRegion {
            guard: Guard::BeforeEntry,
            position: PadPosition::EntryPad,
            ..pad
        };
        assert!(matches!(
            plan_injection(&entry, &[1], InjectionMode::VerbatimAfterReturn),
            Err(RewriteError::IncompatibleGuard)
        ));
    }

    #[test]
    fn mode_a_renders_jump_over_mov() {
        let pad = epilogue_pad(0x1006, 7);
        let plan = plan_injection(&pad, &[0x48, 0x83, 0xec, 0x08], InjectionMode::JumpOverImmediate).unwrap();
        assert_eq!(plan.rendered, [0xeb, 0x05, 0xb8, 0x48, 0x83, 0xec, 0x08]);
        let short = plan_injection(&epilogue_pad(0x1006, 6), &[1, 2, 3, 4], InjectionMode::JumpOverImmediate);
        assert!(matches!(short, Err(RewriteError::PayloadTooLarge { min_pad: 7 })));
        // 6-byte payload: two carriers, the second zero-padded, NOP tail.
        let plan = plan_injection(&epilogue_pad(0x1006, 14), &[1, 2, 3, 4, 5, 6], InjectionMode::JumpOverImmediate).unwrap();
        assert_eq!(
            plan.rendered,
            [0xeb, 0x0a, 0xb8, 1, 2, 3, 4, 0xb8, 5, 6, 0, 0, 0x66, 0x90]
        );
        assert_eq!(InjectionMode::JumpOverImmediate.min_pad(8), 12);
    }

    #[test]
    fn apply_and_verify() {
        let (img, gt) = two_funcs(&x86::nop_fill(7));
        assert_eq!(apply_injections(&img, &[]).unwrap(), img);
        let pads = scan_pads(&img, &gt, PadHint::Auto);
        let plans = plan_all(&pads, &[0xde, 0xad, 0xbe, 0xef], InjectionMode::JumpOverImmediate);
        assert_eq!(plans.len(), 1);
        let out = apply_injections(&img, &plans).unwrap();
        assert!(verify_injection(&img, &out, &plans).passed());
        let diff = img.data().iter().zip(out.data()).filter(|(a, b)| a != b).count();
        assert!(diff > 0 && diff <= 7);
        assert_eq!(ground_truth_of(&out).unwrap().1, gt);

        // Stale plan: pad no longer NOPs.
        assert!(matches!(
            apply_injections(&out, &plans),
            Err(RewriteError::PadMismatch { address: 0x1006 })
        ));
        let dup = vec![plans[0].clone(), plans[0].clone()];
        assert!(matches!(
            apply_injections(&img, &dup),
            Err(RewriteError::OverlappingPlans { .. })
        ));
    }

    #[test]
    fn verify_flags_tampering() {
        let (img, gt) = two_funcs(&x86::nop_fill(7));
        let pads = scan_pads(&img, &gt, PadHint::Auto);
        let plans = plan_all(&pads, &[1, 2, 3, 4], InjectionMode::JumpOverImmediate);
        let out = apply_injections(&img, &plans).unwrap();

        let mut flipped = out.clone();
        flipped.write(0x1001, &[0x00]).unwrap();
        let r = verify_injection(&img, &flipped, &plans);
        assert_eq!(r.violations, vec![Violation::OutOfPadByte { address: 0x1001 }]);

        let mut bad = plans[0].clone();
        bad.rendered[1] = 0x04;
        let corrupted = apply_injections(&img, std::slice::from_ref(&bad)).unwrap();
        let r = verify_injection(&img, &corrupted, &[bad]);
        assert!(matches!(r.violations[..], [Violation::GuardInvalid { pad: 0x1006, .. }]));
    }

    #[test]
    fn verbatim_guard_checked() {
        // A pad whose preceding byte is not `ret` but claims the guard.
        let mut w = ElfWriter::new();
        let t = w.section(".text", SectionKind::Code, 0x1000, vec![0x5d, 0x90, 0x90, 0x90, 0x90, 0xc3]);
        w.function("a", t, 0x1000, 6);
        let img = CodeImage::parse("t", &w.write()).unwrap();
        let plan = plan_injection(&epilogue_pad(0x1001, 4), &[0xcc], InjectionMode::VerbatimAfterReturn).unwrap();
        let out = apply_injections(&img, std::slice::from_ref(&plan)).unwrap();
        let r = verify_injection(&img, &out, &[plan]);
        assert!(matches!(r.violations[..], [Violation::GuardInvalid { .. }]));
    }
}
