//! x86-64 byte-level helpers: canonical NOP encodings, return and jump
//! opcodes, and a thin length decoder over `iced-x86`.

use iced_x86::{Code, Decoder, DecoderOptions};

/// `ret` (near return).
pub const RET: u8 = 0xc3;
/// `int3`, used by some linkers as inter-function fill.
pub const INT3: u8 = 0xcc;
/// `jmp rel8`.
pub const JMP_REL8: u8 = 0xeb;
/// `mov eax, imm32`.
pub const MOV_EAX_IMM32: u8 = 0xb8;

/// Canonical multi-byte NOP encodings, indexed by `length - 1`.
///
/// These are the forms recommended by the Intel SDM and emitted by GNU as
/// for `.p2align` fill.
pub const NOPS: [&[u8]; 9] = [
    &[0x90],
    &[0x66, 0x90],
    &[0x0f, 0x1f, 0x00],
    &[0x0f, 0x1f, 0x40, 0x00],
    &[0x0f, 0x1f, 0x44, 0x00, 0x00],
    &[0x66, 0x0f, 0x1f, 0x44, 0x00, 0x00],
    &[0x0f, 0x1f, 0x80, 0x00, 0x00, 0x00, 0x00],
    &[0x0f, 0x1f, 0x84, 0x00, 0x00, 0x00, 0x00, 0x00],
    &[0x66, 0x0f, 0x1f, 0x84, 0x00, 0x00, 0x00, 0x00, 0x00],
];

pub const MAX_NOP_LEN: usize = NOPS.len();

/// Length of the canonical NOP starting at `bytes[0]`, if any. Longest match wins.
pub fn nop_len_at(bytes: &[u8]) -> Option<usize> {
    NOPS.iter()
        .rev()
        .find(|nop| bytes.starts_with(nop))
        .map(|nop| nop.len())
}

/// Does `bytes` decode, front to back, as a sequence of canonical NOPs?
pub fn is_nop_sequence(bytes: &[u8]) -> bool {
    let mut at = 0;
    while at < bytes.len() {
        match nop_len_at(&bytes[at..]) {
            Some(n) => at += n,
            None => return false,
        }
    }
    true
}

/// Number of leading bytes of `bytes` covered by whole canonical NOPs.
pub fn nop_run_len(bytes: &[u8]) -> usize {
    let mut at = 0;
    while let Some(n) = nop_len_at(&bytes[at..]) {
        at += n;
    }
    at
}

/// Fill `len` bytes with canonical NOPs, longest encodings first.
pub fn nop_fill(len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len);
    let mut left = len;
    while left > 0 {
        let n = left.min(MAX_NOP_LEN);
        out.extend_from_slice(NOPS[n - 1]);
        left -= n;
    }
    out
}

/// Decode one instruction at `bytes[0]` (64-bit mode) and return its length,
/// or `None` when the bytes do not form a complete valid instruction.
pub fn instruction_len(bytes: &[u8]) -> Option<usize> {
    let mut decoder = Decoder::new(64, bytes, DecoderOptions::NONE);
    let insn = decoder.decode();
    if insn.is_invalid() || insn.code() == Code::INVALID {
        None
    } else {
        Some(insn.len())
    }
}

/// True when `bytes` is exactly one complete, valid instruction.
pub fn is_single_instruction(bytes: &[u8]) -> bool {
    instruction_len(bytes) == Some(bytes.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nop_table_lengths() {
        for (i, nop) in NOPS.iter().enumerate() {
            assert_eq!(nop.len(), i + 1);
            assert_eq!(nop_len_at(nop), Some(i + 1));
            assert_eq!(instruction_len(nop), Some(i + 1));
        }
    }

    #[test]
    fn fill_is_longest_first() {
        assert_eq!(nop_fill(0), Vec::<u8>::new());
        assert_eq!(nop_fill(4), vec![0x0f, 0x1f, 0x40, 0x00]);
        let twelve = nop_fill(12);
        assert_eq!(&twelve[..9], NOPS[8]);
        assert_eq!(&twelve[9..], NOPS[2]);
        for len in 0..40 {
            let f = nop_fill(len);
            assert_eq!(f.len(), len);
            assert!(is_nop_sequence(&f));
        }
    }

    #[test]
    fn nop_run_stops_at_code() {
        assert_eq!(nop_run_len(&[0x90, 0x66, 0x90, 0x55, 0x90]), 3);
        assert_eq!(nop_run_len(&[0x55]), 0);
        assert!(!is_nop_sequence(&[0x0f, 0x1f]));
    }

    #[test]
    fn decodes_single_instructions() {
        assert!(is_single_instruction(&[0x48, 0x83, 0xec, 0x08]));
        assert!(is_single_instruction(&[0xc3]));
        assert!(!is_single_instruction(&[0x48, 0x83]));
        // two instructions
        assert!(!is_single_instruction(&[0x90, 0x90]));
    }
}
