//! Syntactic prologue matcher in the style of signature-based disassemblers.

use sha2::{Digest, Sha256};

use super::{normalize, Detection, Detector, DetectorError};
use crate::binary::{CodeImage, Label};
use crate::x86;

/// A byte pattern; `None` is a `??` wildcard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    pub bytes: Vec<Option<u8>>,
    pub label: Label,
}

impl Pattern {
    pub fn matches(&self, at: &[u8]) -> bool {
        at.len() >= self.bytes.len()
            && self
                .bytes
                .iter()
                .zip(at)
                .all(|(p, b)| p.is_none_or(|p| p == *b))
    }

    fn render(&self) -> String {
        let mut s: Vec<String> = self
            .bytes
            .iter()
            .map(|b| b.map_or("??".to_string(), |b| format!("{b:02x}")))
            .collect();
        s.push(self.label.to_string());
        s.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternTable {
    pub patterns: Vec<Pattern>,
}

pub const DEFAULT_TABLE: &str = "\
# push rbp; mov rbp, rsp
55 48 89 e5 S
# endbr64
f3 0f 1e fa S
# endbr64; push rbp
f3 0f 1e fa 55 S
";

impl Default for PatternTable {
    fn default() -> Self {
        PatternTable::parse(DEFAULT_TABLE).unwrap()
    }
}

impl PatternTable {
    /// One pattern per line: hex bytes or `??`, then the tag `S`. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, DetectorError> {
        let mut patterns = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| DetectorError::PatternParse {
                line: i + 1,
                message,
            };
            let mut tokens: Vec<&str> = line.split_whitespace().collect();
            let tag = tokens.pop().unwrap();
            if tag != "S" {
                return Err(bad(format!("tag must be S, got {tag:?}")));
            }
            let bytes = tokens
                .iter()
                .map(|t| match *t {
                    "??" => Ok(None),
                    t if t.len() == 2 => u8::from_str_radix(t, 16)
                        .map(Some)
                        .map_err(|_| bad(format!("bad byte {t:?}"))),
                    t => Err(bad(format!("bad byte {t:?}"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            if bytes.first().is_none_or(|b| b.is_none()) {
                return Err(bad("pattern must start with a concrete byte".into()));
            }
            patterns.push(Pattern {
                bytes,
                label: Label::Start,
            });
        }
        Ok(PatternTable { patterns })
    }

    pub fn to_text(&self) -> String {
        self.patterns
            .iter()
            .map(|p| p.render() + "\n")
            .collect()
    }

    /// Longest pattern matching at the start of `at`.
    fn longest_match(&self, at: &[u8]) -> Option<usize> {
        self.patterns
            .iter()
            .filter(|p| p.matches(at))
            .map(|p| p.bytes.len())
            .max()
    }
}

/// Emits S at pattern matches. With extent derivation on, a match is kept
/// only when the span up to the next match holds a `ret`, and E is placed on
/// the last `ret` of that span; otherwise E is emitted at every `ret` byte.
#[derive(Debug, Clone)]
pub struct PatternDetector {
    pub table: PatternTable,
    pub extents: bool,
    id: String,
}

impl PatternDetector {
    pub fn new(table: PatternTable, extents: bool) -> Self {
        PatternDetector {
            table,
            extents,
            id: "pattern".into(),
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Non-overlapping candidates, leftmost-longest.
    fn candidates(&self, bytes: &[u8]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            match self.table.longest_match(&bytes[i..]) {
                Some(n) => {
                    out.push(i);
                    i += n;
                }
                None => i += 1,
            }
        }
        out
    }
}

impl Default for PatternDetector {
    fn default() -> Self {
        PatternDetector::new(PatternTable::default(), true)
    }
}

impl Detector for PatternDetector {
    fn id(&self) -> &str {
        &self.id
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.table.to_text());
        h.update([self.extents as u8]);
        format!("pattern:{}", hex::encode(&h.finalize()[..8]))
    }

    fn detect(&self, image: &CodeImage) -> Result<Vec<Detection>, DetectorError> {
        let mut out = Vec::new();
        for section in image.executable_sections() {
            let bytes = image.section_bytes(section);
            let base = section.virtual_address;
            let cands = self.candidates(bytes);
            if self.extents {
                for (k, &c) in cands.iter().enumerate() {
                    let end = cands.get(k + 1).copied().unwrap_or(bytes.len());
                    if let Some(r) = bytes[c..end].iter().rposition(|&b| b == x86::RET) {
                        out.push(Detection::certain(base + c as u64, Label::Start));
                        out.push(Detection::certain(base + (c + r) as u64, Label::End));
                    }
                }
            } else {
                out.extend(cands.iter().map(|&c| Detection::certain(base + c as u64, Label::Start)));
                out.extend(
                    bytes
                        .iter()
                        .enumerate()
                        .filter(|(_, &b)| b == x86::RET)
                        .map(|(i, _)| Detection::certain(base + i as u64, Label::End)),
                );
            }
        }
        normalize(&mut out);
        Ok(out)
    }
}
