use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{BinaryError, CodeImage};

/// Per-byte boundary label. `Neither` is implicit in every label map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "S")]
    Start,
    #[serde(rename = "E")]
    End,
    #[serde(rename = "N")]
    Neither,
}

impl Label {
    pub const BOUNDARIES: [Label; 2] = [Label::Start, Label::End];

    pub fn as_char(self) -> char {
        match self {
            Label::Start => 'S',
            Label::End => 'E',
            Label::Neither => 'N',
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "S" => Ok(Label::Start),
            "E" => Ok(Label::End),
            "N" => Ok(Label::Neither),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// A function symbol: `size` bytes from `start`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FunctionRecord {
    pub name: String,
    pub start: u64,
    pub size: u64,
}

impl FunctionRecord {
    /// Address of the function's last byte.
    pub fn last_byte(&self) -> u64 {
        self.start + self.size - 1
    }

    pub fn range(&self) -> Range<u64> {
        self.start..self.start + self.size
    }
}

/// Parse one `<hex-address> <S|E>` record (lowercase hex with `0x` prefix).
pub fn parse_boundary_line(line: &str) -> Result<(u64, Label), String> {
    let (addr, label) = line
        .split_once(' ')
        .ok_or_else(|| format!("expected `<hex-address> <S|E>`, got {line:?}"))?;
    let hex = addr
        .strip_prefix("0x")
        .ok_or_else(|| format!("address {addr:?} lacks 0x prefix"))?;
    if hex.is_empty() || !hex.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
        return Err(format!("address {addr:?} is not lowercase hex"));
    }
    let address = u64::from_str_radix(hex, 16).map_err(|e| e.to_string())?;
    let label = match label {
        "S" => Label::Start,
        "E" => Label::End,
        other => return Err(format!("label must be S or E, got {other:?}")),
    };
    Ok((address, label))
}

pub fn format_boundary_line(address: u64, label: Label) -> String {
    format!("{address:#x} {label}")
}

/// Ground-truth or inferred boundary labeling for one binary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    binary_id: String,
    starts: BTreeSet<u64>,
    ends: BTreeSet<u64>,
    domain: Vec<Range<u64>>,
}

impl LabelMap {
    /// Build from non-overlapping functions; every byte must lie in `domain`.
    pub fn from_functions(
        binary_id: impl Into<String>,
        functions: &[FunctionRecord],
        domain: Vec<Range<u64>>,
    ) -> Result<Self, BinaryError> {
        let mut map = LabelMap {
            binary_id: binary_id.into(),
            starts: BTreeSet::new(),
            ends: BTreeSet::new(),
            domain,
        };
        for f in functions {
            map.check_in_domain(f.start)?;
            map.check_in_domain(f.last_byte())?;
            map.starts.insert(f.start);
            map.ends.insert(f.last_byte());
        }
        map.check_pairing()?;
        Ok(map)
    }

    fn check_in_domain(&self, address: u64) -> Result<(), BinaryError> {
        if self.in_domain(address) {
            Ok(())
        } else {
            Err(BinaryError::AddressOutOfRange(address))
        }
    }

    // starts and ends must interleave s0 <= e0 < s1 <= e1 < ...
    fn check_pairing(&self) -> Result<(), BinaryError> {
        if self.starts.len() != self.ends.len() {
            return Err(BinaryError::LabelParse {
                line: 0,
                message: format!(
                    "{} starts but {} ends",
                    self.starts.len(),
                    self.ends.len()
                ),
            });
        }
        let mut prev_end: Option<u64> = None;
        for (&s, &e) in self.starts.iter().zip(&self.ends) {
            if e < s || prev_end.is_some_and(|p| s <= p) {
                return Err(BinaryError::LabelParse {
                    line: 0,
                    message: format!("boundaries do not nest at {s:#x}..{e:#x}"),
                });
            }
            prev_end = Some(e);
        }
        Ok(())
    }

    pub fn binary_id(&self) -> &str {
        &self.binary_id
    }

    pub fn starts(&self) -> &BTreeSet<u64> {
        &self.starts
    }

    pub fn ends(&self) -> &BTreeSet<u64> {
        &self.ends
    }

    pub fn domain(&self) -> &[Range<u64>] {
        &self.domain
    }

    pub fn in_domain(&self, address: u64) -> bool {
        self.domain.iter().any(|r| r.contains(&address))
    }

    pub fn has(&self, address: u64, label: Label) -> bool {
        match label {
            Label::Start => self.starts.contains(&address),
            Label::End => self.ends.contains(&address),
            Label::Neither => {
                self.in_domain(address)
                    && !self.starts.contains(&address)
                    && !self.ends.contains(&address)
            }
        }
    }

    pub fn set(&self, label: Label) -> &BTreeSet<u64> {
        match label {
            Label::Start => &self.starts,
            Label::End => &self.ends,
            Label::Neither => panic!("the N label set is implicit"),
        }
    }

    /// The single most specific label at `address`; one-byte functions report `Start`.
    pub fn label_at(&self, address: u64) -> Label {
        if self.starts.contains(&address) {
            Label::Start
        } else if self.ends.contains(&address) {
            Label::End
        } else {
            Label::Neither
        }
    }

    /// Function extents `(start, last_byte)` in address order.
    pub fn functions(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.starts.iter().copied().zip(self.ends.iter().copied())
    }

    pub fn function_count(&self) -> usize {
        self.starts.len()
    }

    /// Bit-exact text form: `<hex-address> <S|E>` per line, ascending, S before E.
    pub fn to_text(&self) -> String {
        let mut records: Vec<(u64, Label)> = self
            .starts
            .iter()
            .map(|&a| (a, Label::Start))
            .chain(self.ends.iter().map(|&a| (a, Label::End)))
            .collect();
        records.sort();
        let mut out = String::with_capacity(records.len() * 12);
        for (a, l) in records {
            out.push_str(&format_boundary_line(a, l));
            out.push('\n');
        }
        out
    }

    /// Parse the text form. The domain is not part of the format and comes
    /// from the image the map describes.
    pub fn parse(
        text: &str,
        binary_id: impl Into<String>,
        domain: Vec<Range<u64>>,
    ) -> Result<Self, BinaryError> {
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(BinaryError::LabelParse {
                line: text.lines().count(),
                message: "missing trailing newline".into(),
            });
        }
        let mut map = LabelMap {
            binary_id: binary_id.into(),
            starts: BTreeSet::new(),
            ends: BTreeSet::new(),
            domain,
        };
        let mut prev: Option<(u64, Label)> = None;
        for (i, line) in text.lines().enumerate() {
            let record = parse_boundary_line(line).map_err(|message| BinaryError::LabelParse {
                line: i + 1,
                message,
            })?;
            if prev.is_some_and(|p| p >= record) {
                return Err(BinaryError::LabelParse {
                    line: i + 1,
                    message: "records not in ascending order".into(),
                });
            }
            prev = Some(record);
            let (address, label) = record;
            if !map.in_domain(address) {
                return Err(BinaryError::LabelParse {
                    line: i + 1,
                    message: format!("{address:#x} outside the code domain"),
                });
            }
            match label {
                Label::Start => map.starts.insert(address),
                Label::End => map.ends.insert(address),
                Label::Neither => unreachable!(),
            };
        }
        map.check_pairing()?;
        Ok(map)
    }

    /// Convenience: parse a label file describing `image`.
    pub fn parse_for(text: &str, image: &CodeImage) -> Result<Self, BinaryError> {
        Self::parse(text, image.id(), image.code_ranges())
    }
}

/// Turn symbol records into ground truth.
///
/// Zero-size records and records not contained in one executable section are
/// dropped; exact aliases (same start and size) collapse to the
/// lexicographically first name; any remaining overlap is an error.
pub fn extract_ground_truth(
    image: &CodeImage,
    symbols: &[FunctionRecord],
) -> Result<(Vec<FunctionRecord>, LabelMap), BinaryError> {
    if symbols.is_empty() {
        return Err(BinaryError::StrippedBinary);
    }
    let mut functions: Vec<FunctionRecord> = symbols
        .iter()
        .filter(|f| f.size >= 1)
        .filter(|f| {
            image
                .section_containing(f.start)
                .is_ok_and(|s| s.contains(f.last_byte()))
        })
        .cloned()
        .collect();
    functions.sort_by(|a, b| (a.start, a.size, &a.name).cmp(&(b.start, b.size, &b.name)));
    functions.dedup_by(|b, a| a.start == b.start && a.size == b.size);
    for pair in functions.windows(2) {
        if pair[0].start + pair[0].size > pair[1].start {
            return Err(BinaryError::OverlappingFunctions {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }
    let map = LabelMap::from_functions(image.id(), &functions, image.code_ranges())?;
    Ok((functions, map))
}
