use std::ops::Range;

use object::{Object, ObjectSection, ObjectSymbol, SectionFlags, SectionKind, SymbolFlags};

use super::{BinaryError, FunctionRecord};

const SHF_EXECINSTR: u64 = 0x4;
const STT_FUNC: u8 = 2;
const STT_GNU_IFUNC: u8 = 10;

/// One section of a parsed binary. Bytes live in the owning [`CodeImage`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub file_offset: u64,
    pub virtual_address: u64,
    pub size: u64,
    pub executable: bool,
    /// False for `SHT_NOBITS` sections, which occupy no file bytes.
    pub has_file_bytes: bool,
}

impl Section {
    pub fn address_range(&self) -> Range<u64> {
        self.virtual_address..self.virtual_address + self.size
    }

    pub fn file_range(&self) -> Range<u64> {
        self.file_offset..self.file_offset + self.size
    }

    pub fn contains(&self, address: u64) -> bool {
        self.address_range().contains(&address)
    }
}

/// Executable bytes of one binary plus its section/address geometry.
///
/// The whole file is retained so that a rewritten image can be written back
/// out byte-for-byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeImage {
    id: String,
    data: Vec<u8>,
    sections: Vec<Section>,
    entry_point: u64,
}

impl CodeImage {
    /// Parse an ELF file. `id` is an opaque identifier carried into labels
    /// and detections (normally the manifest path).
    pub fn parse(id: impl Into<String>, raw: &[u8]) -> Result<Self, BinaryError> {
        let file = parse_elf(raw)?;
        let mut sections = Vec::new();
        for section in file.sections() {
            let name = section.name().unwrap_or("").to_string();
            if section.index().0 == 0 {
                continue;
            }
            let executable = match section.flags() {
                SectionFlags::Elf { sh_flags } => sh_flags & SHF_EXECINSTR != 0,
                _ => false,
            };
            let has_file_bytes = section.kind() != SectionKind::UninitializedData
                && section.file_range().is_some();
            let file_offset = section.file_range().map(|(off, _)| off).unwrap_or(0);
            if has_file_bytes && file_offset + section.size() > raw.len() as u64 {
                return Err(BinaryError::Malformed(format!(
                    "section {name} extends past end of file"
                )));
            }
            sections.push(Section {
                name,
                file_offset,
                virtual_address: section.address(),
                size: section.size(),
                executable,
                has_file_bytes,
            });
        }
        let image = CodeImage {
            id: id.into(),
            data: raw.to_vec(),
            sections,
            entry_point: file.entry(),
        };
        image.check_geometry()?;
        Ok(image)
    }

    fn check_geometry(&self) -> Result<(), BinaryError> {
        let exec: Vec<&Section> = self.executable_sections().collect();
        if exec.is_empty() {
            return Err(BinaryError::NoExecutableSection);
        }
        for (i, a) in exec.iter().enumerate() {
            if !a.has_file_bytes {
                return Err(BinaryError::Malformed(format!(
                    "executable section {} has no file bytes",
                    a.name
                )));
            }
            for b in &exec[i + 1..] {
                let va = a.address_range();
                let vb = b.address_range();
                let fa = a.file_range();
                let fb = b.file_range();
                if va.start < vb.end && vb.start < va.end || fa.start < fb.end && fb.start < fa.end
                {
                    return Err(BinaryError::Malformed(format!(
                        "executable sections {} and {} overlap",
                        a.name, b.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn entry_point(&self) -> u64 {
        self.entry_point
    }

    /// Raw file bytes.
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn executable_sections(&self) -> impl Iterator<Item = &Section> {
        self.sections.iter().filter(|s| s.executable && s.size > 0)
    }

    /// Address ranges of all executable sections, ascending.
    pub fn code_ranges(&self) -> Vec<Range<u64>> {
        let mut ranges: Vec<_> = self
            .executable_sections()
            .map(Section::address_range)
            .collect();
        ranges.sort_by_key(|r| r.start);
        ranges
    }

    /// Total number of executable bytes.
    pub fn code_len(&self) -> u64 {
        self.executable_sections().map(|s| s.size).sum()
    }

    pub fn section_bytes(&self, section: &Section) -> &[u8] {
        if !section.has_file_bytes {
            return &[];
        }
        let range = section.file_range();
        &self.data[range.start as usize..range.end as usize]
    }

    /// The executable section holding `address`.
    pub fn section_containing(&self, address: u64) -> Result<&Section, BinaryError> {
        self.executable_sections()
            .find(|s| s.contains(address))
            .ok_or(BinaryError::AddressOutOfRange(address))
    }

    pub fn byte_at(&self, address: u64) -> Result<u8, BinaryError> {
        let section = self.section_containing(address)?;
        Ok(self.data[(section.file_offset + address - section.virtual_address) as usize])
    }

    /// `len` bytes from `address`; the range must sit inside one executable section.
    pub fn read(&self, address: u64, len: u64) -> Result<&[u8], BinaryError> {
        let section = self.section_containing(address)?;
        if len > 0 && !section.contains(address + len - 1) {
            return Err(BinaryError::AddressOutOfRange(address + len - 1));
        }
        let off = (section.file_offset + address - section.virtual_address) as usize;
        Ok(&self.data[off..off + len as usize])
    }

    pub fn file_offset_of(&self, address: u64) -> Result<u64, BinaryError> {
        let section = self.section_containing(address)?;
        Ok(section.file_offset + address - section.virtual_address)
    }

    /// Overwrite bytes at a virtual address, staying inside one section.
    pub(crate) fn write(&mut self, address: u64, bytes: &[u8]) -> Result<(), BinaryError> {
        let off = {
            let section = self.section_containing(address)?;
            if !bytes.is_empty() && !section.contains(address + bytes.len() as u64 - 1) {
                return Err(BinaryError::AddressOutOfRange(
                    address + bytes.len() as u64 - 1,
                ));
            }
            (section.file_offset + address - section.virtual_address) as usize
        };
        self.data[off..off + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    /// Function-typed entries of the symbol table, in table order.
    pub fn function_symbols(&self) -> Result<Vec<FunctionRecord>, BinaryError> {
        let file = parse_elf(&self.data)?;
        let mut out = Vec::new();
        for sym in file.symbols() {
            let st_type = match sym.flags() {
                SymbolFlags::Elf { st_info, .. } => st_info & 0xf,
                _ => continue,
            };
            if st_type != STT_FUNC && st_type != STT_GNU_IFUNC {
                continue;
            }
            if sym.is_undefined() {
                continue;
            }
            out.push(FunctionRecord {
                name: sym.name().unwrap_or("").to_string(),
                start: sym.address(),
                size: sym.size(),
            });
        }
        Ok(out)
    }
}

fn parse_elf(raw: &[u8]) -> Result<object::File<'_>, BinaryError> {
    if raw.len() < 4 || &raw[..4] != b"\x7fELF" {
        return Err(BinaryError::Malformed("bad ELF magic".into()));
    }
    let file = object::File::parse(raw).map_err(|e| BinaryError::Malformed(e.to_string()))?;
    if file.format() != object::BinaryFormat::Elf {
        return Err(BinaryError::Malformed("not an ELF file".into()));
    }
    Ok(file)
}
