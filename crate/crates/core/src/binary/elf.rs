//! Minimal ELF64 (x86-64, little-endian) executable writer.
//!
//! Emits one `PT_LOAD` per allocated section, a `.symtab` with `STT_FUNC`
//! entries, `.strtab` and `.shstrtab`. Output is a pure function of the input.

const PAGE: u64 = 0x1000;
const EHDR_SIZE: u64 = 64;
const PHDR_SIZE: u64 = 56;
const SHDR_SIZE: u64 = 64;
const SYM_SIZE: u64 = 24;

const SHT_PROGBITS: u32 = 1;
const SHT_SYMTAB: u32 = 2;
const SHT_STRTAB: u32 = 3;
const SHT_NOBITS: u32 = 8;
const SHF_WRITE: u64 = 0x1;
const SHF_ALLOC: u64 = 0x2;
const SHF_EXECINSTR: u64 = 0x4;
const PT_LOAD: u32 = 1;
const PF_X: u32 = 1;
const PF_W: u32 = 2;
const PF_R: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectionKind {
    Code,
    ReadOnly,
    Data,
    Bss,
}

#[derive(Debug, Clone)]
pub struct ElfSection {
    pub name: String,
    pub kind: SectionKind,
    pub address: u64,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct ElfSymbol {
    pub name: String,
    pub address: u64,
    pub size: u64,
    /// Index into the writer's section list.
    pub section: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ElfWriter {
    sections: Vec<ElfSection>,
    symbols: Vec<ElfSymbol>,
    entry: Option<u64>,
}

impl ElfWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn section(
        &mut self,
        name: impl Into<String>,
        kind: SectionKind,
        address: u64,
        bytes: Vec<u8>,
    ) -> usize {
        self.sections.push(ElfSection {
            name: name.into(),
            kind,
            address,
            bytes,
        });
        self.sections.len() - 1
    }

    pub fn function(&mut self, name: impl Into<String>, section: usize, address: u64, size: u64) {
        self.symbols.push(ElfSymbol {
            name: name.into(),
            address,
            size,
            section,
        });
    }

    pub fn entry(&mut self, address: u64) {
        self.entry = Some(address);
    }

    pub fn write(&self) -> Vec<u8> {
        let phnum = self.sections.len() as u64;
        let mut offset = EHDR_SIZE + PHDR_SIZE * phnum;

        // Allocated section placement: file offset congruent to address mod page.
        let mut placed = Vec::with_capacity(self.sections.len());
        for s in &self.sections {
            if s.kind == SectionKind::Bss {
                placed.push(offset);
                continue;
            }
            let want = s.address % PAGE;
            let mut off = (offset / PAGE) * PAGE + want;
            if off < offset {
                off += PAGE;
            }
            placed.push(off);
            offset = off + s.bytes.len() as u64;
        }

        let mut strtab = vec![0u8];
        let mut sym_names = Vec::with_capacity(self.symbols.len());
        for sym in &self.symbols {
            sym_names.push(strtab.len() as u32);
            strtab.extend_from_slice(sym.name.as_bytes());
            strtab.push(0);
        }

        let mut shstrtab = vec![0u8];
        let name_of = |n: &str, tab: &mut Vec<u8>| {
            let at = tab.len() as u32;
            tab.extend_from_slice(n.as_bytes());
            tab.push(0);
            at
        };
        let sec_names: Vec<u32> = self
            .sections
            .iter()
            .map(|s| name_of(&s.name, &mut shstrtab))
            .collect();
        let symtab_name = name_of(".symtab", &mut shstrtab);
        let strtab_name = name_of(".strtab", &mut shstrtab);
        let shstrtab_name = name_of(".shstrtab", &mut shstrtab);

        let symtab_off = align(offset, 8);
        let symtab_size = SYM_SIZE * (self.symbols.len() as u64 + 1);
        let strtab_off = symtab_off + symtab_size;
        let shstrtab_off = strtab_off + strtab.len() as u64;
        let shoff = align(shstrtab_off + shstrtab.len() as u64, 8);
        // null + user sections + symtab + strtab + shstrtab
        let shnum = self.sections.len() as u64 + 4;
        let total = shoff + SHDR_SIZE * shnum;

        let mut out = vec![0u8; total as usize];
        let entry = self.entry.unwrap_or_else(|| {
            self.sections
                .iter()
                .find(|s| s.kind == SectionKind::Code)
                .map(|s| s.address)
                .unwrap_or(0)
        });

        // ELF header
        let mut w = Cursor::new(&mut out, 0);
        w.bytes(b"\x7fELF");
        w.u8(2); // ELFCLASS64
        w.u8(1); // little endian
        w.u8(1); // EV_CURRENT
        w.u8(0); // SYSV
        w.bytes(&[0; 8]);
        w.u16(2); // ET_EXEC
        w.u16(62); // EM_X86_64
        w.u32(1);
        w.u64(entry);
        w.u64(EHDR_SIZE);
        w.u64(shoff);
        w.u32(0);
        w.u16(EHDR_SIZE as u16);
        w.u16(PHDR_SIZE as u16);
        w.u16(phnum as u16);
        w.u16(SHDR_SIZE as u16);
        w.u16(shnum as u16);
        w.u16(shnum as u16 - 1);

        // Program headers
        for (s, &off) in self.sections.iter().zip(&placed) {
            let flags = match s.kind {
                SectionKind::Code => PF_R | PF_X,
                SectionKind::ReadOnly => PF_R,
                SectionKind::Data | SectionKind::Bss => PF_R | PF_W,
            };
            let filesz = if s.kind == SectionKind::Bss {
                0
            } else {
                s.bytes.len() as u64
            };
            w.u32(PT_LOAD);
            w.u32(flags);
            w.u64(off);
            w.u64(s.address);
            w.u64(s.address);
            w.u64(filesz);
            w.u64(s.bytes.len() as u64);
            w.u64(PAGE);
        }

        for (s, &off) in self.sections.iter().zip(&placed) {
            if s.kind != SectionKind::Bss {
                out[off as usize..off as usize + s.bytes.len()].copy_from_slice(&s.bytes);
            }
        }

        // Symbol table: null symbol, then STT_FUNC / STB_GLOBAL entries.
        let mut w = Cursor::new(&mut out, symtab_off as usize);
        w.bytes(&[0; SYM_SIZE as usize]);
        for (sym, &name) in self.symbols.iter().zip(&sym_names) {
            w.u32(name);
            w.u8((1 << 4) | 2);
            w.u8(0);
            w.u16(sym.section as u16 + 1);
            w.u64(sym.address);
            w.u64(sym.size);
        }
        out[strtab_off as usize..strtab_off as usize + strtab.len()].copy_from_slice(&strtab);
        out[shstrtab_off as usize..shstrtab_off as usize + shstrtab.len()]
            .copy_from_slice(&shstrtab);

        // Section headers
        let mut w = Cursor::new(&mut out, shoff as usize);
        w.bytes(&[0; SHDR_SIZE as usize]);
        for ((s, &off), &name) in self.sections.iter().zip(&placed).zip(&sec_names) {
            let (ty, flags, align) = match s.kind {
                SectionKind::Code => (SHT_PROGBITS, SHF_ALLOC | SHF_EXECINSTR, 16),
                SectionKind::ReadOnly => (SHT_PROGBITS, SHF_ALLOC, 8),
                SectionKind::Data => (SHT_PROGBITS, SHF_ALLOC | SHF_WRITE, 8),
                SectionKind::Bss => (SHT_NOBITS, SHF_ALLOC | SHF_WRITE, 8),
            };
            w.shdr(name, ty, flags, s.address, off, s.bytes.len() as u64, 0, 0, align, 0);
        }
        let strtab_index = self.sections.len() as u32 + 2;
        w.shdr(
            symtab_name,
            SHT_SYMTAB,
            0,
            0,
            symtab_off,
            symtab_size,
            strtab_index,
            1,
            8,
            SYM_SIZE,
        );
        w.shdr(strtab_name, SHT_STRTAB, 0, 0, strtab_off, strtab.len() as u64, 0, 0, 1, 0);
        w.shdr(
            shstrtab_name,
            SHT_STRTAB,
            0,
            0,
            shstrtab_off,
            shstrtab.len() as u64,
            0,
            0,
            1,
            0,
        );
        out
    }
}

fn align(v: u64, to: u64) -> u64 {
    v.div_ceil(to) * to
}

struct Cursor<'a> {
    buf: &'a mut [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a mut [u8], at: usize) -> Self {
        Self { buf, at }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf[self.at..self.at + b.len()].copy_from_slice(b);
        self.at += b.len();
    }
    fn u8(&mut self, v: u8) {
        self.bytes(&[v]);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    #[allow(clippy::too_many_arguments)]
    fn shdr(
        &mut self,
        name: u32,
        ty: u32,
        flags: u64,
        addr: u64,
        offset: u64,
        size: u64,
        link: u32,
        info: u32,
        align: u64,
        entsize: u64,
    ) {
        self.u32(name);
        self.u32(ty);
        self.u64(flags);
        self.u64(addr);
        self.u64(offset);
        self.u64(size);
        self.u32(link);
        self.u32(info);
        self.u64(align);
        self.u64(entsize);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binary::CodeImage;

    #[test]
    fn file_offsets_congruent_with_addresses() {
        let mut w = ElfWriter::new();
        let text = w.section(".text", SectionKind::Code, 0x401000, vec![0x90; 16]);
        w.section(".rodata", SectionKind::ReadOnly, 0x402010, vec![1, 2, 3]);
        w.function("f", text, 0x401000, 16);
        let raw = w.write();
        let image = CodeImage::parse("t", &raw).unwrap();
        for s in image.sections().iter().filter(|s| s.name.starts_with(".r") || s.name == ".text") {
            assert_eq!(s.file_offset % PAGE, s.virtual_address % PAGE, "{}", s.name);
        }
        assert_eq!(image.entry_point(), 0x401000);
    }
}
