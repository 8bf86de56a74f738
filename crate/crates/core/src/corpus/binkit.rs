//! Import of a BinKit-layout directory tree.
//!
//! Files are named `{package}-{pkgver}_{compiler}-{ccver}_{arch}_{bits}_{opt}_{binary}.elf`
//! and live under a directory naming their dataset.

use std::path::Path;

use walkdir::WalkDir;

use super::{CorpusError, CorpusManifest, ManifestEntry, OptLevel};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinkitName {
    pub package: String,
    pub package_version: String,
    pub compiler: String,
    pub compiler_version: String,
    pub arch: String,
    pub opt: OptLevel,
    pub binary: String,
}

fn split_last_dash(s: &str) -> Option<(&str, &str)> {
    s.rsplit_once('-').filter(|(a, b)| !a.is_empty() && !b.is_empty())
}

pub fn parse_binkit_name(file_name: &str) -> Option<BinkitName> {
    let stem = file_name.strip_suffix(".elf").unwrap_or(file_name);
    let parts: Vec<&str> = stem.splitn(6, '_').collect();
    if parts.len() != 6 {
        return None;
    }
    let (package, package_version) = split_last_dash(parts[0])?;
    let (compiler, compiler_version) = split_last_dash(parts[1])?;
    let opt = parts[4].parse().ok()?;
    Some(BinkitName {
        package: package.into(),
        package_version: package_version.into(),
        compiler: compiler.into(),
        compiler_version: compiler_version.into(),
        arch: format!("{}_{}", parts[2], parts[3]),
        opt,
        binary: parts[5].into(),
    })
}

/// Map a dataset directory name to its tag.
pub fn dataset_tag_for(dir: &str) -> Option<&'static str> {
    let d = dir.to_ascii_lowercase();
    Some(match d.as_str() {
        "normal" => "Normal",
        "sizeopt" => "SizeOpt",
        "noinline" => "NoInline",
        "pie" => "PIE",
        "cfi" => "CFI",
        "lto" => "LTO",
        _ if d.starts_with("obfus") => "Obfuscate",
        _ => return None,
    })
}

/// Build a manifest for every BinKit-named file under `dir`. The dataset tag
/// is taken from the nearest recognised ancestor directory (default
/// `Normal`); the config column carries the lower-cased tag so the same
/// build in two datasets keeps distinct keys.
pub fn import_binkit(dir: &Path) -> Result<CorpusManifest, CorpusError> {
    let mut manifest = CorpusManifest::new(dir);
    let mut files: Vec<_> = WalkDir::new(dir)
        .follow_links(true)
        .into_iter()
        .collect::<Result<_, _>>()
        .map_err(|e| CorpusError::Io(e.into()))?;
    files.retain(|e| e.file_type().is_file());
    files.sort_by(|a, b| a.path().cmp(b.path()));
    for f in files {
        let Some(name) = parse_binkit_name(&f.file_name().to_string_lossy()) else {
            continue;
        };
        let rel = f.path().strip_prefix(dir).unwrap_or(f.path()).to_path_buf();
        let dataset = rel
            .parent()
            .into_iter()
            .flat_map(|p| p.components().rev())
            .find_map(|c| dataset_tag_for(&c.as_os_str().to_string_lossy()))
            .unwrap_or("Normal");
        manifest.entries.push(ManifestEntry {
            path: rel,
            package: format!("{}-{}:{}", name.package, name.package_version, name.binary),
            toolchain: name.compiler,
            version: name.compiler_version,
            arch: name.arch,
            opt: name.opt,
            config: dataset.to_ascii_lowercase(),
            dataset: dataset.to_string(),
        });
    }
    if manifest.entries.is_empty() {
        return Err(CorpusError::ManifestParse {
            line: 0,
            message: format!("no BinKit-named binaries under {}", dir.display()),
        });
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_names() {
        let n = parse_binkit_name("a2ps-4.14_clang-4.0_x86_64_O2_a2ps.elf").unwrap();
        assert_eq!(n.package, "a2ps");
        assert_eq!(n.compiler, "clang");
        assert_eq!(n.compiler_version, "4.0");
        assert_eq!(n.arch, "x86_64");
        assert_eq!(n.opt, OptLevel::O2);
        let n = parse_binkit_name("coreutils-8.29_gcc-8.2.0_x86_64_Os_dir_colors.elf").unwrap();
        assert_eq!(n.binary, "dir_colors");
        assert!(parse_binkit_name("README.md").is_none());
        assert!(parse_binkit_name("a_b_c_d_O9_e.elf").is_none());
    }

    #[test]
    fn dataset_tags_from_layout() {
        let dir = tempfile::tempdir().unwrap();
        let layout = [
            ("Normal", "a2ps-4.14_gcc-8.2.0_x86_64_O0_a2ps.elf"),
            ("SizeOpt", "a2ps-4.14_gcc-8.2.0_x86_64_Os_a2ps.elf"),
            ("NoInline", "a2ps-4.14_gcc-8.2.0_x86_64_O0_a2ps.elf"),
            ("PIE", "a2ps-4.14_gcc-8.2.0_x86_64_O0_a2ps.elf"),
            ("Obfuscation/sub", "a2ps-4.14_clang-obfus-4.0_x86_64_O0_a2ps.elf"),
            ("CFI", "a2ps-4.14_clang-7.0_x86_64_O2_a2ps.elf"),
        ];
        for (d, f) in layout {
            let p = dir.path().join(d);
            std::fs::create_dir_all(&p).unwrap();
            std::fs::write(p.join(f), b"").unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), b"").unwrap();
        let m = import_binkit(dir.path()).unwrap();
        let tags: std::collections::BTreeSet<_> = m.entries.iter().map(|e| e.dataset.as_str()).collect();
        assert_eq!(
            tags,
            ["CFI", "NoInline", "Normal", "Obfuscate", "PIE", "SizeOpt"].into()
        );
        let obf = m.entries.iter().find(|e| e.dataset == "Obfuscate").unwrap();
        assert_eq!(obf.toolchain, "clang-obfus");
        // Round-trips through the manifest parser: keys stay unique.
        let text = m.to_csv(None);
        assert_eq!(CorpusManifest::parse(&text, dir.path()).unwrap().entries, m.entries);
    }
}
