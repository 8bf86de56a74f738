use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::CorpusError;

pub const MANIFEST_HEADER: [&str; 8] = [
    "path", "package", "toolchain", "version", "arch", "opt", "config", "dataset",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptLevel {
    O0,
    O1,
    O2,
    O3,
    Os,
    Ofast,
}

impl OptLevel {
    pub const ALL: [OptLevel; 6] = [
        OptLevel::O0,
        OptLevel::O1,
        OptLevel::O2,
        OptLevel::O3,
        OptLevel::Os,
        OptLevel::Ofast,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OptLevel::O0 => "O0",
            OptLevel::O1 => "O1",
            OptLevel::O2 => "O2",
            OptLevel::O3 => "O3",
            OptLevel::Os => "Os",
            OptLevel::Ofast => "Ofast",
        }
    }

    pub fn flag(self) -> String {
        format!("-{}", self.as_str())
    }
}

impl fmt::Display for OptLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptLevel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OptLevel::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| format!("unknown optimization level {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub package: String,
    pub toolchain: String,
    pub version: String,
    pub arch: String,
    pub opt: OptLevel,
    pub config: String,
    pub dataset: String,
}

impl ManifestEntry {
    /// `(package, toolchain, version, opt, config)` must be unique per manifest.
    pub fn key(&self) -> (&str, &str, &str, OptLevel, &str) {
        (
            &self.package,
            &self.toolchain,
            &self.version,
            self.opt,
            &self.config,
        )
    }

    /// Identifier used for images, labels and score rows.
    pub fn binary_id(&self) -> String {
        self.path.to_string_lossy().into_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CorpusManifest {
            root: root.into(),
            entries: Vec::new(),
        }
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn find(&self, binary_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.binary_id() == binary_id)
    }

    /// Duplicate keys, reported as (line of first, line of duplicate) where
    /// lines count the header as line 1.
    fn check_unique(&self, lines: &[u64]) -> Result<(), CorpusError> {
        let mut seen: HashMap<_, u64> = HashMap::new();
        for (entry, &line) in self.entries.iter().zip(lines) {
            if let Some(&first) = seen.get(&entry.key()) {
                return Err(CorpusError::DuplicateEntry {
                    line,
                    first_line: first,
                });
            }
            seen.insert(entry.key(), line);
        }
        Ok(())
    }

    pub fn to_csv(&self, comment: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(c) = comment {
            out.push_str(&format!("# {c}\n"));
        }
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER).unwrap();
        for e in &self.entries {
            w.write_record([
                e.path.to_string_lossy().as_ref(),
                &e.package,
                &e.toolchain,
                &e.version,
                &e.arch,
                e.opt.as_str(),
                &e.config,
                &e.dataset,
            ])
            .unwrap();
        }
        out.push_str(std::str::from_utf8(&w.into_inner().unwrap()).unwrap());
        out
    }

    pub fn write(&self, path: &Path, comment: Option<&str>) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_csv(comment))?;
        Ok(())
    }

    /// Parse manifest text: header row required, `#` lines are comments.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self, CorpusError> {
        Self::parse_with_lines(text, root.into()).map(|(m, _)| m)
    }

    fn parse_with_lines(text: &str, root: PathBuf) -> Result<(Self, Vec<u64>), CorpusError> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| CorpusError::ManifestParse {
            line: 1,
            message: e.to_string(),
        })?;
        if header.is_empty() || header.iter().ne(MANIFEST_HEADER) {
            return Err(CorpusError::ManifestParse {
                line: 1,
                message: format!("header must be `{}`", MANIFEST_HEADER.join(",")),
            });
        }
        let mut manifest = CorpusManifest::new(root);
        let mut lines = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| CorpusError::ManifestParse {
                line: e.position().map(|p| p.line()).unwrap_or(0),
                message: e.to_string(),
            })?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let opt = record[5].parse().map_err(|message| CorpusError::ManifestParse {
                line,
                message,
            })?;
            manifest.entries.push(ManifestEntry {
                path: PathBuf::from(&record[0]),
                package: record[1].to_string(),
                toolchain: record[2].to_string(),
                version: record[3].to_string(),
                arch: record[4].to_string(),
                opt,
                config: record[6].to_string(),
                dataset: record[7].to_string(),
            });
            lines.push(line);
        }
        manifest.check_unique(&lines)?;
        Ok((manifest, lines))
    }
}

/// Read and validate a manifest file. Relative binary paths resolve against
/// the manifest's directory.
pub fn ingest_manifest(path: &Path) -> Result<CorpusManifest, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let (manifest, lines) = CorpusManifest::parse_with_lines(&text, root)?;
    for (entry, line) in manifest.entries.iter().zip(lines) {
        let p = manifest.resolve(entry);
        if !p.is_file() {
            return Err(CorpusError::MissingBinary { line, path: p });
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(path: &str, package: &str) -> ManifestEntry {
        ManifestEntry {
            path: path.into(),
            package: package.into(),
            toolchain: "gcc".into(),
            version: "11.4.0".into(),
            arch: "x86_64".into(),
            opt: OptLevel::O2,
            config: "baseline".into(),
            dataset: "Normal".into(),
        }
    }

    #[test]
    fn empty_file_needs_header() {
        assert!(matches!(
            CorpusManifest::parse("", "."),
            Err(CorpusError::ManifestParse { line: 1, .. })
        ));
        assert!(matches!(
            CorpusManifest::parse("path,package\n", "."),
            Err(CorpusError::ManifestParse { .. })
        ));
    }

    #[test]
    fn duplicate_reported_with_lines() {
        let mut m = CorpusManifest::new(".");
        m.entries.push(entry("a.elf", "p"));
        m.entries.push(entry("b.elf", "p"));
        let text = m.to_csv(None);
        match CorpusManifest::parse(&text, ".") {
            Err(CorpusError::DuplicateEntry { line, first_line }) => {
                assert_eq!((first_line, line), (2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip_with_comment() {
        let mut m = CorpusManifest::new("/corpus");
        m.entries.push(entry("a.elf", "p"));
        m.entries.push(entry("b,c.elf", "q"));
        let text = m.to_csv(Some("config-hash: abc"));
        assert!(text.starts_with("# config-hash: abc\npath,package,toolchain,version,arch,opt,config,dataset\n"));
        assert_eq!(CorpusManifest::parse(&text, "/corpus").unwrap(), m);
    }

    #[test]
    fn missing_binary_has_line() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.elf"), b"x").unwrap();
        let mut m = CorpusManifest::new(dir.path());
        m.entries.push(entry("a.elf", "p"));
        m.entries.push(entry("gone.elf", "q"));
        let path = dir.path().join("manifest.csv");
        m.write(&path, Some("c")).unwrap();
        match ingest_manifest(&path) {
            Err(CorpusError::MissingBinary { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }
}
