//! Corpus construction: configuration matrix, manifest, real-toolchain builds,
//! BinKit import and the synthetic generator.

mod binkit;
mod build;
mod config;
mod manifest;
pub mod synth;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use binkit::{dataset_tag_for, import_binkit, parse_binkit_name, BinkitName};
pub use build::{build_corpus, BuildFailure, BuildReport, Package, Toolchain};
pub use config::{
    builtin_config, builtin_configs, AttackConfiguration, Category, PadParams, ThreatTier,
};
pub use manifest::{ingest_manifest, CorpusManifest, ManifestEntry, OptLevel, MANIFEST_HEADER};
pub use synth::{generate_synthetic_corpus, SynthSpec, SyntheticBinary, SyntheticCorpus, Variant};

use crate::binary::{self, BinaryError, CodeImage, LabelMap};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("manifest line {line}: {message}")]
    ManifestParse { line: u64, message: String },
    #[error("manifest line {line} duplicates the key of line {first_line}")]
    DuplicateEntry { line: u64, first_line: u64 },
    #[error("manifest line {line}: binary {} does not exist", path.display())]
    MissingBinary { line: u64, path: PathBuf },
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("toolchain {id} unavailable: {message}")]
    ToolchainUnavailable { id: String, message: String },
    #[error("no corpus entry could be built ({failures} failures)")]
    AllBuildsFailed { failures: usize },
    #[error("{}: {source}", path.display())]
    Binary {
        path: PathBuf,
        #[source]
        source: BinaryError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ground-truth sidecar written next to each binary.
pub fn labels_file_name(binary_file: &str) -> String {
    format!("{binary_file}.labels")
}

/// A parsed corpus entry with its ground truth.
#[derive(Debug, Clone)]
pub struct CorpusBinary {
    pub entry: ManifestEntry,
    pub image: CodeImage,
    pub labels: LabelMap,
}

impl CorpusBinary {
    pub fn id(&self) -> &str {
        self.image.id()
    }
}

#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub manifest: CorpusManifest,
    pub binaries: Vec<CorpusBinary>,
}

impl LoadedCorpus {
    /// Parse every manifest entry. Ground truth comes from a `.labels` sidecar
    /// when present, otherwise from the binary's function symbols.
    pub fn load(manifest: CorpusManifest) -> Result<Self, CorpusError> {
        let mut binaries = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let path = manifest.resolve(entry);
            let wrap = |source| CorpusError::Binary {
                path: path.clone(),
                source,
            };
            let image = binary::load_image(&path, entry.binary_id()).map_err(wrap)?;
            let sidecar = sidecar_path(&path);
            let labels = if sidecar.is_file() {
                let text = std::fs::read_to_string(&sidecar)?;
                LabelMap::parse_for(&text, &image).map_err(|source| CorpusError::Binary {
                    path: sidecar.clone(),
                    source,
                })?
            } else {
                binary::ground_truth_of(&image).map_err(wrap)?.1
            };
            binaries.push(CorpusBinary {
                entry: entry.clone(),
                image,
                labels,
            });
        }
        Ok(LoadedCorpus { manifest, binaries })
    }

    pub fn open(manifest_path: &Path) -> Result<Self, CorpusError> {
        Self::load(ingest_manifest(manifest_path)?)
    }

    pub fn len(&self) -> usize {
        self.binaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.binaries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CorpusBinary> {
        self.binaries.iter().find(|b| b.id() == id)
    }

    /// Concatenate corpora (e.g. a training mix).
    pub fn merged(parts: &[&LoadedCorpus]) -> LoadedCorpus {
        let mut out = LoadedCorpus {
            manifest: CorpusManifest::default(),
            binaries: Vec::new(),
        };
        for p in parts {
            out.manifest.entries.extend(p.manifest.entries.iter().cloned());
            out.binaries.extend(p.binaries.iter().cloned());
        }
        out
    }
}

fn sidecar_path(binary: &Path) -> PathBuf {
    let name = binary
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    binary.with_file_name(labels_file_name(&name))
}
