//! Real-toolchain corpus builds.

use std::path::{Path, PathBuf};
use std::process::Command;

use rayon::prelude::*;

use super::{AttackConfiguration, CorpusError, CorpusManifest, ManifestEntry, OptLevel};
use crate::binary;

/// A compiler driver. `BB_CC_<ID>` (id upper-cased, non-alphanumerics as
/// `_`) overrides the command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Toolchain {
    pub id: String,
    pub command: PathBuf,
    pub version: String,
}

impl Toolchain {
    pub fn env_var(id: &str) -> String {
        let tail: String = id
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() {
                    c.to_ascii_uppercase()
                } else {
                    '_'
                }
            })
            .collect();
        format!("BB_CC_{tail}")
    }

    /// Locate and version-probe a compiler.
    pub fn resolve(id: &str, default_command: impl Into<PathBuf>) -> Result<Self, CorpusError> {
        let command = std::env::var_os(Self::env_var(id))
            .map(PathBuf::from)
            .unwrap_or_else(|| default_command.into());
        let unavailable = |message: String| CorpusError::ToolchainUnavailable {
            id: id.to_string(),
            message,
        };
        let out = Command::new(&command)
            .arg("-dumpversion")
            .output()
            .map_err(|e| unavailable(format!("{}: {e}", command.display())))?;
        if !out.status.success() {
            return Err(unavailable(String::from_utf8_lossy(&out.stderr).into_owned()));
        }
        let version = String::from_utf8_lossy(&out.stdout).trim().to_string();
        Ok(Toolchain {
            id: id.to_string(),
            command,
            version,
        })
    }

    fn compile(&self, sources: &[PathBuf], flags: &[String], out: &Path) -> Result<(), String> {
        let output = Command::new(&self.command)
            .args(flags)
            .args(sources)
            .arg("-o")
            .arg(out)
            .output()
            .map_err(|e| e.to_string())?;
        if output.status.success() {
            Ok(())
        } else {
            Err(String::from_utf8_lossy(&output.stderr).trim().to_string())
        }
    }
}

/// A buildable program: one or more C sources linked into one executable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Package {
    pub name: String,
    pub version: String,
    pub sources: Vec<PathBuf>,
}

impl Package {
    /// A directory of `.c` files, or a single `.c` file.
    pub fn from_path(path: &Path) -> Result<Self, CorpusError> {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "pkg".into());
        let sources = if path.is_dir() {
            let mut v: Vec<PathBuf> = std::fs::read_dir(path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "c"))
                .collect();
            v.sort();
            v
        } else {
            vec![path.to_path_buf()]
        };
        if sources.is_empty() {
            return Err(CorpusError::InvalidConfig(format!(
                "{}: no C sources",
                path.display()
            )));
        }
        Ok(Package {
            name,
            version: "0".into(),
            sources,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildFailure {
    pub package: String,
    pub toolchain: String,
    pub opt: OptLevel,
    pub config: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct BuildReport {
    pub manifest: CorpusManifest,
    pub failures: Vec<BuildFailure>,
}

const PROBE_SOURCE: &str = r#"
#include <string.h>
int probe(const char *s) {
    char buf[64];
    strcpy(buf, s);
    return (int)strlen(buf);
}
int main(int argc, char **argv) { return argc > 1 ? probe(argv[1]) : 0; }
"#;

/// Compile every ⟨package, toolchain, config, optimization⟩ combination into
/// `out_dir`. Binaries keep symbols and debug info. Configurations that fail
/// a probe compile on a toolchain are recorded as failures for every
/// combination they would have produced; individual build failures are
/// likewise recorded. Post-compilation transforms are not applied here.
pub fn build_corpus(
    packages: &[Package],
    toolchains: &[Toolchain],
    configs: &[AttackConfiguration],
    opts: &[OptLevel],
    out_dir: &Path,
    dataset: &str,
) -> Result<BuildReport, CorpusError> {
    std::fs::create_dir_all(out_dir)?;
    let probe_dir = tempfile::tempdir()?;
    let probe_src = probe_dir.path().join("probe.c");
    std::fs::write(&probe_src, PROBE_SOURCE)?;

    // Probe each (toolchain, config) once.
    let probes: Vec<(usize, usize, Result<(), String>)> = toolchains
        .iter()
        .enumerate()
        .flat_map(|(t, _)| (0..configs.len()).map(move |c| (t, c)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(t, c)| {
            let out = probe_dir.path().join(format!("probe_{t}_{c}"));
            let r = toolchains[t].compile(&[probe_src.clone()], &configs[c].flags, &out);
            (t, c, r)
        })
        .collect();

    let mut jobs = Vec::new();
    let mut failures = Vec::new();
    for (t, c, probe) in &probes {
        for p in packages {
            for &opt in opts {
                match probe {
                    Ok(()) => jobs.push((p, &toolchains[*t], &configs[*c], opt)),
                    Err(m) => failures.push(BuildFailure {
                        package: p.name.clone(),
                        toolchain: toolchains[*t].id.clone(),
                        opt,
                        config: configs[*c].name.clone(),
                        message: format!("probe compile failed: {m}"),
                    }),
                }
            }
        }
    }

    let results: Vec<Result<ManifestEntry, BuildFailure>> = jobs
        .into_par_iter()
        .map(|(p, tc, config, opt)| {
            let file = format!(
                "{}-{}_{}-{}_x86_64_{}_{}.elf",
                p.name, p.version, tc.id, tc.version, opt, config.name
            );
            let mut flags = vec![opt.flag(), "-g".to_string()];
            flags.extend(config.flags.iter().cloned());
            let fail = |message: String| BuildFailure {
                package: p.name.clone(),
                toolchain: tc.id.clone(),
                opt,
                config: config.name.clone(),
                message,
            };
            let path = out_dir.join(&file);
            tc.compile(&p.sources, &flags, &path).map_err(fail)?;
            binary::load_image(&path, file.clone()).map_err(|e| fail(e.to_string()))?;
            Ok(ManifestEntry {
                path: file.into(),
                package: p.name.clone(),
                toolchain: tc.id.clone(),
                version: tc.version.clone(),
                arch: "x86_64".into(),
                opt,
                config: config.name.clone(),
                dataset: dataset.to_string(),
            })
        })
        .collect();

    let mut manifest = CorpusManifest::new(out_dir);
    for r in results {
        match r {
            Ok(e) => manifest.entries.push(e),
            Err(f) => failures.push(f),
        }
    }
    if manifest.entries.is_empty() {
        return Err(CorpusError::AllBuildsFailed {
            failures: failures.len(),
        });
    }
    Ok(BuildReport { manifest, failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_var_name() {
        assert_eq!(Toolchain::env_var("gcc-11"), "BB_CC_GCC_11");
        assert_eq!(Toolchain::env_var("clang14"), "BB_CC_CLANG14");
    }

    #[test]
    fn missing_compiler_is_unavailable() {
        let r = Toolchain::resolve("nonesuch", "/nonexistent/cc");
        assert!(matches!(r, Err(CorpusError::ToolchainUnavailable { .. })));
    }
}
