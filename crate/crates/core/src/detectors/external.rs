//! Adapter for detectors run as external programs.
//!
//! The program is invoked as `<cmd> [args...] <binary_path>` and must print
//! one `<hex-address> <S|E>` line per detection, exiting 0.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use sha2::{Digest, Sha256};
use wait_timeout::ChildExt;

use super::{check_detection, normalize, Detection, Detector, DetectorError};
use crate::binary::{parse_boundary_line, CodeImage};

#[derive(Debug, Clone)]
pub struct ExternalDetector {
    pub id: String,
    pub program: PathBuf,
    pub args: Vec<String>,
    pub timeout: Duration,
}

impl ExternalDetector {
    pub fn new(id: impl Into<String>, program: impl Into<PathBuf>) -> Self {
        ExternalDetector {
            id: id.into(),
            program: program.into(),
            args: Vec::new(),
            timeout: Duration::from_secs(300),
        }
    }

    pub fn with_args(mut self, args: &[&str]) -> Self {
        self.args = args.iter().map(|a| a.to_string()).collect();
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Run on a binary already on disk; `image` is its parsed form, used to
    /// validate addresses.
    pub fn run_on_path(&self, binary_path: &Path, image: &CodeImage) -> Result<Vec<Detection>, DetectorError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg(binary_path)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        let mut stdout = child.stdout.take().unwrap();
        let mut stderr = child.stderr.take().unwrap();
        let out_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            stdout.read_to_end(&mut buf).map(|_| buf)
        });
        let err_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stderr.read_to_end(&mut buf);
            buf
        });
        let status = match child.wait_timeout(self.timeout)? {
            Some(s) => s,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(DetectorError::Timeout {
                    seconds: self.timeout.as_secs_f64(),
                });
            }
        };
        let out = out_reader.join().expect("stdout reader")?;
        let err = err_reader.join().expect("stderr reader");
        if !status.success() {
            return Err(DetectorError::AdapterCrash {
                status: status.to_string(),
                stderr: String::from_utf8_lossy(&err).trim().to_string(),
            });
        }
        let text = String::from_utf8(out).map_err(|_| DetectorError::ProtocolViolation {
            line: 0,
            message: "output is not UTF-8".into(),
        })?;
        parse_adapter_output(&text, image)
    }
}

/// Parse and validate adapter stdout against `image`.
pub fn parse_adapter_output(text: &str, image: &CodeImage) -> Result<Vec<Detection>, DetectorError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let violation = |message: String| DetectorError::ProtocolViolation { line: i + 1, message };
        let (address, label) = parse_boundary_line(line).map_err(violation)?;
        let d = Detection::certain(address, label);
        check_detection(image, &d).map_err(violation)?;
        out.push(d);
    }
    normalize(&mut out);
    Ok(out)
}

impl Detector for ExternalDetector {
    fn id(&self) -> &str {
        &self.id
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.program.to_string_lossy().as_bytes());
        for a in &self.args {
            h.update([0]);
            h.update(a.as_bytes());
        }
        format!("external:{}", hex::encode(&h.finalize()[..8]))
    }

    /// Writes the image to a temporary file and runs the adapter on it.
    fn detect(&self, image: &CodeImage) -> Result<Vec<Detection>, DetectorError> {
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("binary.elf");
        std::fs::write(&path, image.data())?;
        self.run_on_path(&path, image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binary::elf::{ElfWriter, SectionKind};
    use crate::binary::Label;
    use proptest::prelude::*;

    fn image16() -> CodeImage {
        let mut w = ElfWriter::new();
        w.section(".text", SectionKind::Code, 0x1000, vec![0x90; 16]);
        CodeImage::parse("x", &w.write()).unwrap()
    }

    fn sh(script: &str) -> ExternalDetector {
        ExternalDetector::new("sh", "/bin/sh").with_args(&["-c", script, "adapter"])
    }

    #[test]
    fn silent_adapter_is_empty() {
        assert!(sh("true").detect(&image16()).unwrap().is_empty());
    }

    #[test]
    fn one_detection() {
        let d = sh("echo '0x1000 S'").detect(&image16()).unwrap();
        assert_eq!(d, vec![Detection::certain(0x1000, Label::Start)]);
    }

    #[test]
    fn receives_binary_path() {
        // The adapter sees a real copy of the image.
        let d = sh("test -s \"$1\" && echo '0x100f E'").detect(&image16()).unwrap();
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn out_of_section_is_violation() {
        let r = sh("echo '0x1000 S'; echo '0x2000 E'").detect(&image16());
        assert!(matches!(r, Err(DetectorError::ProtocolViolation { line: 2, .. })));
        let r = sh("echo garbage").detect(&image16());
        assert!(matches!(r, Err(DetectorError::ProtocolViolation { line: 1, .. })));
    }

    #[test]
    fn crash_and_timeout() {
        assert!(matches!(sh("exit 3").detect(&image16()), Err(DetectorError::AdapterCrash { .. })));
        let slow = sh("sleep 5").with_timeout(Duration::from_millis(200));
        assert!(matches!(slow.detect(&image16()), Err(DetectorError::Timeout { .. })));
    }

    proptest! {
        #[test]
        fn adversarial_output_never_yields_invalid_detection(
            lines in proptest::collection::vec(
                prop_oneof![
                    (0xff0u64..0x1020, prop_oneof![Just("S"), Just("E"), Just("N"), Just("X")])
                        .prop_map(|(a, l)| format!("{a:#x} {l}")),
                    "[ -~]{0,12}",
                ],
                0..12,
            )
        ) {
            let img = image16();
            if let Ok(dets) = parse_adapter_output(&lines.join("\n"), &img) {
                for d in &dets {
                    prop_assert!(check_detection(&img, d).is_ok());
                }
            }
        }
    }
}
