//! Binary model: ELF code images, function records and byte-level ground truth.

pub mod elf;
mod image;
mod labels;

pub use image::{CodeImage, Section};
pub use labels::{
    extract_ground_truth, format_boundary_line, parse_boundary_line, FunctionRecord, Label,
    LabelMap,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BinaryError {
    #[error("malformed binary: {0}")]
    Malformed(String),
    #[error("binary has no executable section")]
    NoExecutableSection,
    #[error("address {0:#x} is not inside an executable section")]
    AddressOutOfRange(u64),
    #[error("functions {first} and {second} overlap")]
    OverlappingFunctions { first: String, second: String },
    #[error("binary carries no function symbols (stripped?)")]
    StrippedBinary,
    #[error("label map line {line}: {message}")]
    LabelParse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Read and parse an ELF file from disk, using the path as the image id.
pub fn load_image(path: &std::path::Path, id: impl Into<String>) -> Result<CodeImage, BinaryError> {
    let raw = std::fs::read(path)?;
    CodeImage::parse(id, &raw)
}

/// Symbols + ground truth in one step.
pub fn ground_truth_of(image: &CodeImage) -> Result<(Vec<FunctionRecord>, LabelMap), BinaryError> {
    let symbols = image.function_symbols()?;
    extract_ground_truth(image, &symbols)
}
