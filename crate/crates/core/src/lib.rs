pub mod analysis;
pub mod binary;
pub mod corpus;
pub mod detectors;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod rewriter;
pub mod search;
pub mod x86;

pub use binary::{extract_ground_truth, CodeImage, FunctionRecord, Label, LabelMap};
pub use corpus::{generate_synthetic_corpus, CorpusManifest, LoadedCorpus, SynthSpec};
pub use detectors::{Detection, Detector, PatternDetector, WindowClassifierModel, WindowDetector};
pub use metrics::{confusion, ClassCounts, ClassFilter, ConfusionCounts, MeanSd};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineError};
pub use rewriter::{apply_injections, scan_pads, verify_injection, InjectionMode, InjectionPlan, PadHint, PadRegion};
pub use search::{attack_search, SearchConfig, SearchResult};
