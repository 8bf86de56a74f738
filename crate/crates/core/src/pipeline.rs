//! End-to-end run: corpus, ground truth, detection, scoring, analysis,
//! search and validation, each phase writing its artifacts under one
//! output directory.
//!
//! Every phase has a hash covering its own configuration and that of all
//! earlier phases. CSV artifacts carry it in a `# config-hash:` comment and
//! a stamp file under `.stamps/` records it once the phase completes; a
//! rerun skips phases whose stamp matches and reloads their artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{collect_misclassifications, parse_seeds_csv, rank_heavy_hitters, seeds_csv, Anchor, MisclassRecord};
use crate::binary::{ground_truth_of, LabelMap};
use crate::corpus::{
    build_corpus, builtin_config, generate_synthetic_corpus, import_binkit, labels_file_name, CorpusManifest, LoadedCorpus,
    OptLevel, Package, SynthSpec, Toolchain,
};
use crate::detectors::{
    detections_csv, parse_detections_csv, Detection, Detector, ExternalDetector, PatternDetector, PatternTable,
    WindowClassifierModel, WindowDetector, WindowHyper,
};
use crate::metrics::{aggregate, confusion_with_tolerance, parse_scores_csv, score_rows, scores_csv, ClassFilter, ScoreClass, ScoreRow};
use crate::report::emit_report;
use crate::rewriter::{InjectionMode, PadHint};
use crate::search::{
    attack_search, recovery, search_log_csv, validate_attack, AttackSurface, Objective, SearchConfig, SearchResult, Target,
    TargetKind,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("phase {phase}: {message}")]
    Phase { phase: Phase, message: String },
}

impl PipelineError {
    /// Process exit status: 2 for configuration errors, 3 for phase failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Phase { .. } => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Corpus,
    Gt,
    Detect,
    Score,
    Analyze,
    Search,
    Validate,
}

impl Phase {
    pub const ALL: [Phase; 7] = [
        Phase::Corpus,
        Phase::Gt,
        Phase::Detect,
        Phase::Score,
        Phase::Analyze,
        Phase::Search,
        Phase::Validate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Corpus => "corpus",
            Phase::Gt => "gt",
            Phase::Detect => "detect",
            Phase::Score => "score",
            Phase::Analyze => "analyze",
            Phase::Search => "search",
            Phase::Validate => "validate",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    Synth {
        spec: SynthSpec,
        #[serde(default)]
        seed: Option<u64>,
    },
    Build {
        packages: Vec<PathBuf>,
        toolchains: Vec<ToolchainConfig>,
        configs: Vec<String>,
        opts: Vec<OptLevel>,
        #[serde(default = "default_dataset")]
        dataset: String,
    },
    Import {
        dir: PathBuf,
    },
}

fn default_dataset() -> String {
    "Normal".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolchainConfig {
    pub id: String,
    pub command: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCorpus {
    pub spec: SynthSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectorConfig {
    Pattern {
        #[serde(default)]
        id: Option<String>,
        #[serde(default)]
        table: Option<PathBuf>,
        #[serde(default = "yes")]
        extents: bool,
    },
    Window {
        #[serde(default)]
        id: Option<String>,
        /// A saved model; otherwise one is trained on `train`.
        #[serde(default)]
        model: Option<PathBuf>,
        #[serde(default)]
        train: Vec<TrainCorpus>,
        #[serde(default)]
        hyper: WindowHyper,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        threshold: Option<f64>,
    },
    External {
        id: String,
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
        #[serde(default)]
        timeout_secs: Option<u64>,
    },
}

fn yes() -> bool {
    true
}

impl DetectorConfig {
    pub fn id(&self) -> &str {
        match self {
            DetectorConfig::Pattern { id, .. } => id.as_deref().unwrap_or("pattern"),
            DetectorConfig::Window { id, .. } => id.as_deref().unwrap_or("window"),
            DetectorConfig::External { id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default)]
    pub filter: ClassFilter,
    #[serde(default = "all_class")]
    pub headline: ScoreClass,
    #[serde(default)]
    pub tolerance: u64,
}

fn all_class() -> ScoreClass {
    ScoreClass::All
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            filter: ClassFilter::Both,
            headline: ScoreClass::All,
            tolerance: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub radius: usize,
    pub k: usize,
    #[serde(default)]
    pub anchor: Anchor,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            radius: 8,
            k: 4,
            anchor: Anchor::AtAddress,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchPhaseConfig {
    /// Id of the detector to attack.
    pub detector: String,
    #[serde(default = "four")]
    pub k: usize,
    pub budget: usize,
    pub mode: InjectionMode,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default)]
    pub target_kind: TargetKind,
    #[serde(default)]
    pub rng_seed: Option<u64>,
    #[serde(default)]
    pub valid_only: bool,
    #[serde(default)]
    pub hint: PadHint,
    /// Heavy hitters of matching length fed in as seeds, best first.
    #[serde(default)]
    pub seeds: usize,
    /// Degradation reported as met when a candidate drops mean F1 this much.
    #[serde(default = "default_goal")]
    pub goal_drop: f64,
}

fn four() -> usize {
    4
}

fn default_goal() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    /// Best-ranked payloads to re-inject.
    #[serde(default = "one")]
    pub payloads: usize,
    /// Targets per binary: the first functions with a usable pad.
    #[serde(default = "one")]
    pub functions_per_binary: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub rng_seed: u64,
    pub corpus: CorpusSource,
    pub detectors: Vec<DetectorConfig>,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub search: Option<SearchPhaseConfig>,
    #[serde(default)]
    pub validate: Option<ValidateConfig>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let c: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.detectors.is_empty() {
            return bad("detectors: at least one detector is required".into());
        }
        let mut ids: Vec<&str> = self.detectors.iter().map(|d| d.id()).collect();
        ids.sort();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return bad(format!("detectors: duplicate id {:?}", w[0]));
        }
        for d in &self.detectors {
            if let DetectorConfig::Window { model: None, train, .. } = d {
                if train.is_empty() {
                    return bad(format!("detectors.{}: needs `model` or `train`", d.id()));
                }
            }
            if let DetectorConfig::Window { model: Some(m), .. } | DetectorConfig::Pattern { table: Some(m), .. } = d {
                if !m.is_file() {
                    return bad(format!("detectors.{}: {} does not exist", d.id(), m.display()));
                }
            }
        }
        if let CorpusSource::Synth { spec, .. } = &self.corpus {
            spec.validate().map_err(|e| PipelineError::Config(format!("corpus.spec: {e}")))?;
        }
        if let CorpusSource::Build { configs, .. } = &self.corpus {
            if let Some(c) = configs.iter().find(|c| builtin_config(c).is_none()) {
                return bad(format!("corpus.configs: unknown configuration {c:?}"));
            }
        }
        if let Some(s) = &self.search {
            if !ids.contains(&s.detector.as_str()) {
                return bad(format!("search.detector: no detector with id {:?}", s.detector));
            }
            if s.k == 0 || s.budget == 0 || s.seeds > s.budget {
                return bad("search: need k >= 1 and 1 <= seeds <= budget".into());
            }
        }
        if self.validate.is_some() && self.search.is_none() {
            return bad("validate: requires a search section".into());
        }
        Ok(())
    }

    /// Cumulative per-phase hashes; the output directory is excluded.
    pub fn phase_hashes(&self) -> BTreeMap<Phase, String> {
        let json = |v: &dyn erased::Json| v.json();
        let sections: [(Phase, String); 7] = [
            (Phase::Corpus, json(&(&self.corpus, self.rng_seed))),
            (Phase::Gt, String::new()),
            (Phase::Detect, json(&self.detectors)),
            (Phase::Score, json(&self.metrics)),
            (Phase::Analyze, json(&self.analysis)),
            (Phase::Search, json(&self.search)),
            (Phase::Validate, json(&self.validate)),
        ];
        let mut out = BTreeMap::new();
        let mut h = Sha256::new();
        for (phase, s) in sections {
            h.update(phase.as_str().as_bytes());
            h.update([0]);
            h.update(s.as_bytes());
            h.update([0]);
            out.insert(phase, hex::encode(&h.clone().finalize()[..8]));
        }
        out
    }
}

mod erased {
    pub trait Json {
        fn json(&self) -> String;
    }
    impl<T: serde::Serialize> Json for T {
        fn json(&self) -> String {
            serde_json::to_string(self).expect("config serializes")
        }
    }
}

/// What a run produced, for callers that want more than the files.
#[derive(Debug)]
pub struct PipelineOutcome {
    pub output_dir: PathBuf,
    /// Phases skipped because their stamp matched.
    pub resumed: Vec<Phase>,
    pub scores: Vec<ScoreRow>,
    pub search: Option<SearchSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSummary {
    pub baseline_f1: f64,
    pub best_payload: Vec<u8>,
    pub best_f1: f64,
    /// Candidates whose mean F1 drop meets `goal_drop`.
    pub meeting_goal: usize,
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
    hashes: BTreeMap<Phase, String>,
    resumed: Vec<Phase>,
}

fn fail(phase: Phase) -> impl Fn(&dyn std::fmt::Display) -> PipelineError {
    move |e| PipelineError::Phase {
        phase,
        message: e.to_string(),
    }
}

impl Run<'_> {
    fn comment(&self, phase: Phase) -> String {
        format!("config-hash: {}", self.hashes[&phase])
    }

    fn stamp_path(&self, phase: Phase) -> PathBuf {
        self.out.join(".stamps").join(phase.as_str())
    }

    fn is_done(&self, phase: Phase) -> bool {
        fs::read_to_string(self.stamp_path(phase)).is_ok_and(|s| s.trim() == self.hashes[&phase])
    }

    fn finish(&self, phase: Phase) -> Result<(), PipelineError> {
        let p = self.stamp_path(phase);
        let f = fail(phase);
        fs::create_dir_all(p.parent().unwrap()).map_err(|e| f(&e))?;
        fs::write(&p, format!("{}\n", self.hashes[&phase])).map_err(|e| f(&e))
    }

    fn write(&self, phase: Phase, rel: &str, text: &str) -> Result<(), PipelineError> {
        let p = self.out.join(rel);
        let f = fail(phase);
        fs::create_dir_all(p.parent().unwrap()).map_err(|e| f(&e))?;
        fs::write(p, text).map_err(|e| f(&e))
    }

    fn read(&self, phase: Phase, rel: &str) -> Result<String, PipelineError> {
        fs::read_to_string(self.out.join(rel)).map_err(|e| fail(phase)(&e))
    }

    /// Run `phase` unless its stamp matches; `resume` reloads the result.
    fn phase<T>(
        &mut self,
        phase: Phase,
        invalidate: &mut bool,
        run: impl FnOnce(&Self) -> Result<T, PipelineError>,
        resume: impl FnOnce(&Self) -> Result<T, PipelineError>,
    ) -> Result<T, PipelineError> {
        if !*invalidate && self.is_done(phase) {
            if let Ok(v) = resume(self) {
                self.resumed.push(phase);
                return Ok(v);
            }
        }
        *invalidate = true;
        let _ = fs::remove_file(self.stamp_path(phase));
        let v = run(self)?;
        self.finish(phase)?;
        Ok(v)
    }
}

/// Execute every configured phase in order.
pub fn run_pipeline(cfg: &PipelineConfig, output_dir: &Path) -> Result<PipelineOutcome, PipelineError> {
    cfg.validate()?;
    fs::create_dir_all(output_dir).map_err(|e| PipelineError::Config(format!("output_dir: {e}")))?;
    let mut run = Run {
        cfg,
        out: output_dir.to_path_buf(),
        hashes: cfg.phase_hashes(),
        resumed: Vec::new(),
    };
    let mut echo = cfg.clone();
    echo.output_dir = None;
    let echo = toml::to_string(&echo).map_err(|e| PipelineError::Config(e.to_string()))?;
    fs::write(output_dir.join("config.toml"), echo).map_err(|e| PipelineError::Config(format!("output_dir: {e}")))?;
    // Once a phase reruns, everything after it reruns too.
    let mut dirty = false;

    let corpus = run.phase(Phase::Corpus, &mut dirty, corpus_phase, load_corpus)?;
    let corpus = run.phase(Phase::Gt, &mut dirty, |r| gt_phase(r, &corpus), |r| load_gt(r, &corpus))?;
    let detectors = build_detectors(&run, &corpus, dirty)?;
    let detections = run.phase(
        Phase::Detect,
        &mut dirty,
        |r| detect_phase(r, &corpus, &detectors),
        |r| load_detections(r, &detectors),
    )?;
    let scores = run.phase(
        Phase::Score,
        &mut dirty,
        |r| score_phase(r, &corpus, &detections),
        |r| parse_scores_csv(&r.read(Phase::Score, "scores.csv")?).map_err(|e| fail(Phase::Score)(&e)),
    )?;
    let seeds = run.phase(
        Phase::Analyze,
        &mut dirty,
        |r| analyze_phase(r, &corpus, &detections),
        |r| load_seeds(r, &detectors),
    )?;

    let mut search_summary = None;
    let mut search_result = None;
    if let Some(scfg) = &cfg.search {
        let (_, det) = detectors.iter().find(|(c, _)| c.id() == scfg.detector).unwrap();
        let surface = AttackSurface::prepare(det.as_ref(), &corpus, scfg.hint, cfg.metrics.filter)
            .map_err(|e| fail(Phase::Search)(&e))?;
        let seed_list: Vec<Vec<u8>> = seeds
            .get(&scfg.detector)
            .map(|s| s.iter().filter(|p| p.len() == scfg.k).take(scfg.seeds).cloned().collect())
            .unwrap_or_default();
        let result = run.phase(
            Phase::Search,
            &mut dirty,
            |r| search_phase(r, det.as_ref(), &surface, scfg, seed_list.clone()),
            |_| Err(PipelineError::Config("search results are recomputed".into())),
        )?;
        search_summary = Some(SearchSummary {
            baseline_f1: result.baseline.mean_f1,
            best_payload: result.best().map(|c| c.eval.payload.clone()).unwrap_or_default(),
            best_f1: result.best().map_or(0.0, |c| c.eval.mean_f1),
            meeting_goal: result.candidates.iter().filter(|c| c.eval.f1_drop() >= scfg.goal_drop).count(),
        });
        if let Some(vcfg) = &cfg.validate {
            run.phase(
                Phase::Validate,
                &mut dirty,
                |r| validate_phase(r, det.as_ref(), &surface, scfg, vcfg, &result),
                |_| Ok(()),
            )?;
        }
        search_result = Some(result);
    }

    // The report is cheap and always regenerated from the phase outputs.
    let summaries = aggregate(&scores, &corpus.manifest, cfg.metrics.headline, true).map_err(|e| fail(Phase::Score)(&e))?;
    let report = emit_report(
        &scores,
        cfg.metrics.headline,
        &summaries,
        search_result.as_ref(),
        Some(&run.comment(if cfg.search.is_some() { Phase::Search } else { Phase::Score })),
    );
    run.write(Phase::Score, "report/scatter.csv", &report.scatter_csv)?;
    run.write(Phase::Score, "report/summary.csv", &report.summary_csv)?;

    Ok(PipelineOutcome {
        output_dir: run.out,
        resumed: run.resumed,
        scores,
        search: search_summary,
    })
}

fn corpus_phase(r: &Run) -> Result<LoadedCorpus, PipelineError> {
    let f = fail(Phase::Corpus);
    let dir = r.out.join("corpus");
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| f(&e))?;
    }
    let manifest = match &r.cfg.corpus {
        CorpusSource::Synth { spec, seed } => generate_synthetic_corpus(spec, seed.unwrap_or(r.cfg.rng_seed))
            .and_then(|c| c.write(&dir))
            .map_err(|e| f(&e))?,
        CorpusSource::Build {
            packages,
            toolchains,
            configs,
            opts,
            dataset,
        } => {
            let packages = packages
                .iter()
                .map(|p| Package::from_path(p))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| f(&e))?;
            let toolchains = toolchains
                .iter()
                .map(|t| Toolchain::resolve(&t.id, &t.command))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| f(&e))?;
            let configs: Vec<_> = configs.iter().filter_map(|c| builtin_config(c)).collect();
            let report = build_corpus(&packages, &toolchains, &configs, opts, &dir, dataset).map_err(|e| f(&e))?;
            let mut failures = String::from("package,toolchain,opt,config,message\n");
            for b in &report.failures {
                failures.push_str(&format!(
                    "{},{},{},{},{:?}\n",
                    b.package, b.toolchain, b.opt, b.config, b.message
                ));
            }
            r.write(Phase::Corpus, "corpus/failures.csv", &failures)?;
            report.manifest
        }
        CorpusSource::Import { dir: src } => {
            import_binkit(src).map_err(|e| f(&e))?
        }
    };
    let text = manifest.to_csv(Some(&r.comment(Phase::Corpus)));
    r.write(Phase::Corpus, "corpus/manifest.csv", &text)?;
    if let CorpusSource::Import { dir: src } = &r.cfg.corpus {
        // Imported binaries stay where they are.
        r.write(Phase::Corpus, "corpus/root.txt", &format!("{}\n", src.display()))?;
    }
    load_corpus(r)
}

fn load_corpus(r: &Run) -> Result<LoadedCorpus, PipelineError> {
    let f = fail(Phase::Corpus);
    let text = r.read(Phase::Corpus, "corpus/manifest.csv")?;
    let root = match fs::read_to_string(r.out.join("corpus/root.txt")) {
        Ok(s) => PathBuf::from(s.trim_end()),
        Err(_) => r.out.join("corpus"),
    };
    let m = CorpusManifest::parse(&text, root).map_err(|e| f(&e))?;
    LoadedCorpus::load(m).map_err(|e| f(&e))
}

fn gt_rel(entry_path: &Path) -> String {
    let name = entry_path.to_string_lossy().replace(['/', '\\'], "__");
    format!("gt/{}", labels_file_name(&name))
}

/// Ground truth from each binary's symbol table, replacing any sidecar.
fn gt_phase(r: &Run, corpus: &LoadedCorpus) -> Result<LoadedCorpus, PipelineError> {
    let f = fail(Phase::Gt);
    let mut out = corpus.clone();
    let mut index = format!("# {}\nbinary,functions,labels\n", r.comment(Phase::Gt));
    for b in &mut out.binaries {
        let (records, labels) = ground_truth_of(&b.image).map_err(|e| f(&format!("{}: {e}", b.id())))?;
        let rel = gt_rel(&b.entry.path);
        r.write(Phase::Gt, &rel, &labels.to_text())?;
        index.push_str(&format!("{},{},{}\n", b.id(), records.len(), rel));
        b.labels = labels;
    }
    r.write(Phase::Gt, "gt/index.csv", &index)?;
    Ok(out)
}

fn load_gt(r: &Run, corpus: &LoadedCorpus) -> Result<LoadedCorpus, PipelineError> {
    let mut out = corpus.clone();
    for b in &mut out.binaries {
        let text = r.read(Phase::Gt, &gt_rel(&b.entry.path))?;
        b.labels = LabelMap::parse_for(&text, &b.image).map_err(|e| fail(Phase::Gt)(&e))?;
    }
    Ok(out)
}

type DetectorSet<'a> = Vec<(&'a DetectorConfig, Box<dyn Detector>)>;

/// Instantiate detectors, training window models when needed. A trained
/// model is saved under `models/` and reused while the detect stamp holds.
fn build_detectors<'a>(r: &Run<'a>, _corpus: &LoadedCorpus, dirty: bool) -> Result<DetectorSet<'a>, PipelineError> {
    let f = fail(Phase::Detect);
    let reuse = !dirty && r.is_done(Phase::Detect);
    let mut out: DetectorSet = Vec::new();
    for d in &r.cfg.detectors {
        let det: Box<dyn Detector> = match d {
            DetectorConfig::Pattern { id, table, extents } => {
                let table = match table {
                    Some(p) => PatternTable::parse(&fs::read_to_string(p).map_err(|e| f(&e))?).map_err(|e| f(&e))?,
                    None => PatternTable::default(),
                };
                let mut det = PatternDetector::new(table, *extents);
                if let Some(id) = id {
                    det = det.with_id(id.clone());
                }
                Box::new(det)
            }
            DetectorConfig::Window {
                model,
                train,
                hyper,
                seed,
                threshold,
                ..
            } => {
                let saved = format!("models/{}.json", d.id());
                let m = match model {
                    Some(p) => WindowClassifierModel::from_json(&fs::read_to_string(p).map_err(|e| f(&e))?).map_err(|e| f(&e))?,
                    None => {
                        let cached = reuse
                            .then(|| r.read(Phase::Detect, &saved).ok())
                            .flatten()
                            .and_then(|t| WindowClassifierModel::from_json(&t).ok());
                        match cached {
                            Some(m) => m,
                            None => {
                                let parts = train
                                    .iter()
                                    .map(|t| generate_synthetic_corpus(&t.spec, t.seed).map(|c| c.to_loaded()))
                                    .collect::<Result<Vec<_>, _>>()
                                    .map_err(|e| f(&e))?;
                                let refs: Vec<&LoadedCorpus> = parts.iter().collect();
                                let m = crate::detectors::train_window_classifier(
                                    &LoadedCorpus::merged(&refs),
                                    hyper,
                                    seed.unwrap_or(r.cfg.rng_seed),
                                )
                                .map_err(|e| f(&e))?;
                                r.write(Phase::Detect, &saved, &m.to_json())?;
                                m
                            }
                        }
                    }
                };
                Box::new(WindowDetector::new(m, *threshold).with_id(d.id()))
            }
            DetectorConfig::External {
                id,
                program,
                args,
                timeout_secs,
            } => {
                let args: Vec<&str> = args.iter().map(String::as_str).collect();
                let mut det = ExternalDetector::new(id.clone(), program.clone()).with_args(&args);
                if let Some(t) = timeout_secs {
                    det = det.with_timeout(std::time::Duration::from_secs(*t));
                }
                Box::new(det)
            }
        };
        out.push((d, det));
    }
    Ok(out)
}

type Detections = BTreeMap<String, Vec<(String, Vec<Detection>)>>;

fn detect_phase(r: &Run, corpus: &LoadedCorpus, detectors: &DetectorSet) -> Result<Detections, PipelineError> {
    use rayon::prelude::*;
    let mut out = BTreeMap::new();
    for (cfg, det) in detectors {
        let rows = corpus
            .binaries
            .par_iter()
            .map(|b| {
                det.detect(&b.image)
                    .map(|d| (b.id().to_string(), d))
                    .map_err(|e| fail(Phase::Detect)(&format!("{} on {}: {e}", cfg.id(), b.id())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let view: Vec<(&str, &[Detection])> = rows.iter().map(|(b, d)| (b.as_str(), d.as_slice())).collect();
        r.write(
            Phase::Detect,
            &format!("detect/{}.csv", cfg.id()),
            &detections_csv(&view, Some(&r.comment(Phase::Detect))),
        )?;
        out.insert(cfg.id().to_string(), rows);
    }
    Ok(out)
}

fn load_detections(r: &Run, detectors: &DetectorSet) -> Result<Detections, PipelineError> {
    let mut out = BTreeMap::new();
    for (cfg, _) in detectors {
        let text = r.read(Phase::Detect, &format!("detect/{}.csv", cfg.id()))?;
        out.insert(
            cfg.id().to_string(),
            parse_detections_csv(&text).map_err(|e| fail(Phase::Detect)(&e))?,
        );
    }
    Ok(out)
}

fn detections_for<'d>(dets: &'d [(String, Vec<Detection>)], id: &str) -> &'d [Detection] {
    dets.iter().find(|(b, _)| b == id).map_or(&[], |(_, d)| d)
}

fn score_phase(r: &Run, corpus: &LoadedCorpus, detections: &Detections) -> Result<Vec<ScoreRow>, PipelineError> {
    let m = &r.cfg.metrics;
    let mut rows = Vec::new();
    for (det, dets) in detections {
        for b in &corpus.binaries {
            let c = confusion_with_tolerance(&b.labels, b.id(), detections_for(dets, b.id()), m.filter, m.tolerance)
                .map_err(|e| fail(Phase::Score)(&e))?;
            rows.extend(score_rows(&c, &b.entry.dataset, det));
        }
    }
    r.write(Phase::Score, "scores.csv", &scores_csv(&rows, Some(&r.comment(Phase::Score))))?;
    Ok(rows)
}

fn misclass_csv(records: &[MisclassRecord], comment: &str) -> String {
    let mut out = format!("# {comment}\nbinary,address,kind,context_hex,truncated\n");
    for m in records {
        out.push_str(&format!(
            "{},{:#x},{},{},{}\n",
            m.binary_id,
            m.address,
            m.kind,
            hex::encode(&m.context),
            m.truncated
        ));
    }
    out
}

type Seeds = BTreeMap<String, Vec<Vec<u8>>>;

fn analyze_phase(r: &Run, corpus: &LoadedCorpus, detections: &Detections) -> Result<Seeds, PipelineError> {
    let a = &r.cfg.analysis;
    let f = fail(Phase::Analyze);
    let mut out = BTreeMap::new();
    for (det, dets) in detections {
        let mut records = Vec::new();
        for b in &corpus.binaries {
            records.extend(
                collect_misclassifications(&b.labels, b.id(), detections_for(dets, b.id()), &b.image, a.radius, det)
                    .map_err(|e| f(&e))?,
            );
        }
        let seeds = rank_heavy_hitters(&records, a.k, a.anchor).map_err(|e| f(&e))?;
        let comment = r.comment(Phase::Analyze);
        r.write(Phase::Analyze, &format!("analysis/{det}_misclass.csv"), &misclass_csv(&records, &comment))?;
        r.write(Phase::Analyze, &format!("analysis/{det}_seeds.csv"), &seeds_csv(&seeds, Some(&comment)))?;
        out.insert(det.clone(), seeds.into_iter().map(|s| s.pattern).collect());
    }
    Ok(out)
}

fn load_seeds(r: &Run, detectors: &DetectorSet) -> Result<Seeds, PipelineError> {
    let mut out = BTreeMap::new();
    for (cfg, _) in detectors {
        let text = r.read(Phase::Analyze, &format!("analysis/{}_seeds.csv", cfg.id()))?;
        let seeds = parse_seeds_csv(&text).map_err(|e| fail(Phase::Analyze)(&e))?;
        out.insert(cfg.id().to_string(), seeds.into_iter().map(|s| s.pattern).collect());
    }
    Ok(out)
}

fn search_phase(
    r: &Run,
    det: &dyn Detector,
    surface: &AttackSurface,
    s: &SearchPhaseConfig,
    seeds: Vec<Vec<u8>>,
) -> Result<SearchResult, PipelineError> {
    let mut cfg = SearchConfig::new(s.k, s.budget, s.mode, s.rng_seed.unwrap_or(r.cfg.rng_seed)).with_seeds(seeds);
    cfg.objective = s.objective;
    cfg.target_kind = s.target_kind;
    cfg.valid_only = s.valid_only;
    let result = attack_search(det, surface, &cfg).map_err(|e| fail(Phase::Search)(&e))?;
    let comment = r.comment(Phase::Search);
    r.write(Phase::Search, "search/log.csv", &search_log_csv(&result, Some(&comment)))?;
    let mut ranking = format!(
        "# {comment}\n# baseline mean_f1 {:.6}\nrank,candidate_idx,origin,payload_hex,objective\n",
        result.baseline.mean_f1
    );
    for (i, c) in result.ranked().enumerate() {
        ranking.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            i + 1,
            c.index,
            serde_json::to_string(&c.origin).unwrap().trim_matches('"'),
            hex::encode(&c.eval.payload),
            cfg.objective.value(&c.eval)
        ));
    }
    r.write(Phase::Search, "search/ranking.csv", &ranking)?;
    let mut deltas = format!("# {comment}\ncandidate_idx,binary,injected_pads,f1,delta_f1\n");
    for c in &result.candidates {
        for b in &c.eval.per_binary {
            deltas.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                c.index, b.binary, b.injected_pads, b.f1, b.delta_f1
            ));
        }
    }
    r.write(Phase::Search, "search/deltas.csv", &deltas)?;
    Ok(result)
}

fn validate_phase(
    r: &Run,
    det: &dyn Detector,
    surface: &AttackSurface,
    s: &SearchPhaseConfig,
    v: &ValidateConfig,
    result: &SearchResult,
) -> Result<(), PipelineError> {
    let f = fail(Phase::Validate);
    let payloads: Vec<Vec<u8>> = result.ranked().take(v.payloads).map(|c| c.eval.payload.clone()).collect();
    let mut targets = Vec::new();
    for b in &surface.binaries {
        let with_pad = b.binary.labels.functions().filter(|&(_, e)| {
            b.pads
                .iter()
                .any(|p| p.address == e + 1 && payloads.iter().all(|x| p.usable(s.mode, x.len())))
        });
        targets.extend(with_pad.take(v.functions_per_binary).map(|(start, _)| Target {
            binary: b.binary.id().to_string(),
            function: start,
        }));
    }
    let report = validate_attack(det, surface, &payloads, &targets, s.mode, s.target_kind).map_err(|e| f(&e))?;
    let comment = r.comment(Phase::Validate);
    let mut text = format!("# {comment}\nbinary,function,pad,payload_hex,confirmed\n");
    for o in &report.outcomes {
        text.push_str(&format!(
            "{},{:#x},{:#x},{},{}\n",
            o.target.binary,
            o.target.function,
            o.pad,
            hex::encode(&o.payload),
            o.confirmed
        ));
    }
    r.write(Phase::Validate, "validate/outcomes.csv", &text)?;
    let mut rec = format!("# {comment}\nbinary,payload_hex,recovered,total,summary\n");
    for p in &payloads {
        for x in recovery(det, surface, p, s.mode).map_err(|e| f(&e))? {
            rec.push_str(&format!("{},{},{},{},{}\n", x.binary, hex::encode(p), x.recovered, x.total, x));
        }
    }
    r.write(Phase::Validate, "validate/recovery.csv", &rec)?;
    Ok(())
}
