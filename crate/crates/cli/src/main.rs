use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use fbsearch_core::analysis::{collect_misclassifications, parse_seeds_csv, rank_heavy_hitters, seeds_csv, Anchor};
use fbsearch_core::binary::ground_truth_of;
use fbsearch_core::corpus::{
    build_corpus, builtin_config, generate_synthetic_corpus, import_binkit, labels_file_name, LoadedCorpus, OptLevel, Package,
    SynthSpec, Toolchain,
};
use fbsearch_core::detectors::{
    detections_csv, parse_detections_csv, train_window_classifier, Detection, Detector, ExternalDetector, PatternDetector,
    PatternTable, WindowClassifierModel, WindowDetector, WindowHyper,
};
use fbsearch_core::metrics::{aggregate, confusion_with_tolerance, parse_scores_csv, score_rows, scores_csv, ClassFilter, ScoreClass};
use fbsearch_core::pipeline::{run_pipeline, PipelineConfig};
use fbsearch_core::report::emit_report;
use fbsearch_core::rewriter::{
    apply_injections, parse_plan_csv, plan_all, plan_csv, scan_pads, verify_injection, InjectionMode, InjectionPlan, PadHint,
    PlanRow,
};
use fbsearch_core::search::{attack_search, search_log_csv, AttackSurface, Objective, SearchConfig};

#[derive(Parser)]
#[command(name = "fbsearch", version, about = "Evaluate and attack function boundary detectors")]
struct Cli {
    /// Seed for every random choice; subcommands may override it.
    #[arg(long, global = true, default_value_t = 0)]
    rng: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    #[command(subcommand)]
    Corpus(CorpusCmd),
    #[command(subcommand)]
    Gt(GtCmd),
    /// Run one detector over a corpus.
    Detect(DetectArgs),
    /// Score detections against ground truth.
    Score(ScoreArgs),
    /// Collect misclassifications and rank heavy hitters.
    Analyze(AnalyzeArgs),
    #[command(subcommand)]
    Rewrite(RewriteCmd),
    #[command(subcommand)]
    Search(SearchCmd),
    /// Summary table and scatter data from a scores file.
    Report(ReportArgs),
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Compile packages across toolchains, configurations and opt levels.
    Build {
        #[arg(long = "package", required = true)]
        packages: Vec<PathBuf>,
        /// `ID=COMMAND`, e.g. `gcc=gcc`.
        #[arg(long = "toolchain", required = true)]
        toolchains: Vec<String>,
        #[arg(long = "config", default_value = "baseline")]
        configs: Vec<String>,
        #[arg(long = "opt", default_value = "O0")]
        opts: Vec<OptLevel>,
        #[arg(long, default_value = "Normal")]
        dataset: String,
    },
    /// Generate a labelled synthetic corpus.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Index an existing BinKit-style tree.
    ImportBinkit { dir: PathBuf },
}

#[derive(Subcommand)]
enum GtCmd {
    /// Ground truth from symbol tables.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Args)]
struct DetectorArgs {
    /// pattern, window or external.
    #[arg(long, default_value = "pattern")]
    detector: String,
    #[arg(long)]
    id: Option<String>,
    /// Pattern table file.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    no_extents: bool,
    /// Saved window model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Train a window model on this manifest instead (saved under models/).
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// External adapter program.
    #[arg(long)]
    program: Option<PathBuf>,
    #[arg(long = "arg")]
    args: Vec<String>,
    #[arg(long)]
    timeout_secs: Option<u64>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    det: DetectorArgs,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Detection CSVs, one per detector.
    #[arg(long = "detections", required = true)]
    detections: Vec<PathBuf>,
    #[arg(long, default_value = "both")]
    filter: ClassFilter,
    #[arg(long, default_value_t = 0)]
    tolerance: u64,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    detections: PathBuf,
    #[arg(long, default_value_t = 8)]
    radius: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value = "at_address")]
    anchor: Anchor,
}

#[derive(Subcommand)]
enum RewriteCmd {
    /// Write a plan filling every usable pad with one payload.
    Plan {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        payload: String,
        #[arg(long, default_value = "B")]
        mode: InjectionMode,
        #[arg(long, default_value = "auto")]
        hint: PadHint,
    },
    /// Apply a plan; mutated binaries land under `<out>/rewritten`.
    Inject {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, default_value = "auto")]
        hint: PadHint,
    },
    /// Check mutated binaries against the originals and the plan.
    Verify {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// Directory holding the mutated binaries (default `<out>/rewritten`).
        #[arg(long)]
        mutated: Option<PathBuf>,
        #[arg(long, default_value = "auto")]
        hint: PadHint,
    },
}

#[derive(Subcommand)]
enum SearchCmd {
    Run(SearchArgs),
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    det: DetectorArgs,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 256)]
    budget: usize,
    #[arg(long)]
    seed_file: Option<PathBuf>,
    /// Seeds taken from the seed file.
    #[arg(long, default_value_t = 8)]
    seeds: usize,
    #[arg(long, default_value = "B")]
    mode: InjectionMode,
    #[arg(long, default_value = "min_f1")]
    objective: Objective,
    #[arg(long)]
    valid_only: bool,
    #[arg(long, default_value = "auto")]
    hint: PadHint,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value = "all")]
    headline: ScoreClass,
    #[arg(long)]
    search_log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Run every configured phase, resuming where stamps allow.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

enum Failure {
    Config(String),
    Phase(String),
}

type Res<T = ()> = Result<T, Failure>;

fn config<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Config(e.to_string())
}

fn phase<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Phase(e.to_string())
}

fn read(p: &Path) -> Res<String> {
    fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))
}

fn write(p: &Path, text: impl AsRef<[u8]>) -> Res {
    if let Some(d) = p.parent() {
        fs::create_dir_all(d).map_err(phase)?;
    }
    fs::write(p, text).map_err(|e| Failure::Phase(format!("{}: {e}", p.display())))
}

fn open_corpus(manifest: &Path) -> Res<LoadedCorpus> {
    LoadedCorpus::open(manifest).map_err(config)
}

fn comment(cli: &Cli) -> String {
    format!("rng {}", cli.rng)
}

fn make_detector(cli: &Cli, a: &DetectorArgs) -> Res<Box<dyn Detector>> {
    match a.detector.as_str() {
        "pattern" => {
            let table = match &a.table {
                Some(p) => PatternTable::parse(&read(p)?).map_err(config)?,
                None => PatternTable::default(),
            };
            let d = PatternDetector::new(table, !a.no_extents);
            Ok(Box::new(match &a.id {
                Some(id) => d.with_id(id.clone()),
                None => d,
            }))
        }
        "window" => {
            let id = a.id.clone().unwrap_or_else(|| "window".into());
            let model = match (&a.model, &a.train) {
                (Some(p), _) => WindowClassifierModel::from_json(&read(p)?).map_err(config)?,
                (None, Some(m)) => {
                    let mut hyper = WindowHyper::default();
                    hyper.epochs = a.epochs.unwrap_or(hyper.epochs);
                    hyper.radius = a.radius.unwrap_or(hyper.radius);
                    let m = train_window_classifier(&open_corpus(m)?, &hyper, cli.rng).map_err(phase)?;
                    write(&cli.out.join("models").join(format!("{id}.json")), m.to_json())?;
                    m
                }
                (None, None) => return Err(Failure::Config("window detector needs --model or --train".into())),
            };
            Ok(Box::new(WindowDetector::new(model, a.threshold).with_id(id)))
        }
        "external" => {
            let program = a.program.clone().ok_or_else(|| Failure::Config("external detector needs --program".into()))?;
            let args: Vec<&str> = a.args.iter().map(String::as_str).collect();
            let mut d = ExternalDetector::new(a.id.clone().unwrap_or_else(|| "external".into()), program).with_args(&args);
            if let Some(t) = a.timeout_secs {
                d = d.with_timeout(std::time::Duration::from_secs(t));
            }
            Ok(Box::new(d))
        }
        other => Err(Failure::Config(format!("unknown detector {other:?}"))),
    }
}

fn corpus_cmd(cli: &Cli, c: &CorpusCmd) -> Res {
    let dir = cli.out.join("corpus");
    let manifest = match c {
        CorpusCmd::Synth { spec, seed } => {
            let spec = SynthSpec::from_toml(&read(spec)?).map_err(config)?;
            spec.validate().map_err(config)?;
            generate_synthetic_corpus(&spec, seed.unwrap_or(cli.rng))
                .and_then(|s| s.write(&dir))
                .map_err(phase)?
        }
        CorpusCmd::Build {
            packages,
            toolchains,
            configs,
            opts,
            dataset,
        } => {
            let packages = packages.iter().map(|p| Package::from_path(p)).collect::<Result<Vec<_>, _>>().map_err(config)?;
            let mut tcs = Vec::new();
            for t in toolchains {
                let (id, cmd) = t.split_once('=').unwrap_or((t, t));
                tcs.push(Toolchain::resolve(id, cmd).map_err(config)?);
            }
            let mut cfgs = Vec::new();
            for c in configs {
                cfgs.push(builtin_config(c).ok_or_else(|| Failure::Config(format!("unknown configuration {c:?}")))?);
            }
            let report = build_corpus(&packages, &tcs, &cfgs, opts, &dir, dataset).map_err(phase)?;
            for f in &report.failures {
                eprintln!("build failed: {} {} {} {}: {}", f.package, f.toolchain, f.opt, f.config, f.message);
            }
            report.manifest
        }
        CorpusCmd::ImportBinkit { dir: src } => {
            let m = import_binkit(src).map_err(config)?;
            let mut abs = m.clone();
            for e in &mut abs.entries {
                e.path = m.resolve(e);
            }
            abs
        }
    };
    write(&dir.join("manifest.csv"), manifest.to_csv(Some(&comment(cli))))?;
    println!("{} binaries, manifest {}", manifest.entries.len(), dir.join("manifest.csv").display());
    Ok(())
}

fn gt_cmd(cli: &Cli, manifest: &Path) -> Res {
    let corpus = open_corpus(manifest)?;
    let mut index = String::from("binary,functions,labels\n");
    for b in &corpus.binaries {
        let (records, labels) = ground_truth_of(&b.image).map_err(|e| Failure::Phase(format!("{}: {e}", b.id())))?;
        let name = labels_file_name(&b.id().replace(['/', '\\'], "__"));
        write(&cli.out.join("gt").join(&name), labels.to_text())?;
        index.push_str(&format!("{},{},{name}\n", b.id(), records.len()));
    }
    write(&cli.out.join("gt/index.csv"), index)
}

fn detect_all(det: &dyn Detector, corpus: &LoadedCorpus) -> Res<Vec<(String, Vec<Detection>)>> {
    corpus
        .binaries
        .par_iter()
        .map(|b| det.detect(&b.image).map(|d| (b.id().to_string(), d)).map_err(|e| Failure::Phase(format!("{}: {e}", b.id()))))
        .collect()
}

fn detect_cmd(cli: &Cli, a: &DetectArgs) -> Res {
    let corpus = open_corpus(&a.manifest)?;
    let det = make_detector(cli, &a.det)?;
    let rows = detect_all(det.as_ref(), &corpus)?;
    let view: Vec<(&str, &[Detection])> = rows.iter().map(|(b, d)| (b.as_str(), d.as_slice())).collect();
    let path = cli.out.join("detect").join(format!("{}.csv", det.id()));
    write(&path, detections_csv(&view, Some(&comment(cli))))?;
    println!("{}", path.display());
    Ok(())
}

fn detector_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn score_cmd(cli: &Cli, a: &ScoreArgs) -> Res {
    let corpus = open_corpus(&a.manifest)?;
    let mut rows = Vec::new();
    for p in &a.detections {
        let dets = parse_detections_csv(&read(p)?).map_err(config)?;
        let det = detector_of(p);
        for b in &corpus.binaries {
            let d = dets.iter().find(|(id, _)| id == b.id()).map_or(&[][..], |(_, d)| d);
            let c = confusion_with_tolerance(&b.labels, b.id(), d, a.filter, a.tolerance).map_err(phase)?;
            rows.extend(score_rows(&c, &b.entry.dataset, &det));
        }
    }
    write(&cli.out.join("scores.csv"), scores_csv(&rows, Some(&comment(cli))))?;
    let summaries = aggregate(&rows, &corpus.manifest, ScoreClass::All, true).map_err(phase)?;
    let r = emit_report(&rows, ScoreClass::All, &summaries, None, None);
    print!("{}", r.summary_csv);
    Ok(())
}

fn analyze_cmd(cli: &Cli, a: &AnalyzeArgs) -> Res {
    let corpus = open_corpus(&a.manifest)?;
    let dets = parse_detections_csv(&read(&a.detections)?).map_err(config)?;
    let det = detector_of(&a.detections);
    let mut records = Vec::new();
    for b in &corpus.binaries {
        let d = dets.iter().find(|(id, _)| id == b.id()).map_or(&[][..], |(_, d)| d);
        records.extend(collect_misclassifications(&b.labels, b.id(), d, &b.image, a.radius, &det).map_err(phase)?);
    }
    let seeds = rank_heavy_hitters(&records, a.k, a.anchor).map_err(config)?;
    let path = cli.out.join("analysis").join(format!("{det}_seeds.csv"));
    write(&path, seeds_csv(&seeds, Some(&comment(cli))))?;
    println!("{} misclassifications, {} patterns -> {}", records.len(), seeds.len(), path.display());
    Ok(())
}

fn plans_for(corpus: &LoadedCorpus, rows: &[PlanRow], hint: PadHint) -> Res<Vec<Vec<InjectionPlan>>> {
    let mut out = vec![Vec::new(); corpus.binaries.len()];
    for r in rows {
        let i = corpus
            .binaries
            .iter()
            .position(|b| b.id() == r.binary)
            .ok_or_else(|| Failure::Config(format!("plan names unknown binary {:?}", r.binary)))?;
        let b = &corpus.binaries[i];
        out[i].push(r.resolve(&scan_pads(&b.image, &b.labels, hint)).map_err(config)?);
    }
    Ok(out)
}

fn rewrite_cmd(cli: &Cli, c: &RewriteCmd) -> Res {
    match c {
        RewriteCmd::Plan {
            manifest,
            payload,
            mode,
            hint,
        } => {
            let payload = hex::decode(payload).map_err(config)?;
            let corpus = open_corpus(manifest)?;
            let mut rows = Vec::new();
            for b in &corpus.binaries {
                let pads = scan_pads(&b.image, &b.labels, *hint);
                rows.extend(plan_all(&pads, &payload, *mode).iter().map(|p| PlanRow::from_plan(b.id(), p)));
            }
            write(&cli.out.join("plan.csv"), plan_csv(&rows, Some(&comment(cli))))?;
            println!("{} injections planned", rows.len());
            Ok(())
        }
        RewriteCmd::Inject { manifest, plan, hint } => {
            let corpus = open_corpus(manifest)?;
            let rows = parse_plan_csv(&read(plan)?).map_err(config)?;
            let plans = plans_for(&corpus, &rows, *hint)?;
            for (b, p) in corpus.binaries.iter().zip(&plans) {
                let mutated = apply_injections(&b.image, p).map_err(phase)?;
                write(&cli.out.join("rewritten").join(&b.entry.path), mutated.data())?;
            }
            println!("{} injections applied", rows.len());
            Ok(())
        }
        RewriteCmd::Verify {
            manifest,
            plan,
            mutated,
            hint,
        } => {
            let corpus = open_corpus(manifest)?;
            let rows = parse_plan_csv(&read(plan)?).map_err(config)?;
            let plans = plans_for(&corpus, &rows, *hint)?;
            let root = mutated.clone().unwrap_or_else(|| cli.out.join("rewritten"));
            let mut failed = 0;
            for (b, p) in corpus.binaries.iter().zip(&plans) {
                let m = fbsearch_core::binary::load_image(&root.join(&b.entry.path), b.id()).map_err(config)?;
                let report = verify_injection(&b.image, &m, p);
                if !report.passed() {
                    failed += 1;
                    for v in &report.violations {
                        eprintln!("{}: {v:?}", b.id());
                    }
                }
            }
            if failed > 0 {
                return Err(Failure::Phase(format!("{failed} binaries failed verification")));
            }
            println!("verified {} binaries", corpus.binaries.len());
            Ok(())
        }
    }
}

fn search_cmd(cli: &Cli, a: &SearchArgs) -> Res {
    let corpus = open_corpus(&a.manifest)?;
    let det = make_detector(cli, &a.det)?;
    let seeds = match &a.seed_file {
        Some(p) => parse_seeds_csv(&read(p)?)
            .map_err(config)?
            .into_iter()
            .map(|s| s.pattern)
            .filter(|p| p.len() == a.k)
            .take(a.seeds.min(a.budget))
            .collect(),
        None => Vec::new(),
    };
    let mut cfg = SearchConfig::new(a.k, a.budget, a.mode, cli.rng).with_seeds(seeds);
    cfg.objective = a.objective;
    cfg.valid_only = a.valid_only;
    cfg.validate().map_err(config)?;
    let surface = AttackSurface::prepare(det.as_ref(), &corpus, a.hint, ClassFilter::Both).map_err(phase)?;
    let result = attack_search(det.as_ref(), &surface, &cfg).map_err(phase)?;
    write(&cli.out.join("search/log.csv"), search_log_csv(&result, Some(&comment(cli))))?;
    println!("baseline mean F1 {:.3}", result.baseline.mean_f1);
    for c in result.ranked().take(5) {
        println!("{} mean F1 {:.3} drop {:.3}", hex::encode(&c.eval.payload), c.eval.mean_f1, c.eval.f1_drop());
    }
    Ok(())
}

fn report_cmd(cli: &Cli, a: &ReportArgs) -> Res {
    let corpus = open_corpus(&a.manifest)?;
    let rows = parse_scores_csv(&read(&a.scores)?).map_err(config)?;
    let summaries = aggregate(&rows, &corpus.manifest, a.headline, true).map_err(phase)?;
    let r = emit_report(&rows, a.headline, &summaries, None, Some(&comment(cli)));
    write(&cli.out.join("report/summary.csv"), &r.summary_csv)?;
    write(&cli.out.join("report/scatter.csv"), &r.scatter_csv)?;
    if let Some(p) = &a.search_log {
        fs::copy(p, cli.out.join("report/search_log.csv")).map_err(phase)?;
    }
    print!("{}", r.summary_csv);
    Ok(())
}

fn pipeline_cmd(cli: &Cli, path: &Path) -> Res {
    let cfg = PipelineConfig::from_toml(&read(path)?).map_err(config)?;
    let out = cfg.output_dir.clone().unwrap_or_else(|| cli.out.clone());
    let outcome = run_pipeline(&cfg, &out).map_err(|e| match e.exit_code() {
        2 => Failure::Config(e.to_string()),
        _ => Failure::Phase(e.to_string()),
    })?;
    if !outcome.resumed.is_empty() {
        let names: Vec<&str> = outcome.resumed.iter().map(|p| p.as_str()).collect();
        println!("resumed: {}", names.join(", "));
    }
    if let Some(s) = &outcome.search {
        println!(
            "baseline mean F1 {:.3}; best {} at {:.3}; {} candidates meet the goal",
            s.baseline_f1,
            hex::encode(&s.best_payload),
            s.best_f1,
            s.meeting_goal
        );
    }
    println!("artifacts in {}", outcome.output_dir.display());
    Ok(())
}

fn run(cli: &Cli) -> Res {
    match &cli.command {
        Command::Corpus(c) => corpus_cmd(cli, c),
        Command::Gt(GtCmd::Extract { manifest }) => gt_cmd(cli, manifest),
        Command::Detect(a) => detect_cmd(cli, a),
        Command::Score(a) => score_cmd(cli, a),
        Command::Analyze(a) => analyze_cmd(cli, a),
        Command::Rewrite(c) => rewrite_cmd(cli, c),
        Command::Search(SearchCmd::Run(a)) => search_cmd(cli, a),
        Command::Report(a) => report_cmd(cli, a),
        Command::Pipeline(PipelineCmd::Run { config }) => pipeline_cmd(cli, config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --jobs: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Phase(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
