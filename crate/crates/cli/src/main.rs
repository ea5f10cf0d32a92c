use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rgrounding::checkpoint::{self, sha256_hex, write_atomic, CheckpointError};
use rgrounding::config::{RunConfig, Split};
use rgrounding::corpus::{read_features, read_queries, synth_corpus, write_features, write_queries, FeatureSequence, QuerySpec};
use rgrounding::decoder::Vocab;
use rgrounding::gradsuite::run_suite;
use rgrounding::numkernel::gradcheck::{DEFAULT_STEP, DEFAULT_TOLERANCE};
use rgrounding::pipeline::{self, PredictionLine, SegmentLine};
use rgrounding::recursion::{infer, Grounder, OracleGrounder, Variant};
use rgrounding::trainer::{self, Model, Stage, TrainData, TrainError, TrainReport};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

#[derive(Parser)]
#[command(name = "rground", version, about = "Recursive coarse-to-fine temporal grounding on synthetic feature corpora")]
struct Cli {
    /// Run configuration (TOML). Built-in toy settings when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel sections; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
            SplitArg::All => Split::All,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Default,
    Unified,
    Inverse,
    UnifiedInverse,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Default => Variant::Default,
            VariantArg::Unified => Variant::Unified,
            VariantArg::Inverse => Variant::Inverse,
            VariantArg::UnifiedInverse => Variant::UnifiedInverse,
        }
    }
}

#[derive(clap::Args)]
struct ModelArgs {
    /// Answer from the planted ground truth instead of a checkpoint.
    #[arg(long)]
    oracle: bool,
    /// Checkpoint directory; defaults to the one the variant needs.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Hierarchy depth; 0 is the flat single-prompt baseline.
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus into the data directory.
    Gen,
    /// Run one training stage from the previous stage's checkpoint.
    Train {
        #[arg(long)]
        stage: Stage,
    },
    /// Ground every query of a split and write line-delimited predictions.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predictions file: recall table and calibration reports.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank the split's videos for each of its queries.
    Retrieve {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op and the full model loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        configs: usize,
    },
    /// Print the decoder-call trace of one query as JSON.
    Trace {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        query: String,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    err: anyhow::Error,
}

type Res<T> = Result<T, Failure>;

trait Classify<T> {
    fn code(self, code: u8) -> Res<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn code(self, code: u8) -> Res<T> {
        self.map_err(|e| Failure { code, err: e.into() })
    }
}

fn fail<T>(code: u8, msg: String) -> Res<T> {
    Err(Failure { code, err: anyhow!(msg) })
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::DivergenceDetected { .. } => EXIT_DIVERGENCE,
        TrainError::Corpus(_) | TrainError::NoData(_) => EXIT_DATA,
        TrainError::BadPlan(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

fn checkpoint_code(e: &CheckpointError) -> u8 {
    match e {
        CheckpointError::ConfigMismatch { .. } => EXIT_CONFIG,
        _ => EXIT_DATA,
    }
}

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_hash: String,
    seed: u64,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

fn digest(path: &Path) -> Res<FileDigest> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display())).code(EXIT_DATA)?;
    Ok(FileDigest { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
}

fn write_manifest(cfg: &RunConfig, dir: &Path, command: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> Res<()> {
    let m = RunManifest {
        command: command.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        inputs: inputs.iter().map(|p| digest(p)).collect::<Res<_>>()?,
        outputs: outputs.iter().map(|p| digest(p)).collect::<Res<_>>()?,
    };
    fs::create_dir_all(dir).code(EXIT_DATA)?;
    let text = serde_json::to_string_pretty(&m).code(EXIT_FAILURE)?;
    write_atomic(&dir.join(format!("{command}.manifest.json")), text.as_bytes()).code(EXIT_DATA)
}

fn write_out(path: &Path, bytes: &[u8]) -> Res<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).code(EXIT_DATA)?;
    }
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display())).code(EXIT_DATA)
}

fn queries_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data_dir.join("queries.rvqf")
}

fn videos_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data_dir.join("videos")
}

fn stage_dir(cfg: &RunConfig, stage: Stage) -> PathBuf {
    cfg.paths.out_dir.join("checkpoints").join(stage.name())
}

fn video_files(cfg: &RunConfig) -> Res<Vec<PathBuf>> {
    let dir = videos_dir(cfg);
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("no corpus at {}; run `gen` first", dir.display()))
        .code(EXIT_DATA)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "rvff"))
        .collect();
    files.sort();
    Ok(files)
}

fn load_corpus(cfg: &RunConfig) -> Res<(Vec<FeatureSequence>, Vec<QuerySpec>)> {
    let videos = video_files(cfg)?
        .iter()
        .map(|p| read_features(p).with_context(|| format!("reading {}", p.display())).code(EXIT_DATA))
        .collect::<Res<Vec<_>>>()?;
    let (queries, dim) = read_queries(&queries_path(cfg)).context("reading queries").code(EXIT_DATA)?;
    if let Some(v) = videos.iter().find(|v| v.dim() != cfg.adapter.dim) {
        return fail(EXIT_DATA, format!("video {} has dimension {}, config expects {}", v.video_id, v.dim(), cfg.adapter.dim));
    }
    if !queries.is_empty() && dim != cfg.adapter.dim {
        return fail(EXIT_DATA, format!("queries have dimension {dim}, config expects {}", cfg.adapter.dim));
    }
    Ok((videos, queries))
}

fn cmd_gen(cfg: &RunConfig) -> Res<()> {
    let (videos, queries) = synth_corpus(&cfg.synth_seeded()).code(EXIT_CONFIG)?;
    let dir = videos_dir(cfg);
    fs::create_dir_all(&dir).code(EXIT_DATA)?;
    let mut outputs = Vec::new();
    for v in &videos {
        let p = dir.join(format!("{}.rvff", v.video_id));
        write_features(v, &p).code(EXIT_DATA)?;
        outputs.push(p);
    }
    let qp = queries_path(cfg);
    write_queries(&queries, cfg.synth.dim, &qp).code(EXIT_DATA)?;
    outputs.push(qp);
    write_manifest(cfg, &cfg.paths.data_dir, "gen", &[], &outputs)?;
    log::info!("wrote {} videos and {} queries to {}", videos.len(), queries.len(), cfg.paths.data_dir.display());
    Ok(())
}

fn prior_stage(stage: Stage) -> Option<Stage> {
    match stage {
        Stage::S1Dense => None,
        Stage::S1Adapter => Some(Stage::S1Dense),
        Stage::S2Long | Stage::Unified => Some(Stage::S1Adapter),
    }
}

fn load_model(cfg: &RunConfig, dir: &Path) -> Res<(Model, Vec<String>)> {
    let (store, m) = checkpoint::load(dir).map_err(|e| Failure { code: checkpoint_code(&e), err: e.into() })?;
    m.require_config(&cfg.hash()).map_err(|e| Failure { code: checkpoint_code(&e), err: e.into() })?;
    let model = Model::from_store(store, cfg.adapter.clone(), cfg.decoder.clone()).map_err(|e| Failure { code: train_code(&e), err: e.into() })?;
    Ok((model, m.stages))
}

fn cmd_train(cfg: &RunConfig, stage: Stage) -> Res<()> {
    let (videos, queries) = load_corpus(cfg)?;
    let (tv, tq) = cfg.split(&videos, &queries, Split::Train);
    let data = TrainData { videos: &tv, queries: &tq, window: cfg.window };
    let (mut model, mut stages, inputs) = match prior_stage(stage) {
        None => {
            let m = Model::init(cfg.adapter.clone(), cfg.decoder.clone(), cfg.seed).map_err(|e| Failure { code: train_code(&e), err: e.into() })?;
            (m, Vec::new(), Vec::new())
        }
        Some(prior) => {
            let dir = stage_dir(cfg, prior);
            if !dir.join(checkpoint::MANIFEST_FILE).exists() {
                return fail(EXIT_CONFIG, format!("MissingPriorStage: {} needs a {} checkpoint at {}", stage.name(), prior.name(), dir.display()));
            }
            let (m, s) = load_model(cfg, &dir)?;
            (m, s, vec![dir.join(checkpoint::PAYLOAD_FILE)])
        }
    };
    let plan = cfg.plan(stage);
    let started = std::time::Instant::now();
    let report: TrainReport = match stage {
        Stage::S1Dense => trainer::train_stage1_dense(&mut model, &plan, &data),
        Stage::S1Adapter => trainer::train_stage1_adapter(&mut model, &plan, &data),
        Stage::S2Long => trainer::train_stage2_long(&mut model, &plan, &data),
        Stage::Unified => trainer::train_unified_alternating(&mut model, &plan, &data, true),
    }
    .map_err(|e| Failure { code: train_code(&e), err: e.into() })?;
    log::info!("{} finished {} steps in {:.1?}", stage.name(), report.records.len(), started.elapsed());
    stages.push(stage.name().to_string());
    let dir = stage_dir(cfg, stage);
    checkpoint::save(&model.store, &dir, &stages, cfg.seed, &cfg.hash()).code(EXIT_DATA)?;
    let loss = dir.join("loss.csv");
    write_out(&loss, report.to_csv().as_bytes())?;
    let mut inputs = inputs;
    inputs.push(queries_path(cfg));
    write_manifest(cfg, &dir, "train", &inputs, &[dir.join(checkpoint::PAYLOAD_FILE), dir.join(checkpoint::MANIFEST_FILE), loss])
}

/// Grounder selection shared by infer, retrieve and trace.
struct Setup {
    cfg: RunConfig,
    model: Option<Model>,
    inputs: Vec<PathBuf>,
}

fn setup(base: &RunConfig, args: &ModelArgs) -> Res<Setup> {
    let mut cfg = base.clone();
    if let Some(v) = args.variant {
        cfg.hierarchy.variant = v.into();
    }
    if let Some(l) = args.levels {
        cfg.hierarchy.levels = l;
    }
    cfg.hierarchy.validate().code(EXIT_CONFIG)?;
    if args.oracle {
        return Ok(Setup { cfg, model: None, inputs: Vec::new() });
    }
    let dir = args.checkpoint.clone().unwrap_or_else(|| {
        let stage = match cfg.hierarchy.variant {
            Variant::Unified | Variant::UnifiedInverse => Stage::Unified,
            _ => Stage::S2Long,
        };
        stage_dir(base, stage)
    });
    let (model, _) = load_model(base, &dir)?;
    Ok(Setup { cfg, model: Some(model), inputs: vec![dir.join(checkpoint::PAYLOAD_FILE)] })
}

fn with_grounder<T>(s: &Setup, f: impl FnOnce(&dyn GrounderRun) -> Res<T>) -> Res<T> {
    match &s.model {
        Some(m) => f(&Run(m.grounder())),
        None => f(&Run(OracleGrounder::new(Vocab::new(s.cfg.decoder.int_tokens)))),
    }
}

/// Object-safe front for the generic pipeline entry points.
trait GrounderRun {
    fn infer_all(&self, cfg: &RunConfig, v: &[FeatureSequence], q: &[QuerySpec]) -> Res<Vec<pipeline::QueryOutcome>>;
    fn retrieve_all(&self, cfg: &RunConfig, v: &[FeatureSequence], q: &[QuerySpec]) -> Res<Vec<pipeline::RankingLine>>;
    fn trace(&self, cfg: &RunConfig, v: &FeatureSequence, q: &QuerySpec) -> Res<rgrounding::recursion::RunTrace>;
}

struct Run<G>(G);

impl<G: Grounder> GrounderRun for Run<G> {
    fn infer_all(&self, cfg: &RunConfig, v: &[FeatureSequence], q: &[QuerySpec]) -> Res<Vec<pipeline::QueryOutcome>> {
        pipeline::infer_all(&self.0, v, q, &cfg.window, &cfg.hierarchy).code(EXIT_DATA)
    }

    fn retrieve_all(&self, cfg: &RunConfig, v: &[FeatureSequence], q: &[QuerySpec]) -> Res<Vec<pipeline::RankingLine>> {
        let set = cfg.hierarchy.variant.upper_set();
        pipeline::retrieve_all(&self.0, v, q, cfg.retrieval.frames_per_video, cfg.retrieval.group, set).code(EXIT_DATA)
    }

    fn trace(&self, cfg: &RunConfig, v: &FeatureSequence, q: &QuerySpec) -> Res<rgrounding::recursion::RunTrace> {
        Ok(infer(&self.0, v, q, &cfg.window, &cfg.hierarchy).code(EXIT_DATA)?.trace)
    }
}

/// Bottom-level decodes are written next to the predictions.
fn segments_path(predictions: &Path) -> PathBuf {
    predictions.with_extension("segments.jsonl")
}

#[derive(Serialize)]
struct FramesSummary {
    queries: usize,
    mean_fraction: f64,
    per_query: Vec<(String, f64)>,
}

fn cmd_infer(base: &RunConfig, args: &ModelArgs, out: &Path) -> Res<()> {
    let s = setup(base, args)?;
    let (videos, queries) = load_corpus(&s.cfg)?;
    let (vs, qs) = s.cfg.split(&videos, &queries, args.split.into());
    let outcomes = with_grounder(&s, |g| g.infer_all(&s.cfg, &vs, &qs))?;
    let lines: Vec<PredictionLine> = outcomes.iter().flat_map(|o| o.lines.iter().cloned()).collect();
    let segs: Vec<SegmentLine> = outcomes.iter().flat_map(|o| o.segments.iter().cloned()).collect();
    write_out(out, pipeline::to_jsonl(&lines).as_bytes())?;
    let seg_path = segments_path(out);
    write_out(&seg_path, pipeline::to_jsonl(&segs).as_bytes())?;
    let per_query: Vec<(String, f64)> = outcomes.iter().map(|o| (o.query_id.clone(), o.frames_fraction)).collect();
    let mean = if per_query.is_empty() { 0.0 } else { per_query.iter().map(|p| p.1).sum::<f64>() / per_query.len() as f64 };
    let frames = out.with_extension("frames.json");
    let summary = FramesSummary { queries: per_query.len(), mean_fraction: mean, per_query };
    write_out(&frames, serde_json::to_string_pretty(&summary).code(EXIT_FAILURE)?.as_bytes())?;
    println!("{} queries, {} predictions, mean frames fraction {mean:.4}", summary.queries, lines.len());
    let mut inputs = s.inputs.clone();
    inputs.push(queries_path(&s.cfg));
    write_manifest(&s.cfg, out.parent().unwrap_or(Path::new(".")), "infer", &inputs, &[out.to_path_buf(), seg_path, frames])
}

fn cmd_eval(cfg: &RunConfig, predictions: &Path, split: SplitArg, out: &Path) -> Res<()> {
    let text = fs::read_to_string(predictions).with_context(|| format!("reading {}", predictions.display())).code(EXIT_DATA)?;
    let lines: Vec<PredictionLine> = pipeline::from_jsonl(&text).code(EXIT_DATA)?;
    let seg_path = segments_path(predictions);
    let segs: Option<Vec<SegmentLine>> = if seg_path.exists() {
        let t = fs::read_to_string(&seg_path).code(EXIT_DATA)?;
        Some(pipeline::from_jsonl(&t).code(EXIT_DATA)?)
    } else {
        log::warn!("no {}; calibration skipped", seg_path.display());
        None
    };
    let (videos, queries) = load_corpus(cfg)?;
    let (_, qs) = cfg.split(&videos, &queries, split.into());
    if let Some(l) = lines.iter().find(|l| !qs.iter().any(|q| q.query_id == l.query_id)) {
        return fail(EXIT_DATA, format!("SchemaError: prediction for unknown query {}", l.query_id));
    }
    let name = predictions.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let (result, reports) = pipeline::evaluate(&name, &lines, segs.as_deref(), &qs, &cfg.eval).code(EXIT_DATA)?;
    fs::create_dir_all(out).code(EXIT_DATA)?;
    let metrics = out.join("metrics.csv");
    let csv = rgrounding::metrics::report_csv(std::slice::from_ref(&result)).code(EXIT_FAILURE)?;
    write_out(&metrics, csv.as_bytes())?;
    let mut outputs = vec![metrics];
    for r in &reports {
        let p = out.join(format!("calibration_tau{}.csv", r.iou_threshold.unwrap_or_default()));
        write_out(&p, r.to_csv().as_bytes())?;
        outputs.push(p);
    }
    for (k, v) in &result.metrics {
        println!("{k}\t{v:.4}");
    }
    let mut inputs = vec![predictions.to_path_buf(), queries_path(cfg)];
    if segs.is_some() {
        inputs.push(seg_path);
    }
    write_manifest(cfg, out, "eval", &inputs, &outputs)
}

fn cmd_retrieve(base: &RunConfig, args: &ModelArgs, out: &Path) -> Res<()> {
    let s = setup(base, args)?;
    let (videos, queries) = load_corpus(&s.cfg)?;
    let (vs, qs) = s.cfg.split(&videos, &queries, args.split.into());
    let rankings = with_grounder(&s, |g| g.retrieve_all(&s.cfg, &vs, &qs))?;
    let mut text = String::new();
    for r in &rankings {
        text.push_str(&serde_json::to_string(r).code(EXIT_FAILURE)?);
        text.push('\n');
    }
    write_out(out, text.as_bytes())?;
    if !qs.is_empty() {
        for k in [1, 5] {
            println!("R@{k}\t{:.4}", pipeline::retrieval_recall_at(&rankings, &qs, k).code(EXIT_DATA)?);
        }
    }
    let mut inputs = s.inputs.clone();
    inputs.push(queries_path(&s.cfg));
    write_manifest(&s.cfg, out.parent().unwrap_or(Path::new(".")), "retrieve", &inputs, &[out.to_path_buf()])
}

fn cmd_gradcheck(cfg: &RunConfig, configs: usize) -> Res<()> {
    let cases = run_suite(configs, cfg.seed, DEFAULT_STEP).code(EXIT_FAILURE)?;
    let mut bad = 0;
    for c in &cases {
        let ok = c.max_rel_error <= DEFAULT_TOLERANCE;
        bad += usize::from(!ok);
        println!("{}\t{}\t{:.3e}\t{}\t{}", c.config, c.name, c.max_rel_error, c.worst, if ok { "ok" } else { "FAIL" });
    }
    if bad > 0 {
        return fail(EXIT_FAILURE, format!("{bad} of {} gradient checks exceed {DEFAULT_TOLERANCE:e}", cases.len()));
    }
    Ok(())
}

fn cmd_trace(base: &RunConfig, args: &ModelArgs, query: &str) -> Res<()> {
    let s = setup(base, args)?;
    let (videos, queries) = load_corpus(&s.cfg)?;
    let Some(q) = queries.iter().find(|q| q.query_id == query) else {
        return fail(EXIT_DATA, format!("unknown query {query}"));
    };
    let Some(v) = videos.iter().find(|v| v.video_id == q.video_id) else {
        return fail(EXIT_DATA, format!("query {query} refers to missing video {}", q.video_id));
    };
    let trace = with_grounder(&s, |g| g.trace(&s.cfg, v, q))?;
    println!("{}", serde_json::to_string_pretty(&trace).code(EXIT_FAILURE)?);
    Ok(())
}

fn run(cli: Cli) -> Res<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())).code(EXIT_CONFIG)?,
        None => RunConfig::toy(),
    };
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().code(EXIT_CONFIG)?;
    }
    match &cli.cmd {
        Cmd::Gen => cmd_gen(&cfg),
        Cmd::Train { stage } => cmd_train(&cfg, *stage),
        Cmd::Infer { model, out } => cmd_infer(&cfg, model, out),
        Cmd::Eval { predictions, split, out } => cmd_eval(&cfg, predictions, *split, out),
        Cmd::Retrieve { model, out } => cmd_retrieve(&cfg, model, out),
        Cmd::Gradcheck { configs } => cmd_gradcheck(&cfg, *configs),
        Cmd::Trace { model, query } => cmd_trace(&cfg, model, query),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
