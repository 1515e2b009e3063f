//! Command-line front end. `main` only forwards to [`run`].

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::fixtures;
use crate::ingest::{
    build_splits, drop_reason, nms_per_image, DropReason, FilterConfig, IngestError, SplitConfig,
    DEFAULT_GALLERY_SIZES, DEFAULT_TEST_FRACTION,
};
use crate::loss::gradcheck::{check_kernel, Kernel, KernelReport, DEFAULT_TRIALS};
use crate::loss::{sa_loss, Grid, LossConfig, LossError};
use crate::mask::BinaryMask;
use crate::metrics::DEFAULT_MIN_MASK_PIXELS;
use crate::model::{AnnotationStore, BBox, Detection, ModelError, SplitManifest};
use crate::report::{to_canonical_json, RunManifest};
use crate::retrieval::{
    evaluate_predictions, read_predictions, run_protocol, write_predictions, DecisionPolicy, EmbeddingTable,
    RetrievalError,
};
use crate::toy::{train, trajectory_csv, write_params, ToyError, TrainConfig};

pub const OUT_DIR_ENV: &str = "REIDKIT_OUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "reidkit", version, about = "Person-search ReID losses, retrieval protocol and evaluation")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Output directory (default: $REIDKIT_OUT_DIR, else the current directory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detection post-processing.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Dataset partitioning.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Score a predictions file against a manifest.
    Eval(EvalArgs),
    /// Loss utilities.
    #[command(subcommand)]
    Loss(LossCmd),
    /// Train the toy adapters.
    TrainToy(TrainArgs),
    /// Rank galleries from an embedding table and score them.
    Retrieve(RetrieveArgs),
    /// Golden-file maintenance.
    #[command(subcommand)]
    Fixtures(FixturesCmd),
}

#[derive(Debug, Subcommand)]
pub enum PipelineCmd {
    /// Drop low-quality detections, then per-image NMS.
    Filter(FilterArgs),
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Detections JSON-Lines file.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = crate::ingest::DEFAULT_MIN_CONFIDENCE)]
    pub min_confidence: f64,
    #[arg(long, default_value_t = crate::ingest::DEFAULT_MIN_HEIGHT)]
    pub min_height: f64,
    #[arg(long, default_value_t = crate::ingest::DEFAULT_MIN_WIDTH)]
    pub min_width: f64,
    #[arg(long, default_value_t = crate::ingest::DEFAULT_NMS_IOU)]
    pub nms_iou: f64,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCmd {
    /// Build train/test identities, queries and galleries.
    Split(SplitArgs),
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Annotation store JSON-Lines file.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_GALLERY_SIZES.to_vec())]
    pub gallery_sizes: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_TEST_FRACTION)]
    pub test_fraction: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    /// Ground-truth annotation store.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Gallery configurations to score (default: all in the manifest).
    #[arg(long, value_delimiter = ',')]
    pub gallery: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum LossCmd {
    /// Compare analytic gradients with central differences.
    Check(CheckArgs),
    /// Evaluate the segmentation composite on a JSON instance.
    Sa(SaArgs),
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// `all` or one kernel name.
    #[arg(long, default_value = "all")]
    pub kernel: String,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    pub trials: usize,
}

#[derive(Debug, Args)]
pub struct SaArgs {
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Embedding table, binary or JSON-Lines.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Ground-truth annotation store.
    #[arg(long)]
    pub annotations: PathBuf,
    /// `threshold:<theta>` or `provider`.
    #[arg(long, default_value = "threshold:0.5")]
    pub policy: String,
    #[arg(long, value_delimiter = ',')]
    pub gallery: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum FixturesCmd {
    /// Rerun every fixture and diff against its expected outputs.
    Regenerate(RegenArgs),
}

#[derive(Debug, Args)]
pub struct RegenArgs {
    /// `all` or one fixture name.
    #[arg(long, default_value = "all")]
    pub name: String,
    /// Overwrite expected outputs instead of failing on a diff.
    #[arg(long)]
    pub accept: bool,
    #[arg(long, default_value = fixtures::DEFAULT_ROOT)]
    pub root: PathBuf,
}

/// Error carrying its exit code: 1 for domain failures, 2 for I/O and parsing.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn domain(message: impl Into<String>) -> Self {
        Self { code: EXIT_DOMAIN, message: message.into() }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Parse { .. } | ModelError::Io(_) => Self::input(e.to_string()),
            _ => Self::domain(e.to_string()),
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Model(m) => m.into(),
            e if e.is_input_error() => Self::input(e.to_string()),
            e => Self::domain(e.to_string()),
        }
    }
}

impl From<ToyError> for CliError {
    fn from(e: ToyError) -> Self {
        match e {
            ToyError::ConfigParse { .. } | ToyError::Io(_) | ToyError::Params(_) => Self::input(e.to_string()),
            e => Self::domain(e.to_string()),
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        Self::domain(e.to_string())
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        Self::domain(e.to_string())
    }
}

pub type CliResult = Result<(), CliError>;

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult {
    if cli.threads == 0 {
        return Err(CliError::domain("--threads must be >= 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::domain(format!("thread pool: {e}")))?;
    let out = out_dir(cli);
    pool.install(|| match &cli.command {
        Command::Pipeline(PipelineCmd::Filter(a)) => cmd_pipeline_filter(a, &out),
        Command::Dataset(DatasetCmd::Split(a)) => cmd_split(a, cli.seed.unwrap_or(0), &out),
        Command::Eval(a) => cmd_eval(a, &out),
        Command::Loss(LossCmd::Check(a)) => cmd_losscheck(a, cli.seed.unwrap_or(0), &out),
        Command::Loss(LossCmd::Sa(a)) => cmd_sa(a, &out),
        Command::TrainToy(a) => cmd_train_toy(a, cli.seed, &out),
        Command::Retrieve(a) => cmd_retrieve(a, &out),
        Command::Fixtures(FixturesCmd::Regenerate(a)) => fixtures::regenerate(&a.root, &a.name, a.accept),
    })
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    String::from_utf8(read(path)?).map_err(|_| CliError::input(format!("{}: not UTF-8", path.display())))
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn canonical<T: Serialize>(v: &T) -> Result<String, CliError> {
    to_canonical_json(v).map_err(|e| CliError::domain(format!("serialize: {e}")))
}

fn read_store(path: &Path) -> Result<(AnnotationStore, Vec<u8>), CliError> {
    let bytes = read(path)?;
    let store = AnnotationStore::read_jsonl(&bytes[..]).map_err(|e| CliError::from(e).in_file(path))?;
    Ok((store, bytes))
}

fn read_manifest(path: &Path) -> Result<(SplitManifest, Vec<u8>), CliError> {
    let bytes = read(path)?;
    let text = String::from_utf8_lossy(&bytes);
    let m = SplitManifest::from_json(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok((m, bytes))
}

impl CliError {
    fn in_file(self, path: &Path) -> Self {
        Self { message: format!("{}: {}", path.display(), self.message), ..self }
    }
}

#[derive(Serialize)]
struct FilterCounts {
    input: usize,
    kept: usize,
    dropped_confidence: usize,
    dropped_height: usize,
    dropped_width: usize,
    suppressed_nms: usize,
}

pub fn cmd_pipeline_filter(a: &FilterArgs, out: &Path) -> CliResult {
    let bytes = read(&a.input)?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| CliError::input("detections file is not UTF-8"))?;
    let mut dets = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(line)
            .map_err(|e| CliError::input(format!("{}: line {}: {e}", a.input.display(), i + 1)))?;
        BBox::new(d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h)
            .map_err(|e| CliError::input(format!("{}: line {}: {e}", a.input.display(), i + 1)))?;
        dets.push(d);
    }
    let cfg = FilterConfig { min_confidence: a.min_confidence, min_height: a.min_height, min_width: a.min_width, nms_iou: a.nms_iou };
    cfg.validate()?;
    let mut by_reason: BTreeMap<DropReason, usize> = BTreeMap::new();
    let mut passed = Vec::new();
    for d in dets.iter() {
        match drop_reason(d, &cfg) {
            Some(r) => *by_reason.entry(r).or_default() += 1,
            None => passed.push(d.clone()),
        }
    }
    let kept = nms_per_image(&passed, cfg.nms_iou);
    let counts = FilterCounts {
        input: dets.len(),
        kept: kept.len(),
        dropped_confidence: by_reason.get(&DropReason::Confidence).copied().unwrap_or(0),
        dropped_height: by_reason.get(&DropReason::Height).copied().unwrap_or(0),
        dropped_width: by_reason.get(&DropReason::Width).copied().unwrap_or(0),
        suppressed_nms: passed.len() - kept.len(),
    };
    let mut lines = String::new();
    for d in &kept {
        lines.push_str(&serde_json::to_string(d).expect("serializable"));
        lines.push('\n');
    }
    write(out, "filtered.jsonl", lines)?;
    let manifest = RunManifest::new("pipeline filter", None).with("filter", cfg).input("detections", &bytes);
    write(out, "filter_report.json", canonical(&json!({"counts": counts, "run_manifest": manifest}))?)?;
    println!(
        "kept {} of {}; dropped confidence {}, height {}, width {}; nms suppressed {}",
        counts.kept, counts.input, counts.dropped_confidence, counts.dropped_height, counts.dropped_width, counts.suppressed_nms
    );
    Ok(())
}

pub fn cmd_split(a: &SplitArgs, seed: u64, out: &Path) -> CliResult {
    let (store, bytes) = read_store(&a.annotations)?;
    let cfg = SplitConfig { gallery_sizes: a.gallery_sizes.clone(), seed, test_fraction: a.test_fraction };
    let m = build_splits(&store, &cfg)?;
    write(out, "manifest.json", m.to_json())?;
    let by_id = store.by_identity();
    let instances = |ids: &std::collections::BTreeSet<_>| ids.iter().map(|i| by_id.get(i).map_or(0, Vec::len)).sum::<usize>();
    let galleries: BTreeMap<&String, usize> = m.galleries.iter().map(|(k, v)| (k, v.len())).collect();
    let counts = json!({
        "train_identities": m.train_ids.len(),
        "train_instances": instances(&m.train_ids),
        "test_identities": m.test_ids.len(),
        "test_instances": instances(&m.test_ids),
        "queries": m.queries.len(),
        "galleries": galleries,
    });
    let manifest = RunManifest::new("dataset split", Some(seed))
        .with("gallery_sizes", &a.gallery_sizes)
        .with("test_fraction", a.test_fraction)
        .input("annotations", &bytes);
    write(out, "split_report.json", canonical(&json!({"counts": counts, "run_manifest": manifest}))?)?;
    println!(
        "train: {} identities, {} instances; test: {} identities, {} instances; {} queries",
        m.train_ids.len(),
        instances(&m.train_ids),
        m.test_ids.len(),
        instances(&m.test_ids),
        m.queries.len()
    );
    for (name, n) in galleries {
        println!("{name}: {n} galleries");
    }
    Ok(())
}

fn gallery_filter(g: &[String]) -> Option<&[String]> {
    if g.is_empty() {
        None
    } else {
        Some(g)
    }
}

fn print_reports(reports: &BTreeMap<String, crate::metrics::MetricsReport>) {
    for (name, r) in reports {
        println!(
            "{name}: mAP {:.6} top-1 {:.6} top-5 {:.6} top-10 {:.6} gIoU {:.6} cIoU {:.6}",
            r.map,
            r.top_k(1).unwrap_or(0.0),
            r.top_k(5).unwrap_or(0.0),
            r.top_k(10).unwrap_or(0.0),
            r.g_iou,
            r.c_iou
        );
    }
}

pub fn cmd_eval(a: &EvalArgs, out: &Path) -> CliResult {
    let (manifest, m_bytes) = read_manifest(&a.manifest)?;
    let p_bytes = read(&a.predictions)?;
    let preds = read_predictions(&p_bytes[..]).map_err(|e| CliError::from(e).in_file(&a.predictions))?;
    let (store, s_bytes) = read_store(&a.annotations)?;
    let reports = evaluate_predictions(&manifest, &preds, &store, gallery_filter(&a.gallery), DEFAULT_MIN_MASK_PIXELS)?;
    let run = RunManifest::new("eval", Some(manifest.seed))
        .with("galleries", reports.keys().collect::<Vec<_>>())
        .with("min_mask_pixels", DEFAULT_MIN_MASK_PIXELS)
        .input("manifest", &m_bytes)
        .input("predictions", &p_bytes)
        .input("annotations", &s_bytes);
    write(out, "metrics.json", canonical(&json!({"galleries": reports, "run_manifest": run}))?)?;
    print_reports(&reports);
    Ok(())
}

pub fn cmd_retrieve(a: &RetrieveArgs, out: &Path) -> CliResult {
    let policy: DecisionPolicy = a.policy.parse().map_err(|e: RetrievalError| CliError::domain(e.to_string()))?;
    let (manifest, m_bytes) = read_manifest(&a.manifest)?;
    let e_bytes = read(&a.embeddings)?;
    let table = EmbeddingTable::from_bytes(&e_bytes).map_err(|e| CliError::from(e).in_file(&a.embeddings))?;
    let (store, s_bytes) = read_store(&a.annotations)?;
    let result = run_protocol(&manifest, &table, policy, &store, gallery_filter(&a.gallery), DEFAULT_MIN_MASK_PIXELS)?;
    let mut buf = Vec::new();
    write_predictions(&mut buf, &result.predictions)?;
    write(out, "predictions.jsonl", buf)?;
    let run = RunManifest::new("retrieve", Some(manifest.seed))
        .with("policy", policy.to_string())
        .with("galleries", result.reports.keys().collect::<Vec<_>>())
        .with("min_mask_pixels", DEFAULT_MIN_MASK_PIXELS)
        .input("manifest", &m_bytes)
        .input("embeddings", &e_bytes)
        .input("annotations", &s_bytes);
    write(out, "metrics.json", canonical(&json!({"galleries": result.reports, "run_manifest": run}))?)?;
    print_reports(&result.reports);
    Ok(())
}

pub fn cmd_losscheck(a: &CheckArgs, seed: u64, out: &Path) -> CliResult {
    let kernels: Vec<Kernel> = if a.kernel == "all" {
        Kernel::ALL.to_vec()
    } else {
        vec![a.kernel.parse()?]
    };
    let reports: Vec<KernelReport> = kernels.iter().map(|&k| check_kernel(k, a.trials, seed)).collect::<Result<_, _>>()?;
    let run = RunManifest::new("loss check", Some(seed)).with("kernel", &a.kernel).with("trials", a.trials);
    write(out, "losscheck.json", canonical(&json!({"kernels": reports, "run_manifest": run}))?)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<18} trials {:>4}  max_rel_err {:.3e}  max_abs_err {:.3e}  {}",
            r.kernel,
            r.trials,
            r.max_rel_err,
            r.max_abs_err,
            if r.pass { "pass" } else { "FAIL" }
        );
        if let Some(w) = &r.warning {
            eprintln!("warning: {}: {w}", r.kernel);
        }
        if !r.pass {
            failed.push(match &r.worst {
                Some(w) => format!(
                    "{} (trial {}, coordinate {}: analytic {:e}, numeric {:e})",
                    r.kernel, w.trial, w.index, w.analytic, w.numeric
                ),
                None => r.kernel.clone(),
            });
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::domain(format!("gradient check failed: {}", failed.join("; "))))
    }
}

/// Input of `loss sa`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaInstance {
    /// Row-major logits over the target mask grid.
    pub logits: Vec<f64>,
    pub target_mask: BinaryMask,
    pub pred_box: BBox,
    pub target_box: BBox,
    #[serde(default)]
    pub config: LossConfig,
}

pub fn cmd_sa(a: &SaArgs, out: &Path) -> CliResult {
    let bytes = read(&a.input)?;
    let inst: SaInstance =
        serde_json::from_slice(&bytes).map_err(|e| CliError::input(format!("{}: {e}", a.input.display())))?;
    let grid = Grid::new(inst.target_mask.width() as usize, inst.target_mask.height() as usize, inst.logits)?;
    let r = sa_loss(&grid, &inst.target_mask, &inst.pred_box, &inst.target_box, &inst.config)?;
    let run = RunManifest::new("loss sa", None).with("config", inst.config).input("instance", &bytes);
    let body = json!({
        "value": r.value,
        "components": r.components,
        "grad_box": r.grad_box,
        "run_manifest": run,
    });
    write(out, "sa_loss.json", canonical(&body)?)?;
    println!(
        "sa_loss {:.6} (wbce {:.6}, dice {:.6}, smooth_l1 {:.6}, ciou {:.6})",
        r.value, r.components.wbce, r.components.dice, r.components.smooth_l1, r.components.ciou
    );
    Ok(())
}

pub fn cmd_train_toy(a: &TrainArgs, seed: Option<u64>, out: &Path) -> CliResult {
    let text = read_text(&a.config)?;
    let mut cfg = TrainConfig::parse(&text).map_err(|e| CliError::from(e).in_file(&a.config))?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.data.seed = s;
    }
    let o = train(&cfg)?;
    let mut params = Vec::new();
    write_params(&mut params, &[&o.phi_r, &o.phi_i])?;
    write(out, "params.bin", params)?;
    write(out, "trajectory.csv", trajectory_csv(&o.trajectory))?;
    let config: BTreeMap<String, Value> =
        cfg.to_map().into_iter().map(|(k, v)| (k.to_string(), Value::String(v))).collect();
    let mut run = RunManifest::new("train-toy", Some(cfg.seed)).input("config", text.as_bytes());
    run.config = config;
    let body = json!({
        "initial_loss": o.initial_loss,
        "final_loss": o.final_loss,
        "report": o.report,
        "baseline": o.baseline,
        "run_manifest": run,
    });
    write(out, "train_metrics.json", canonical(&body)?)?;
    println!(
        "loss {:.6} -> {:.6}; top-1 {:.6} mAP {:.6} (untrained top-1 {:.6} mAP {:.6})",
        o.initial_loss,
        o.final_loss,
        o.report.top_k(1).unwrap_or(0.0),
        o.report.map,
        o.baseline.top_k(1).unwrap_or(0.0),
        o.baseline.map
    );
    Ok(())
}
