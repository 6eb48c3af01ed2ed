//! Command-line front end.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 transport failure,
//! 130 cancelled by the operator.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convo::{
    build_conversation, build_mix, read_conversations, write_conversations, Conversation, ConvoError, MixConfig,
    NamePool, Naming,
};
use crate::evalengine::{
    aggregate, copy_gap, run, score_with, transport_failure, write_records, EvalError, EvalRecord, FailureClass,
    GroupKeys, OutputSpace, Report, RunMeta, RunOptions,
};
use crate::geometry::Space;
use crate::inference::{ChatClient, EndpointConfig, ImageDetail, InferenceError, Responder, SimModel};
use crate::ingest::{
    load_segmentation_benchmark, load_tao, load_track_file, read_manifest, save_manifest, split_category_set,
    DatasetManifest, IngestError, SegFormat, TrackFileConfig,
};
use crate::prompts::{PromptSet, PromptTemplate, TemplateId};
use crate::respparse::{parse_bbox_with, ParseTag, ParserConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("cancelled")]
    Aborted,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Transport(_) => 4,
            CliError::Aborted => 130,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

impl From<ConvoError> for CliError {
    fn from(e: ConvoError) -> Self {
        match e {
            ConvoError::InvalidMix(_) | ConvoError::EmptyPool | ConvoError::SampleTooSmall(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::InvalidRatio(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "locbench", version, about = "Few-shot object localization: data building and evaluation")]
pub struct Cli {
    /// TOML file with [build], [eval] and [score] tables; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a raw dataset into a canonical manifest.
    Ingest(IngestArgs),
    /// Build a conversation file from manifests.
    Build(BuildArgs),
    /// Query a model (or simulated model) and score the answers.
    Eval(EvalArgs),
    /// Score stored responses without querying a model.
    Score(ScoreArgs),
    /// Check a conversation file or manifest.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// lasot, got10k, tao, pdm or perseg.
    #[arg(long)]
    pub format: String,
    /// Dataset root (TAO: annotation JSON file).
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TAO only: prefix joined to annotation file names.
    #[arg(long, default_value = "")]
    pub image_prefix: String,
}

#[derive(Debug, Args, Default)]
pub struct BuildArgs {
    #[arg(long = "manifest")]
    pub manifests: Vec<PathBuf>,
    /// Shot range `lo:hi`, or a single count.
    #[arg(long)]
    pub shots: Option<String>,
    /// Fraction of conversations with pseudo names.
    #[arg(long)]
    pub pseudo: Option<f64>,
    /// Fraction of categories assigned to the training split.
    #[arg(long)]
    pub split_ratio: Option<f64>,
    /// Number of conversations (mix mode).
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Newline-separated pseudo-name list replacing the built-in one.
    #[arg(long)]
    pub names: Option<PathBuf>,
    /// Build evaluation conversations from test-split tracks instead of a
    /// training mix: one per track and shot count.
    #[arg(long)]
    pub eval_set: bool,
    /// Eval-set naming: real or pseudo.
    #[arg(long)]
    pub naming: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BuildFile {
    manifests: Option<Vec<PathBuf>>,
    shots: Option<String>,
    pseudo: Option<f64>,
    split_ratio: Option<f64>,
    count: Option<usize>,
    seed: Option<u64>,
    names: Option<PathBuf>,
    eval_set: Option<bool>,
    naming: Option<String>,
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct EvalArgs {
    #[arg(long)]
    pub conversations: Option<PathBuf>,
    /// Simulated model: oracle, copier:first, copier:last, random:SEED, offset:DX,DY.
    #[arg(long, conflicts_with = "endpoint")]
    pub sim: Option<String>,
    /// Base URL of a chat-completions endpoint.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Initial retry delay in seconds.
    #[arg(long)]
    pub backoff: Option<f64>,
    /// Image detail: auto or high.
    #[arg(long)]
    pub detail: Option<String>,
    #[arg(long)]
    pub template: Option<String>,
    /// Extra prompt templates (JSONL).
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Coordinate convention of model answers: per-mille or pixel.
    #[arg(long)]
    pub space: Option<String>,
    /// Only evaluate these shot counts, e.g. `1,2,4`.
    #[arg(long)]
    pub shots: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fixed timestamp for the report header.
    #[arg(long)]
    pub timestamp: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalFile {
    conversations: Option<PathBuf>,
    sim: Option<String>,
    endpoint: Option<String>,
    model: Option<String>,
    api_key_env: Option<String>,
    timeout: Option<f64>,
    max_retries: Option<u32>,
    backoff: Option<f64>,
    detail: Option<String>,
    template: Option<String>,
    prompts: Option<PathBuf>,
    parallelism: Option<usize>,
    space: Option<String>,
    shots: Option<String>,
    seed: Option<u64>,
    timestamp: Option<String>,
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct ScoreArgs {
    #[arg(long)]
    pub conversations: Option<PathBuf>,
    /// Stored responses: records.jsonl of an earlier run, or lines with
    /// `conv_id` and `raw_response`.
    #[arg(long)]
    pub responses: Option<PathBuf>,
    /// Check a labelled response corpus against its expected parse classes.
    #[arg(long, conflicts_with_all = ["conversations", "responses"])]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub space: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub template: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub timestamp: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreFile {
    conversations: Option<PathBuf>,
    responses: Option<PathBuf>,
    space: Option<String>,
    model: Option<String>,
    template: Option<String>,
    seed: Option<u64>,
    timestamp: Option<String>,
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub path: PathBuf,
    /// Manifests whose categories pseudo-named conversations must not mention.
    #[arg(long = "manifest")]
    pub manifests: Vec<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    build: BuildFile,
    #[serde(default)]
    eval: EvalFile,
    #[serde(default)]
    score: ScoreFile,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn required<T>(v: Option<T>, name: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Config(format!("--{name} is required")))
}

/// Parses argv, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("cannot start runtime: {e}");
            return 1;
        }
    };
    match rt.block_on(execute(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub async fn execute(cli: Cli) -> Result<(), CliError> {
    let file = load_file_config(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Build(a) => cmd_build(a, file.build),
        Command::Eval(a) => cmd_eval(a, file.eval).await,
        Command::Score(a) => cmd_score(a, file.score),
        Command::Validate(a) => cmd_validate(a),
    }
}

// ---------------------------------------------------------------------------
// ingest

fn sequence_dirs(root: &Path, depth: usize, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    if root.join("groundtruth.txt").is_file() {
        out.push(root.to_path_buf());
        return Ok(());
    }
    if depth == 0 {
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_at(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for e in entries {
        sequence_dirs(&e, depth - 1, out)?;
    }
    Ok(())
}

fn cmd_ingest(a: IngestArgs) -> Result<(), CliError> {
    let name = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let (manifest, clamped, absent) = match a.format.to_ascii_lowercase().as_str() {
        fmt @ ("lasot" | "got10k" | "got") => {
            let mut dirs = Vec::new();
            sequence_dirs(&a.root, 3, &mut dirs)?;
            let (mut tracks, mut clamped, mut absent) = (Vec::new(), 0, 0);
            for d in dirs {
                let cfg = if fmt == "lasot" { TrackFileConfig::lasot(&d)? } else { TrackFileConfig::got10k(&d)? };
                let (t, w) = load_track_file(&d.join("groundtruth.txt"), &cfg)?;
                clamped += w.clamped_boxes;
                absent += w.absent_frames;
                tracks.push(t);
            }
            (DatasetManifest::new(name, tracks), clamped, absent)
        }
        "tao" => {
            let (m, w) = load_tao(&a.root, &a.image_prefix)?;
            (DatasetManifest::new(name, m.tracks().to_vec()), w.clamped_boxes, w.absent_frames)
        }
        "pdm" => (load_segmentation_benchmark(&a.root, SegFormat::Pdm)?, 0, 0),
        "perseg" => (load_segmentation_benchmark(&a.root, SegFormat::Perseg)?, 0, 0),
        other => return Err(CliError::Config(format!("unknown dataset format {other:?}"))),
    };
    if manifest.tracks().is_empty() {
        return Err(CliError::Data(format!("no tracks found under {}", a.root.display())));
    }
    save_manifest(&manifest, &a.out)?;
    let s = manifest.stats();
    println!(
        "{}: {} records, {} categories, {:.2} objects/image ({} boxes clamped, {} absent frames skipped)",
        a.out.display(),
        s.record_count,
        s.category_count,
        s.mean_objects_per_image,
        clamped,
        absent
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// build

fn parse_shot_range(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Config(format!("bad shot range {s:?}, expected lo:hi"));
    let (lo, hi) = match s.split_once(':') {
        Some((lo, hi)) => (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?),
        None => {
            let n = s.trim().parse().map_err(|_| bad())?;
            (n, n)
        }
    };
    if lo == 0 || lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn parse_naming(s: &str) -> Result<Naming, CliError> {
    match s.to_ascii_lowercase().as_str() {
        "real" => Ok(Naming::Real),
        "pseudo" => Ok(Naming::Pseudo),
        _ => Err(CliError::Config(format!("naming must be real or pseudo, got {s:?}"))),
    }
}

#[derive(Debug, Serialize)]
struct BuildEcho<'a> {
    command: &'static str,
    manifests: &'a [PathBuf],
    shots: (usize, usize),
    pseudo: f64,
    split_ratio: f64,
    count: usize,
    seed: u64,
    eval_set: bool,
    naming: Naming,
    names: Option<&'a Path>,
    train_categories: &'a BTreeSet<String>,
    test_categories: &'a BTreeSet<String>,
    conversations: usize,
}

fn cmd_build(a: BuildArgs, f: BuildFile) -> Result<(), CliError> {
    let manifests_paths = if a.manifests.is_empty() { f.manifests.unwrap_or_default() } else { a.manifests };
    if manifests_paths.is_empty() {
        return Err(CliError::Config("at least one --manifest is required".into()));
    }
    let shots = parse_shot_range(&a.shots.or(f.shots).unwrap_or_else(|| "1:8".into()))?;
    let pseudo = a.pseudo.or(f.pseudo).unwrap_or(0.5);
    let split_ratio = a.split_ratio.or(f.split_ratio).unwrap_or(0.5);
    let count = a.count.or(f.count).unwrap_or(1000);
    let seed = a.seed.or(f.seed).unwrap_or(0);
    let names = a.names.or(f.names);
    let eval_set = a.eval_set || f.eval_set.unwrap_or(false);
    let naming = parse_naming(&a.naming.or(f.naming).unwrap_or_else(|| "real".into()))?;
    let out = required(a.out.or(f.out), "out")?;

    let mix_cfg = MixConfig { shot_range: shots, pseudo_fraction: pseudo, count, seed };
    mix_cfg.validate()?;
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(CliError::Config(format!("split ratio {split_ratio} outside (0, 1)")));
    }

    let manifests: Vec<DatasetManifest> =
        manifests_paths.iter().map(|p| read_manifest(p)).collect::<Result<_, _>>()?;
    let all_categories: BTreeSet<String> = manifests.iter().flat_map(|m| m.categories().iter().cloned()).collect();
    let (train, test) = split_category_set(&all_categories, split_ratio, seed)?;

    let base_pool = match &names {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            NamePool::new(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from))?
        }
        None => NamePool::builtin(),
    };
    let pool = base_pool.excluding(&all_categories)?;

    let convs: Vec<Conversation> = if eval_set {
        let mut convs = Vec::new();
        for m in &manifests {
            for t in m.tracks().iter().filter(|t| test.contains(&t.category)) {
                for n in shots.0..=shots.1 {
                    if t.len() > n {
                        let conv_seed = seed ^ (n as u64).rotate_left(32);
                        convs.push(build_conversation(t, n, naming, &pool, conv_seed)?);
                    }
                }
            }
        }
        convs.sort_by(|a, b| a.conv_id.cmp(&b.conv_id));
        convs
    } else {
        build_mix(&manifests, mix_cfg, &train, &pool)?.collect::<Result<_, _>>()?
    };
    if convs.is_empty() {
        return Err(CliError::Data("no conversation could be built from the given manifests".into()));
    }

    let file = fs::File::create(&out).map_err(io_at(&out))?;
    write_conversations(&convs, BufWriter::new(file)).map_err(io_at(&out))?;
    let echo = BuildEcho {
        command: "build",
        manifests: &manifests_paths,
        shots,
        pseudo,
        split_ratio,
        count,
        seed,
        eval_set,
        naming,
        names: names.as_deref(),
        train_categories: &train,
        test_categories: &test,
        conversations: convs.len(),
    };
    let echo_path = out.with_extension("run.json");
    fs::write(&echo_path, serde_json::to_string_pretty(&echo).expect("echo serializes") + "\n")
        .map_err(io_at(&echo_path))?;

    let mut per_source: BTreeMap<&str, usize> = BTreeMap::new();
    for c in &convs {
        *per_source.entry(c.meta.source.as_str()).or_default() += 1;
    }
    println!("wrote {} conversations to {} (seed {seed})", convs.len(), out.display());
    for (s, n) in per_source {
        println!("  {s:<8} {n}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval and score

/// Metadata written next to every report; `score` reads it back so a
/// re-scored run reproduces the original report.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub meta: RunMeta,
    pub space: OutputSpace,
    pub config: serde_json::Value,
}

fn parse_space(s: &str) -> Result<OutputSpace, CliError> {
    match s.to_ascii_lowercase().replace('_', "-").as_str() {
        "per-mille" | "permille" => Ok(OutputSpace::PerMille),
        "pixel" => Ok(OutputSpace::Pixel),
        _ => Err(CliError::Config(format!("space must be per-mille or pixel, got {s:?}"))),
    }
}

fn parse_shot_list(s: &str) -> Result<BTreeSet<usize>, CliError> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| CliError::Config(format!("bad shot list {s:?}"))))
        .collect()
}

fn now_stamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn load_conversations(path: &Path) -> Result<Vec<Conversation>, CliError> {
    let file = fs::File::open(path).map_err(io_at(path))?;
    let convs = read_conversations(BufReader::new(file)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if convs.is_empty() {
        return Err(CliError::Data(format!("{}: no conversations", path.display())));
    }
    Ok(convs)
}

fn resolve_template(id: &str, extra: Option<&Path>) -> Result<PromptTemplate, CliError> {
    let id: TemplateId = id.parse().expect("infallible");
    if let Some(p) = extra {
        let set = PromptSet::load(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        if let Some(t) = set.get(&id) {
            return Ok(t.clone());
        }
    }
    PromptTemplate::builtin(&id).map_err(|e| CliError::Config(e.to_string()))
}

fn write_outputs(out: &Path, records: &[EvalRecord], report: &Report, info: &RunInfo) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(io_at(out))?;
    let rec_path = out.join("records.jsonl");
    let file = fs::File::create(&rec_path).map_err(io_at(&rec_path))?;
    write_records(BufWriter::new(file), records).map_err(io_at(&rec_path))?;
    let p = out.join("report.jsonl");
    fs::write(&p, report.to_jsonl()).map_err(io_at(&p))?;
    let p = out.join("report.txt");
    fs::write(&p, report.to_table()).map_err(io_at(&p))?;
    let p = out.join("run.json");
    fs::write(&p, serde_json::to_string_pretty(info).expect("run info serializes") + "\n").map_err(io_at(&p))?;
    Ok(())
}

fn print_report(report: &Report) {
    print!("{}", report.to_table());
    if let Ok(rows) = copy_gap(report, report) {
        println!("\ncopy gap (mIoU - ctx-mIoU)");
        for r in rows {
            let ds = r.key.dataset.map(|d| d.as_str()).unwrap_or("all");
            let n = r.key.n_shots.map(|n| n.to_string()).unwrap_or_else(|| "all".into());
            let naming = r.key.naming.map(|n| n.as_str()).unwrap_or("all");
            println!("  {ds:<8} {n:>3}-shot {naming:<7} {:>7.2}", r.gap);
        }
    }
}

fn write_partial(out: &Path, records: &[EvalRecord]) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(io_at(out))?;
    let p = out.join("records.jsonl");
    let file = fs::File::create(&p).map_err(io_at(&p))?;
    write_records(BufWriter::new(file), records).map_err(io_at(&p))
}

async fn cmd_eval(a: EvalArgs, f: EvalFile) -> Result<(), CliError> {
    let conversations = required(a.conversations.or(f.conversations), "conversations")?;
    let out = required(a.out.or(f.out), "out")?;
    let sim = a.sim.or(f.sim);
    let endpoint = a.endpoint.or(f.endpoint);
    let template_id = a.template.or(f.template).unwrap_or_else(|| "original".into());
    let prompts = a.prompts.or(f.prompts);
    let parallelism = a.parallelism.or(f.parallelism).unwrap_or(4);
    let space = parse_space(&a.space.or(f.space).unwrap_or_else(|| "per-mille".into()))?;
    let shots = a.shots.or(f.shots);
    let shot_filter = shots.as_deref().map(parse_shot_list).transpose()?;
    let timestamp = a.timestamp.or(f.timestamp).unwrap_or_else(now_stamp);
    let mut seed = a.seed.or(f.seed);

    let template = resolve_template(&template_id, prompts.as_deref())?;

    let responder: Arc<dyn Responder>;
    let mut config = serde_json::json!({
        "conversations": conversations,
        "template": template_id,
        "prompts": prompts,
        "parallelism": parallelism,
        "space": space,
        "shots": shots,
        "out": out,
    });
    match (&sim, &endpoint) {
        (Some(s), None) => {
            let model: SimModel = s.parse().map_err(CliError::Config)?;
            if let SimModel::Random(s) = model {
                seed = seed.or(Some(s));
            }
            config["sim"] = serde_json::json!(model.to_string());
            responder = Arc::new(model);
        }
        (None, Some(url)) => {
            let mut cfg = EndpointConfig::new(url.clone(), a.model.or(f.model).unwrap_or_else(|| "default".into()));
            cfg.api_key_env_var = a.api_key_env.or(f.api_key_env);
            if let Some(t) = a.timeout.or(f.timeout) {
                if !(t > 0.0 && t.is_finite()) {
                    return Err(CliError::Config(format!("timeout must be positive, got {t}")));
                }
                cfg.timeout = Duration::from_secs_f64(t);
            }
            if let Some(r) = a.max_retries.or(f.max_retries) {
                cfg.max_retries = r;
            }
            if let Some(b) = a.backoff.or(f.backoff) {
                if !(b >= 0.0 && b.is_finite()) {
                    return Err(CliError::Config(format!("backoff must be >= 0, got {b}")));
                }
                cfg.backoff.base = Duration::from_secs_f64(b);
            }
            cfg.image_detail = match a.detail.or(f.detail).as_deref().map(str::to_ascii_lowercase).as_deref() {
                None | Some("auto") => ImageDetail::Auto,
                Some("high") => ImageDetail::High,
                Some(d) => return Err(CliError::Config(format!("detail must be auto or high, got {d:?}"))),
            };
            cfg.parallelism = parallelism;
            config["endpoint"] = serde_json::json!({
                "base_url": cfg.base_url,
                "model": cfg.model_name,
                "api_key_env": cfg.api_key_env_var,
                "timeout": cfg.timeout.as_secs_f64(),
                "max_retries": cfg.max_retries,
                "backoff": cfg.backoff.base.as_secs_f64(),
                "detail": cfg.image_detail,
            });
            responder = Arc::new(ChatClient::new(cfg).map_err(|e| match e {
                InferenceError::Transport { .. } => CliError::Transport(e.to_string()),
                _ => CliError::Config(e.to_string()),
            })?);
        }
        _ => return Err(CliError::Config("exactly one of --sim or --endpoint is required".into())),
    }
    config["seed"] = serde_json::json!(seed);

    let convs = load_conversations(&conversations)?;
    let opts = RunOptions { parallelism, space, shot_filter, ..Default::default() };
    let cancel = opts.cancel.clone();
    let watcher = tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            cancel.cancel();
        }
    });
    let result = run(&convs, responder.clone(), &template, &opts).await;
    watcher.abort();

    let records = match result {
        Ok(r) => r,
        Err(EvalError::Aborted { completed }) => {
            write_partial(&out, &completed)?;
            eprintln!("cancelled; {} records written to {}", completed.len(), out.display());
            return Err(CliError::Aborted);
        }
        Err(e) => return Err(CliError::Config(e.to_string())),
    };

    let meta = RunMeta {
        model_name: responder.model_name(),
        template_id: template.template_id.to_string(),
        seed,
        timestamp,
    };
    let report = aggregate(&records, GroupKeys::default(), meta.clone()).map_err(data)?;
    let info = RunInfo { command: "eval".into(), meta, space, config };
    write_outputs(&out, &records, &report, &info)?;
    print_report(&report);

    let transport = records.iter().filter(|r| r.failure_class == FailureClass::Transport).count();
    if transport > 0 {
        return Err(CliError::Transport(format!(
            "{transport} of {} requests failed; results in {}",
            records.len(),
            out.display()
        )));
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct StoredResponse {
    conv_id: String,
    #[serde(default)]
    raw_response: String,
    #[serde(default)]
    failure_class: FailureClass,
    #[serde(default)]
    latency: f64,
    #[serde(default)]
    error: Option<String>,
}

#[derive(Debug, Deserialize)]
struct CorpusEntry {
    source: String,
    raw_text: String,
    expected_kind: ParseTag,
    #[serde(default)]
    expected_box: Option<[f64; 4]>,
}

fn check_corpus(path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    let cfg = ParserConfig::default();
    let (mut total, mut bad) = (0usize, Vec::new());
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let e: CorpusEntry =
            serde_json::from_str(line).map_err(|err| CliError::Data(format!("{} line {}: {err}", path.display(), i + 1)))?;
        total += 1;
        let got = parse_bbox_with(&e.raw_text, Space::PerMille, &cfg);
        let got_box = got.kind.bbox().map(|b| b.corners());
        let ok = got.kind.tag() == e.expected_kind && (e.expected_box.is_none() || got_box == e.expected_box);
        if !ok {
            bad.push(format!("line {} ({}): expected {:?}, got {:?} {:?}", i + 1, e.source, e.expected_kind, got.kind.tag(), got_box));
        }
    }
    println!("{}/{} responses classified as expected", total - bad.len(), total);
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Data(bad.join("\n")))
    }
}

fn cmd_score(a: ScoreArgs, f: ScoreFile) -> Result<(), CliError> {
    if let Some(corpus) = &a.corpus {
        return check_corpus(corpus);
    }
    let conversations = required(a.conversations.or(f.conversations), "conversations")?;
    let responses = required(a.responses.or(f.responses), "responses")?;
    let out = required(a.out.or(f.out), "out")?;

    let prior: Option<RunInfo> = responses
        .parent()
        .map(|d| d.join("run.json"))
        .filter(|p| p.is_file())
        .and_then(|p| fs::read_to_string(p).ok())
        .and_then(|t| serde_json::from_str(&t).ok());
    let space = match a.space.or(f.space) {
        Some(s) => parse_space(&s)?,
        None => prior.as_ref().map(|p| p.space).unwrap_or_default(),
    };
    let meta = RunMeta {
        model_name: a
            .model
            .or(f.model)
            .or_else(|| prior.as_ref().map(|p| p.meta.model_name.clone()))
            .unwrap_or_else(|| "stored".into()),
        template_id: a
            .template
            .or(f.template)
            .or_else(|| prior.as_ref().map(|p| p.meta.template_id.clone()))
            .unwrap_or_else(|| "unknown".into()),
        seed: a.seed.or(f.seed).or_else(|| prior.as_ref().and_then(|p| p.meta.seed)),
        timestamp: a
            .timestamp
            .or(f.timestamp)
            .or_else(|| prior.as_ref().map(|p| p.meta.timestamp.clone()))
            .unwrap_or_else(now_stamp),
    };

    let convs = load_conversations(&conversations)?;
    let by_id: BTreeMap<&str, &Conversation> = convs.iter().map(|c| (c.conv_id.as_str(), c)).collect();
    let text = fs::read_to_string(&responses).map_err(io_at(&responses))?;
    let mut stored = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: StoredResponse = serde_json::from_str(line)
            .map_err(|e| CliError::Data(format!("{} line {}: {e}", responses.display(), i + 1)))?;
        stored.push(r);
    }
    let unknown: Vec<&str> =
        stored.iter().map(|r| r.conv_id.as_str()).filter(|id| !by_id.contains_key(id)).collect();
    if !unknown.is_empty() {
        return Err(CliError::Data(format!("unknown conv_id(s): {}", unknown.join(", "))));
    }
    if stored.is_empty() {
        return Err(CliError::Data(format!("{}: no responses", responses.display())));
    }

    let parser = ParserConfig::default();
    let mut records: Vec<EvalRecord> = stored
        .iter()
        .map(|r| {
            let conv = by_id[r.conv_id.as_str()];
            if r.failure_class == FailureClass::Transport {
                let err = InferenceError::Transport { status: None, message: r.error.clone().unwrap_or_default() };
                let mut rec = transport_failure(conv, &err, r.latency);
                rec.error = r.error.clone();
                rec
            } else {
                let mut rec = score_with(conv, &r.raw_response, space, &parser);
                rec.latency = r.latency;
                rec
            }
        })
        .collect();
    records.sort_by(|a, b| a.conv_id.cmp(&b.conv_id));

    let report = aggregate(&records, GroupKeys::default(), meta.clone()).map_err(data)?;
    let config = serde_json::json!({
        "conversations": conversations,
        "responses": responses,
        "space": space,
        "out": out,
    });
    let info = RunInfo { command: "score".into(), meta, space, config };
    write_outputs(&out, &records, &report, &info)?;
    print_report(&report);
    Ok(())
}

// ---------------------------------------------------------------------------
// validate

fn first_record(path: &Path) -> Result<Option<serde_json::Value>, CliError> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    match text.lines().find(|l| !l.trim().is_empty()) {
        None => Ok(None),
        Some(l) => serde_json::from_str(l).map(Some).map_err(|e| CliError::Data(format!("{}: line 1: {e}", path.display()))),
    }
}

fn cmd_validate(a: ValidateArgs) -> Result<(), CliError> {
    let Some(first) = first_record(&a.path)? else {
        return Err(CliError::Data(format!("{}: empty file", a.path.display())));
    };
    if first.get("frames").is_some() {
        let m = read_manifest(&a.path)?;
        let s = m.stats();
        println!(
            "manifest {}: {} records, {} categories, {:.2} objects/image",
            m.name(),
            s.record_count,
            s.category_count,
            s.mean_objects_per_image
        );
        return Ok(());
    }
    if first.get("turns").is_none() {
        return Err(CliError::Data(format!("{}: neither a conversation file nor a manifest", a.path.display())));
    }

    let convs = {
        let file = fs::File::open(&a.path).map_err(io_at(&a.path))?;
        read_conversations(BufReader::new(file)).map_err(|e| CliError::Data(format!("{}: {e}", a.path.display())))?
    };
    let mut categories: BTreeSet<String> = BTreeSet::new();
    for p in &a.manifests {
        categories.extend(read_manifest(p)?.categories().iter().cloned());
    }
    categories.extend(convs.iter().filter(|c| c.meta.naming == Naming::Real).map(|c| c.query_label.clone()));

    let mut problems = Vec::new();
    let mut seen = BTreeSet::new();
    for c in &convs {
        if !seen.insert(c.conv_id.as_str()) {
            problems.push(format!("{}: duplicate conv_id", c.conv_id));
        }
        if let Err(e) = c.validate() {
            problems.push(format!("{}: {e}", c.conv_id));
        }
        let leaked = c.leaked_categories(&categories);
        if !leaked.is_empty() {
            problems.push(format!("{}: pseudo-named conversation mentions {}", c.conv_id, leaked.join(", ")));
        }
    }
    for p in &problems {
        println!("{p}");
    }
    if problems.is_empty() {
        println!("{}: {} conversations ok", a.path.display(), convs.len());
        Ok(())
    } else {
        Err(CliError::Data(format!("{} problem(s) in {}", problems.len(), a.path.display())))
    }
}
