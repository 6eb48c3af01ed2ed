//! Scoring, evaluation runs and report generation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;
use tokio::task::JoinSet;
use tokio_util::sync::CancellationToken;

use crate::convo::{Conversation, Naming};
use crate::geometry::{context_iou, convert_space, iou, BBox, Space};
use crate::inference::{InferenceError, Responder};
use crate::ingest::Source;
use crate::prompts::PromptTemplate;
use crate::respparse::{parse_bbox_with, ParseKind, ParseTag, ParserConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to aggregate")]
    EmptyInput,
    #[error("report cells differ: {0}")]
    KeyMismatch(String),
    #[error("invalid run config: {0}")]
    ConfigInvalid(String),
    #[error("run aborted after {} records", completed.len())]
    Aborted { completed: Vec<EvalRecord> },
    #[error("records line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FailureClass {
    #[default]
    None,
    Refusal,
    Malformed,
    Degenerate,
    Transport,
}

/// Coordinate convention of model outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputSpace {
    #[default]
    PerMille,
    /// Pixels of the query image.
    Pixel,
}

impl OutputSpace {
    pub fn for_conversation(&self, conv: &Conversation) -> Space {
        match self {
            OutputSpace::PerMille => Space::PerMille,
            OutputSpace::Pixel => {
                Space::pixel(conv.meta.image_width, conv.meta.image_height).unwrap_or(Space::PerMille)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseSummary {
    pub kind: ParseTag,
    /// Parsed corners in the model's output space.
    #[serde(rename = "box")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub conv_id: String,
    pub dataset: Source,
    pub n_shots: usize,
    pub naming: Naming,
    pub raw_response: String,
    /// Absent for transport failures.
    pub parse: Option<ParseSummary>,
    /// Prediction in per-mille space, when one was scored.
    pub pred_box: Option<[f64; 4]>,
    pub iou: f64,
    pub context_iou: f64,
    /// Seconds.
    pub latency: f64,
    pub failure_class: FailureClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalRecord {
    fn blank(conv: &Conversation, raw: &str) -> Self {
        Self {
            conv_id: conv.conv_id.clone(),
            dataset: conv.meta.source,
            n_shots: conv.shots.len(),
            naming: conv.meta.naming,
            raw_response: raw.to_string(),
            parse: None,
            pred_box: None,
            iou: 0.0,
            context_iou: 0.0,
            latency: 0.0,
            failure_class: FailureClass::None,
            error: None,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Scores one response. Never fails: problems land in `failure_class`.
pub fn score(conv: &Conversation, raw: &str, space: OutputSpace) -> EvalRecord {
    score_with(conv, raw, space, &ParserConfig::default())
}

pub fn score_with(conv: &Conversation, raw: &str, space: OutputSpace, cfg: &ParserConfig) -> EvalRecord {
    let mut rec = EvalRecord::blank(conv, raw);
    let parsed = parse_bbox_with(raw, space.for_conversation(conv), cfg);
    rec.parse = Some(ParseSummary {
        kind: parsed.kind.tag(),
        bbox: parsed.kind.bbox().map(BBox::corners),
        note: parsed.note.clone(),
    });
    rec.failure_class = match &parsed.kind {
        ParseKind::Refusal => FailureClass::Refusal,
        ParseKind::Malformed => FailureClass::Malformed,
        ParseKind::Degenerate(_) => FailureClass::Degenerate,
        ParseKind::Box(b) => {
            let scored = convert_space(b, conv.target_box.space()).and_then(|pred| {
                let shots = conv.shot_boxes();
                Ok((pred, iou(&pred, &conv.target_box)?, context_iou(&pred, &conv.target_box, &shots)?))
            });
            match scored {
                Ok((pred, i, c)) if !pred.is_degenerate() => {
                    rec.pred_box = Some(pred.corners());
                    rec.iou = i;
                    rec.context_iou = c;
                    FailureClass::None
                }
                Ok(_) => FailureClass::Degenerate,
                Err(e) => {
                    rec.error = Some(e.to_string());
                    FailureClass::Malformed
                }
            }
        }
    };
    rec
}

pub fn transport_failure(conv: &Conversation, err: &InferenceError, latency: f64) -> EvalRecord {
    let mut rec = EvalRecord::blank(conv, "");
    rec.failure_class = FailureClass::Transport;
    rec.latency = latency;
    rec.error = Some(err.to_string());
    rec
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub parallelism: usize,
    pub space: OutputSpace,
    pub shot_filter: Option<BTreeSet<usize>>,
    pub parser: ParserConfig,
    pub cancel: CancellationToken,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            parallelism: 4,
            space: OutputSpace::PerMille,
            shot_filter: None,
            parser: ParserConfig::default(),
            cancel: CancellationToken::new(),
        }
    }
}

/// Queries `responder` for every conversation (at most `parallelism` at a
/// time) and scores the answers. Records come back sorted by `conv_id`.
pub async fn run(
    convs: &[Conversation],
    responder: Arc<dyn Responder>,
    template: &PromptTemplate,
    opts: &RunOptions,
) -> Result<Vec<EvalRecord>, EvalError> {
    if opts.parallelism == 0 {
        return Err(EvalError::ConfigInvalid("parallelism must be >= 1".into()));
    }
    let selected: Vec<Arc<Conversation>> = convs
        .iter()
        .filter(|c| opts.shot_filter.as_ref().is_none_or(|f| f.contains(&c.shots.len())))
        .cloned()
        .map(Arc::new)
        .collect();
    if selected.is_empty() {
        return Err(EvalError::ConfigInvalid("no conversations to evaluate".into()));
    }

    let total = selected.len();
    let permits = Arc::new(Semaphore::new(opts.parallelism));
    let template = Arc::new(template.clone());
    let mut tasks = JoinSet::new();
    for conv in selected {
        let permits = permits.clone();
        let responder = responder.clone();
        let template = template.clone();
        let (space, parser) = (opts.space, opts.parser);
        tasks.spawn(async move {
            let _permit = permits.acquire_owned().await.expect("semaphore open");
            let started = Instant::now();
            let answer = responder.respond(&conv, &template).await;
            let latency = if responder.measures_latency() { started.elapsed().as_secs_f64() } else { 0.0 };
            match answer {
                Ok(text) => {
                    let mut rec = score_with(&conv, &text, space, &parser);
                    rec.latency = latency;
                    rec
                }
                Err(e) => {
                    log::warn!("{}: {e}", conv.conv_id);
                    transport_failure(&conv, &e, latency)
                }
            }
        });
    }

    let mut records = Vec::with_capacity(total);
    loop {
        tokio::select! {
            biased;
            _ = opts.cancel.cancelled() => {
                tasks.abort_all();
                records.sort_by(|a: &EvalRecord, b| a.conv_id.cmp(&b.conv_id));
                return Err(EvalError::Aborted { completed: records });
            }
            next = tasks.join_next() => match next {
                Some(Ok(rec)) => {
                    records.push(rec);
                    if records.len() % 100 == 0 {
                        log::info!("{}/{} scored", records.len(), total);
                    }
                }
                Some(Err(e)) => {
                    if e.is_panic() {
                        std::panic::resume_unwind(e.into_panic());
                    }
                }
                None => break,
            }
        }
    }
    records.sort_by(|a, b| a.conv_id.cmp(&b.conv_id));
    Ok(records)
}

pub fn write_records<W: Write>(mut out: W, records: &[EvalRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_json_line())?;
    }
    out.flush()
}

pub fn read_records<R: BufRead>(input: R) -> Result<Vec<EvalRecord>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| EvalError::MalformedLine { line: i + 1, reason: e.to_string() })?,
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// aggregation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Iou,
    ContextIou,
}

impl Metric {
    pub fn label(&self) -> &'static str {
        match self {
            Metric::Iou => "mIoU",
            Metric::ContextIou => "ctx-mIoU",
        }
    }
}

/// Which record fields split cells. Unused fields collapse to "all".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupKeys {
    pub dataset: bool,
    pub n_shots: bool,
    pub naming: bool,
}

impl Default for GroupKeys {
    fn default() -> Self {
        Self { dataset: true, n_shots: true, naming: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub dataset: Option<Source>,
    pub n_shots: Option<usize>,
    pub naming: Option<Naming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    #[serde(flatten)]
    pub key: CellKey,
    pub metric: Metric,
    /// Percent.
    pub mean: f64,
    pub count: usize,
    pub failure_breakdown: BTreeMap<FailureClass, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub model_name: String,
    pub template_id: String,
    pub seed: Option<u64>,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub meta: RunMeta,
    pub cells: Vec<Cell>,
}

pub fn aggregate(records: &[EvalRecord], keys: GroupKeys, meta: RunMeta) -> Result<Report, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut groups: BTreeMap<CellKey, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        let key = CellKey {
            dataset: keys.dataset.then_some(r.dataset),
            n_shots: keys.n_shots.then_some(r.n_shots),
            naming: keys.naming.then_some(r.naming),
        };
        groups.entry(key).or_default().push(r);
    }
    let mut cells = Vec::with_capacity(groups.len() * 2);
    for (key, rs) in groups {
        let mut failure_breakdown = BTreeMap::new();
        for r in rs.iter().filter(|r| r.failure_class != FailureClass::None) {
            *failure_breakdown.entry(r.failure_class).or_insert(0) += 1;
        }
        for metric in [Metric::Iou, Metric::ContextIou] {
            let sum: f64 = rs
                .iter()
                .map(|r| match metric {
                    Metric::Iou => r.iou,
                    Metric::ContextIou => r.context_iou,
                })
                .sum();
            cells.push(Cell {
                key: key.clone(),
                metric,
                mean: 100.0 * sum / rs.len() as f64,
                count: rs.len(),
                failure_breakdown: failure_breakdown.clone(),
            });
        }
    }
    Ok(Report { meta, cells })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum ReportLine {
    Meta(RunMeta),
    Cell(Cell),
}

fn cell_text(v: Option<f64>) -> String {
    v.map(|m| format!("{m:.2}")).unwrap_or_else(|| "-".into())
}

fn any_or<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "all".into())
}

impl Report {
    pub fn cell(&self, key: &CellKey, metric: Metric) -> Option<&Cell> {
        self.cells.iter().find(|c| &c.key == key && c.metric == metric)
    }

    /// A meta line followed by one line per cell.
    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&ReportLine::Meta(self.meta.clone())).expect("meta serializes");
        s.push('\n');
        for c in &self.cells {
            s.push_str(&serde_json::to_string(&ReportLine::Cell(c.clone())).expect("cell serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self, EvalError> {
        let mut meta = None;
        let mut cells = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line)
                .map_err(|e| EvalError::MalformedLine { line: i + 1, reason: e.to_string() })?
            {
                ReportLine::Meta(m) => meta = Some(m),
                ReportLine::Cell(c) => cells.push(c),
            }
        }
        let meta = meta.ok_or(EvalError::MalformedLine { line: 1, reason: "missing meta line".into() })?;
        Ok(Self { meta, cells })
    }

    /// Aligned table: datasets as column groups, shot counts as sub-columns,
    /// one row per naming and metric.
    pub fn to_table(&self) -> String {
        let mut columns: BTreeMap<Option<Source>, BTreeSet<Option<usize>>> = BTreeMap::new();
        let mut rows: BTreeSet<(Option<Naming>, Metric)> = BTreeSet::new();
        let mut values: BTreeMap<(Option<Source>, Option<usize>, Option<Naming>, Metric), f64> = BTreeMap::new();
        for c in &self.cells {
            columns.entry(c.key.dataset).or_default().insert(c.key.n_shots);
            rows.insert((c.key.naming, c.metric));
            values.insert((c.key.dataset, c.key.n_shots, c.key.naming, c.metric), c.mean);
        }

        const W: usize = 8;
        let lead_w = 19;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "model: {}  template: {}  seed: {}  timestamp: {}",
            self.meta.model_name,
            self.meta.template_id,
            any_or(self.meta.seed).replace("all", "-"),
            self.meta.timestamp
        );

        let mut groups = format!("{:lead_w$}", "");
        let mut shots = format!("{:<8}{:<11}", "naming", "metric");
        for (ds, ns) in &columns {
            let width = ns.len() * W;
            groups.push_str(&format!(" |{:^width$}", any_or(ds.map(|d| d.as_str()))));
            shots.push_str(" |");
            for n in ns {
                let label = n.map(|n| format!("{n}-shot")).unwrap_or_else(|| "all".into());
                shots.push_str(&format!("{label:>W$}"));
            }
        }
        let _ = writeln!(out, "{}", groups.trim_end());
        let _ = writeln!(out, "{}", shots.trim_end());
        let _ = writeln!(out, "{}", "-".repeat(shots.trim_end().len()));
        for (naming, metric) in &rows {
            let mut line = format!("{:<8}{:<11}", any_or(naming.map(|n| n.as_str())), metric.label());
            for (ds, ns) in &columns {
                line.push_str(" |");
                for n in ns {
                    line.push_str(&format!("{:>W$}", cell_text(values.get(&(*ds, *n, *naming, *metric)).copied())));
                }
            }
            let _ = writeln!(out, "{}", line.trim_end());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    #[serde(flatten)]
    pub key: CellKey,
    pub mean_iou: f64,
    pub mean_context_iou: f64,
    pub gap: f64,
}

/// Per-cell difference between standard and contextual mIoU. A large
/// positive gap means predictions mostly repeat in-context boxes.
pub fn copy_gap(report_std: &Report, report_ctx: &Report) -> Result<Vec<GapRow>, EvalError> {
    let std: BTreeMap<&CellKey, f64> =
        report_std.cells.iter().filter(|c| c.metric == Metric::Iou).map(|c| (&c.key, c.mean)).collect();
    let ctx: BTreeMap<&CellKey, f64> =
        report_ctx.cells.iter().filter(|c| c.metric == Metric::ContextIou).map(|c| (&c.key, c.mean)).collect();
    if std.keys().ne(ctx.keys()) {
        let a: BTreeSet<_> = std.keys().collect();
        let b: BTreeSet<_> = ctx.keys().collect();
        let diff: Vec<String> = a.symmetric_difference(&b).map(|k| format!("{k:?}")).collect();
        return Err(EvalError::KeyMismatch(diff.join(", ")));
    }
    Ok(std
        .into_iter()
        .map(|(key, mean_iou)| {
            let mean_context_iou = ctx[key];
            GapRow { key: key.clone(), mean_iou, mean_context_iou, gap: mean_iou - mean_context_iou }
        })
        .collect())
}
