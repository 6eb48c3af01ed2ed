//! n-shot personalized-localization conversations.
//!
//! A conversation shows `n` annotated frames of one object ("shots") and
//! asks for the object's box in a final query frame. Frames are sampled at
//! maximum interval along a track; the query is always the last sampled
//! frame. With pseudo naming, the category is replaced by a person-like
//! name that is reused for every turn of the conversation.
//!
//! Conversation boxes are stored in per-mille space, rounded to two
//! decimals.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{convert_space, BBox, GeometryError, Space};
use crate::ingest::{DatasetManifest, Frame, Source, Track};

pub const BUILTIN_NAMES: &str = include_str!("../data/pseudo_names.txt");

const REF_OPEN: &str = "<image><ref>";
const REF_CLOSE: &str = "</ref>";

#[derive(Debug, Error)]
pub enum ConvoError {
    #[error("track {track_id} has {have} frames, need {need}")]
    TrackTooShort { track_id: String, have: usize, need: usize },
    #[error("sample size must be at least 2, got {0}")]
    SampleTooSmall(usize),
    #[error("pseudo-name pool is empty")]
    EmptyPool,
    #[error("category {category:?} has {have} distinct videos, need {need}")]
    InsufficientTracks { category: String, have: usize, need: usize },
    #[error("no eligible track for the requested mix")]
    EmptyMix,
    #[error("invalid mix config: {0}")]
    InvalidMix(String),
    #[error("conversation {conv_id}: {reason}")]
    Invalid { conv_id: String, reason: String },
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Naming {
    Real,
    Pseudo,
}

impl Naming {
    pub fn as_str(&self) -> &'static str {
        match self {
            Naming::Real => "real",
            Naming::Pseudo => "pseudo",
        }
    }
}

/// One in-context example.
#[derive(Debug, Clone, PartialEq)]
pub struct Shot {
    pub image_ref: String,
    pub shown_label: String,
    pub bbox: BBox,
    pub pre_text: String,
    pub post_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationMeta {
    pub source: Source,
    /// Video of the query frame.
    pub video_id: String,
    /// Track of the query frame.
    pub track_id: String,
    pub n_shots: usize,
    pub naming: Naming,
    pub coherent: bool,
    pub seed: u64,
    /// Video of every image, shots first, query last.
    pub video_ids: Vec<String>,
    /// Pixel size of the query image.
    pub image_width: u32,
    pub image_height: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub conv_id: String,
    pub shots: Vec<Shot>,
    pub query_image_ref: String,
    pub query_label: String,
    pub target_box: BBox,
    pub meta: ConversationMeta,
}

impl Conversation {
    pub fn shot_boxes(&self) -> Vec<BBox> {
        self.shots.iter().map(|s| s.bbox).collect()
    }

    /// Pixel space of the query image.
    pub fn query_space(&self) -> Result<Space, GeometryError> {
        Space::pixel(self.meta.image_width, self.meta.image_height)
    }

    pub fn validate(&self) -> Result<(), ConvoError> {
        let bad = |reason: String| ConvoError::Invalid { conv_id: self.conv_id.clone(), reason };
        if self.shots.is_empty() {
            return Err(bad("no shots".into()));
        }
        if self.meta.n_shots != self.shots.len() {
            return Err(bad(format!("meta.n_shots={} but {} shots", self.meta.n_shots, self.shots.len())));
        }
        check_label(&self.query_label).map_err(bad)?;
        for (i, s) in self.shots.iter().enumerate() {
            if s.shown_label != self.query_label {
                return Err(bad(format!("shot {i} label {:?} != query label {:?}", s.shown_label, self.query_label)));
            }
            if s.bbox.space() != Space::PerMille {
                return Err(bad(format!("shot {i} box not per-mille")));
            }
        }
        if self.target_box.space() != Space::PerMille {
            return Err(bad("target box not per-mille".into()));
        }
        if self.meta.video_ids.len() != self.shots.len() + 1 {
            return Err(bad(format!("{} video ids for {} images", self.meta.video_ids.len(), self.shots.len() + 1)));
        }
        if self.meta.coherent && self.meta.video_ids.iter().any(|v| *v != self.meta.video_id) {
            return Err(bad("coherent conversation spans several videos".into()));
        }
        Space::pixel(self.meta.image_width, self.meta.image_height).map_err(|e| bad(e.to_string()))?;
        Ok(())
    }

    /// Real category names (case-insensitive substrings) visible in a pseudo
    /// conversation's labels or turn texts.
    pub fn leaked_categories<'a>(&self, categories: impl IntoIterator<Item = &'a String>) -> Vec<String> {
        if self.meta.naming != Naming::Pseudo {
            return Vec::new();
        }
        let visible: String = self
            .to_record()
            .turns
            .iter()
            .filter_map(|t| match t {
                Turn::User { text, .. } => Some(text.to_lowercase()),
                Turn::Assistant { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n");
        categories
            .into_iter()
            .filter(|c| !c.is_empty() && visible.contains(&c.to_lowercase()))
            .cloned()
            .collect()
    }
}

fn check_label(label: &str) -> Result<(), String> {
    if label.is_empty() {
        return Err("empty label".into());
    }
    if label.contains(REF_CLOSE) || label.contains(REF_OPEN) {
        return Err(format!("label {label:?} contains ref markup"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// wire format

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "lowercase")]
pub enum Turn {
    User {
        image_ref: String,
        text: String,
        #[serde(rename = "box")]
        bbox: Option<[f64; 4]>,
    },
    Assistant {
        #[serde(rename = "box")]
        bbox: [f64; 4],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub conv_id: String,
    pub meta: ConversationMeta,
    pub turns: Vec<Turn>,
}

pub fn turn_text(pre: &str, label: &str, post: &str) -> String {
    format!("{pre}{REF_OPEN}{label}{REF_CLOSE}{post}")
}

fn split_turn_text(text: &str) -> Option<(String, String, String)> {
    let open = text.find(REF_OPEN)?;
    let rest = &text[open + REF_OPEN.len()..];
    let close = rest.find(REF_CLOSE)?;
    Some((
        text[..open].to_string(),
        rest[..close].to_string(),
        rest[close + REF_CLOSE.len()..].to_string(),
    ))
}

impl Conversation {
    pub fn to_record(&self) -> ConversationRecord {
        let mut turns: Vec<Turn> = self
            .shots
            .iter()
            .map(|s| Turn::User {
                image_ref: s.image_ref.clone(),
                text: turn_text(&s.pre_text, &s.shown_label, &s.post_text),
                bbox: Some(s.bbox.corners()),
            })
            .collect();
        turns.push(Turn::User {
            image_ref: self.query_image_ref.clone(),
            text: turn_text("", &self.query_label, ""),
            bbox: None,
        });
        turns.push(Turn::Assistant { bbox: self.target_box.corners() });
        ConversationRecord { conv_id: self.conv_id.clone(), meta: self.meta.clone(), turns }
    }

    pub fn from_record(rec: ConversationRecord) -> Result<Self, ConvoError> {
        let bad = |reason: &str| ConvoError::Invalid { conv_id: rec.conv_id.clone(), reason: reason.to_string() };
        let pm = |c: [f64; 4]| BBox::per_mille(c[0], c[1], c[2], c[3]);
        let n = rec.turns.len();
        if n < 3 {
            return Err(bad("need at least one shot, a query and an answer"));
        }
        let mut shots = Vec::with_capacity(n - 2);
        for t in &rec.turns[..n - 2] {
            match t {
                Turn::User { image_ref, text, bbox: Some(c) } => {
                    let (pre, label, post) = split_turn_text(text).ok_or_else(|| bad("shot text lacks ref markup"))?;
                    shots.push(Shot {
                        image_ref: image_ref.clone(),
                        shown_label: label,
                        bbox: pm(*c)?,
                        pre_text: pre,
                        post_text: post,
                    });
                }
                _ => return Err(bad("shot turns must be user turns with a box")),
            }
        }
        let (query_image_ref, query_label) = match &rec.turns[n - 2] {
            Turn::User { image_ref, text, bbox: None } => {
                let (_, label, _) = split_turn_text(text).ok_or_else(|| bad("query text lacks ref markup"))?;
                (image_ref.clone(), label)
            }
            _ => return Err(bad("query turn must be a user turn with box null")),
        };
        let target_box = match &rec.turns[n - 1] {
            Turn::Assistant { bbox } => pm(*bbox)?,
            _ => return Err(bad("last turn must be the assistant answer")),
        };
        let conv = Conversation {
            conv_id: rec.conv_id,
            shots,
            query_image_ref,
            query_label,
            target_box,
            meta: rec.meta,
        };
        conv.validate()?;
        Ok(conv)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("conversation serializes")
    }

    pub fn from_json_line(text: &str, line: usize) -> Result<Self, ConvoError> {
        let rec: ConversationRecord =
            serde_json::from_str(text).map_err(|e| ConvoError::MalformedLine { line, reason: e.to_string() })?;
        Self::from_record(rec).map_err(|e| ConvoError::MalformedLine { line, reason: e.to_string() })
    }
}

pub fn write_conversations<'a, W: Write>(
    convs: impl IntoIterator<Item = &'a Conversation>,
    mut out: W,
) -> std::io::Result<()> {
    for c in convs {
        writeln!(out, "{}", c.to_json_line())?;
    }
    Ok(())
}

pub fn read_conversations<R: BufRead>(input: R) -> Result<Vec<Conversation>, ConvoError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(Conversation::from_json_line(&line, i + 1)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// pseudo names

/// Ordered pool of distinct person-like names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamePool {
    names: Vec<String>,
}

impl NamePool {
    pub fn new(names: impl IntoIterator<Item = String>) -> Result<Self, ConvoError> {
        let mut seen = BTreeSet::new();
        let names: Vec<String> = names
            .into_iter()
            .map(|n| n.trim().to_string())
            .filter(|n| !n.is_empty() && seen.insert(n.to_lowercase()))
            .collect();
        if names.is_empty() {
            return Err(ConvoError::EmptyPool);
        }
        Ok(Self { names })
    }

    /// The shipped pool of 500 common given names.
    pub fn builtin() -> Self {
        Self::new(BUILTIN_NAMES.lines().map(str::to_string)).expect("builtin pool is non-empty")
    }

    /// Drops every name that contains a category name, ignoring case.
    pub fn excluding<'a>(&self, categories: impl IntoIterator<Item = &'a String>) -> Result<Self, ConvoError> {
        let cats: Vec<String> = categories.into_iter().map(|c| c.to_lowercase()).filter(|c| !c.is_empty()).collect();
        Self::new(
            self.names
                .iter()
                .filter(|n| {
                    let n = n.to_lowercase();
                    !cats.iter().any(|c| n.contains(c.as_str()))
                })
                .cloned(),
        )
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

// ---------------------------------------------------------------------------
// sampling and builders

/// Evenly spread indices `round(i * (len - 1) / (k - 1))`, `i = 0..k`.
pub fn sample_indices(len: usize, k: usize) -> Result<Vec<usize>, ConvoError> {
    if k < 2 {
        return Err(ConvoError::SampleTooSmall(k));
    }
    if len < k {
        return Err(ConvoError::TrackTooShort { track_id: String::new(), have: len, need: k });
    }
    let span = (len - 1) as u64;
    let steps = (k - 1) as u64;
    // round half up in integers: floor((2 i span + steps) / (2 steps))
    Ok((0..k as u64).map(|i| ((2 * i * span + steps) / (2 * steps)) as usize).collect())
}

/// `k` frames of `track` at maximum interval; first and last always included.
pub fn sample_frames(track: &Track, k: usize) -> Result<Vec<&Frame>, ConvoError> {
    let idx = sample_indices(track.frames.len(), k).map_err(|e| match e {
        ConvoError::TrackTooShort { have, need, .. } => {
            ConvoError::TrackTooShort { track_id: track.track_id.clone(), have, need }
        }
        other => other,
    })?;
    Ok(idx.into_iter().map(|i| &track.frames[i]).collect())
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Frame box in per-mille space, rounded to two decimals.
pub fn frame_box_per_mille(frame: &Frame) -> Result<BBox, GeometryError> {
    let pm = convert_space(&frame.bbox, Space::PerMille)?;
    let [a, b, c, d] = pm.corners();
    BBox::per_mille(round2(a), round2(b), round2(c), round2(d))
}

fn derive_id(prefix: &str, parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let digest = h.finalize();
    let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    format!("{prefix}-{hex}")
}

fn draw_name(pool: &NamePool, rng: &mut ChaCha8Rng) -> Result<String, ConvoError> {
    pool.names.choose(rng).cloned().ok_or(ConvoError::EmptyPool)
}

/// Coherent conversation from one track: `n_shots + 1` frames at maximum
/// interval, the last of which is the query.
pub fn build_conversation(
    track: &Track,
    n_shots: usize,
    naming: Naming,
    pool: &NamePool,
    seed: u64,
) -> Result<Conversation, ConvoError> {
    if n_shots == 0 {
        return Err(ConvoError::SampleTooSmall(1));
    }
    let frames = sample_frames(track, n_shots + 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label = match naming {
        Naming::Real => track.category.clone(),
        Naming::Pseudo => draw_name(pool, &mut rng)?,
    };
    let (query, shot_frames) = frames.split_last().expect("k >= 2");
    let shots = shot_frames
        .iter()
        .map(|f| {
            Ok(Shot {
                image_ref: f.image_ref.clone(),
                shown_label: label.clone(),
                bbox: frame_box_per_mille(f)?,
                pre_text: String::new(),
                post_text: String::new(),
            })
        })
        .collect::<Result<Vec<_>, GeometryError>>()?;
    let conv = Conversation {
        conv_id: derive_id(
            "conv",
            &[&track.track_id, &track.video_id, &n_shots.to_string(), naming.as_str(), &seed.to_string()],
        ),
        shots,
        query_image_ref: query.image_ref.clone(),
        query_label: label,
        target_box: frame_box_per_mille(query)?,
        meta: ConversationMeta {
            source: track.source,
            video_id: track.video_id.clone(),
            track_id: track.track_id.clone(),
            n_shots,
            naming,
            coherent: true,
            seed,
            video_ids: vec![track.video_id.clone(); n_shots + 1],
            image_width: query.width,
            image_height: query.height,
        },
    };
    conv.validate()?;
    Ok(conv)
}

/// Control conversation for the coherence ablation: every shot and the
/// query come from a different video of the same category.
pub fn build_incoherent_conversation(
    manifest: &DatasetManifest,
    category: &str,
    n_shots: usize,
    seed: u64,
) -> Result<Conversation, ConvoError> {
    if n_shots == 0 {
        return Err(ConvoError::SampleTooSmall(1));
    }
    let mut by_video: BTreeMap<&str, Vec<&Track>> = BTreeMap::new();
    for t in manifest.tracks_of(category) {
        by_video.entry(t.video_id.as_str()).or_default().push(t);
    }
    let need = n_shots + 1;
    if by_video.len() < need {
        return Err(ConvoError::InsufficientTracks { category: category.to_string(), have: by_video.len(), need });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut videos: Vec<&str> = by_video.keys().copied().collect();
    videos.shuffle(&mut rng);
    videos.truncate(need);

    let mut picked: Vec<(&Track, &Frame)> = Vec::with_capacity(need);
    for v in &videos {
        let track = *by_video[v].choose(&mut rng).expect("video has tracks");
        let frame = track.frames.choose(&mut rng).expect("track has frames");
        picked.push((track, frame));
    }
    let (&(q_track, q_frame), shot_picks) = picked.split_last().expect("need >= 2");
    let shots = shot_picks
        .iter()
        .map(|(_, f)| {
            Ok(Shot {
                image_ref: f.image_ref.clone(),
                shown_label: category.to_string(),
                bbox: frame_box_per_mille(f)?,
                pre_text: String::new(),
                post_text: String::new(),
            })
        })
        .collect::<Result<Vec<_>, GeometryError>>()?;
    let conv = Conversation {
        conv_id: derive_id("incoh", &[manifest.name(), category, &n_shots.to_string(), &seed.to_string()]),
        shots,
        query_image_ref: q_frame.image_ref.clone(),
        query_label: category.to_string(),
        target_box: frame_box_per_mille(q_frame)?,
        meta: ConversationMeta {
            source: q_track.source,
            video_id: q_track.video_id.clone(),
            track_id: q_track.track_id.clone(),
            n_shots,
            naming: Naming::Real,
            coherent: false,
            seed,
            video_ids: picked.iter().map(|(t, _)| t.video_id.clone()).collect(),
            image_width: q_frame.width,
            image_height: q_frame.height,
        },
    };
    conv.validate()?;
    Ok(conv)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixConfig {
    /// Inclusive range of shot counts.
    pub shot_range: (usize, usize),
    pub pseudo_fraction: f64,
    /// Number of conversations to emit.
    pub count: usize,
    pub seed: u64,
}

impl MixConfig {
    pub fn validate(&self) -> Result<(), ConvoError> {
        let (lo, hi) = self.shot_range;
        if lo < 1 || lo > hi {
            return Err(ConvoError::InvalidMix(format!("shot range {lo}:{hi}")));
        }
        if !(0.0..=1.0).contains(&self.pseudo_fraction) {
            return Err(ConvoError::InvalidMix(format!("pseudo fraction {}", self.pseudo_fraction)));
        }
        Ok(())
    }
}

/// Seeded stream of training conversations; see [`build_mix`].
pub struct MixStream<'a> {
    sources: Vec<Vec<&'a Track>>,
    pool: &'a NamePool,
    cfg: MixConfig,
    rng: ChaCha8Rng,
    emitted: usize,
}

/// Interleaves conversations from `manifests` round-robin, restricted to
/// `train` categories. Each conversation draws its shot count uniformly from
/// `cfg.shot_range` (capped by the longest eligible track of its source) and
/// uses pseudo naming with probability `cfg.pseudo_fraction`.
pub fn build_mix<'a>(
    manifests: &'a [DatasetManifest],
    cfg: MixConfig,
    train: &BTreeSet<String>,
    pool: &'a NamePool,
) -> Result<MixStream<'a>, ConvoError> {
    cfg.validate()?;
    if manifests.is_empty() {
        return Err(ConvoError::EmptyMix);
    }
    let lo = cfg.shot_range.0;
    let sources: Vec<Vec<&Track>> = manifests
        .iter()
        .map(|m| {
            let mut v: Vec<&Track> =
                m.tracks().iter().filter(|t| train.contains(&t.category) && t.frames.len() > lo).collect();
            v.sort_by_key(|t| t.frames.len());
            v
        })
        .filter(|v: &Vec<&Track>| !v.is_empty())
        .collect();
    if sources.is_empty() {
        return Err(ConvoError::EmptyMix);
    }
    if cfg.pseudo_fraction > 0.0 && pool.is_empty() {
        return Err(ConvoError::EmptyPool);
    }
    Ok(MixStream { sources, pool, cfg, rng: ChaCha8Rng::seed_from_u64(cfg.seed), emitted: 0 })
}

impl MixStream<'_> {
    fn next_conversation(&mut self) -> Result<Conversation, ConvoError> {
        let idx = self.emitted;
        let tracks = &self.sources[idx % self.sources.len()];
        let (lo, hi) = self.cfg.shot_range;
        let drawn = self.rng.random_range(lo..=hi);
        let longest = tracks.last().expect("non-empty source").frames.len();
        let n_shots = drawn.min(longest - 1);
        // sorted by length: eligible tracks form a suffix
        let first = tracks.partition_point(|t| t.frames.len() < n_shots + 1);
        let track = tracks[first + self.rng.random_range(0..tracks.len() - first)];
        let naming = if self.rng.random_bool(self.cfg.pseudo_fraction) { Naming::Pseudo } else { Naming::Real };
        let seed = self.rng.next_u64();
        let mut conv = build_conversation(track, n_shots, naming, self.pool, seed)?;
        conv.conv_id = format!("mix-{idx:07}");
        Ok(conv)
    }
}

impl Iterator for MixStream<'_> {
    type Item = Result<Conversation, ConvoError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.emitted >= self.cfg.count {
            return None;
        }
        let out = self.next_conversation();
        self.emitted += 1;
        Some(out)
    }
}
