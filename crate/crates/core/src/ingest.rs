//! Annotation ingestion: tracking ground truth, COCO-like video annotations
//! and segmentation benchmarks are normalized into [`Track`]s, which are
//! grouped into a [`DatasetManifest`].
//!
//! The canonical interchange format is newline-delimited JSON, one track per
//! line (see [`write_manifest`] / [`read_manifest`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{mask_to_bbox, BBox, GeometryError, LabelMask, Space};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("track {track_id}: frame index {index} does not increase at position {position}")]
    NonMonotonicFrames { track_id: String, index: u64, position: usize },
    #[error("{0}: no usable frames")]
    EmptyTrack(PathBuf),
    #[error("mask {mask} is {mask_dims:?} but image {image} is {image_dims:?}")]
    MaskImageMismatch {
        image: PathBuf,
        mask: PathBuf,
        image_dims: (u32, u32),
        mask_dims: (u32, u32),
    },
    #[error("{0}: {1}")]
    Image(PathBuf, #[source] image::ImageError),
    #[error("{0}: {1}")]
    Json(PathBuf, #[source] serde_json::Error),
    #[error("need at least 2 categories to split, found {0}")]
    TooFewCategories(usize),
    #[error("split ratio {0} outside (0, 1)")]
    InvalidRatio(f64),
    #[error("track {track_id}: {reason}")]
    InvalidTrack { track_id: String, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Upstream dataset a track came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Source {
    Lasot,
    Got,
    Tao,
    Pdm,
    Perseg,
    Custom,
}

impl Source {
    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Lasot => "LASOT",
            Source::Got => "GOT",
            Source::Tao => "TAO",
            Source::Pdm => "PDM",
            Source::Perseg => "PERSEG",
            Source::Custom => "CUSTOM",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One annotated frame of a track. The box is in pixel space of the frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image_ref: String,
    pub frame_index: u64,
    pub width: u32,
    pub height: u32,
    pub bbox: BBox,
}

/// Ordered frames of one object instance in one video.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub track_id: String,
    pub video_id: String,
    pub source: Source,
    pub category: String,
    pub frames: Vec<Frame>,
}

impl Track {
    /// Checks the track invariants: at least one frame, strictly increasing
    /// frame indices, boxes in the pixel space of their frame.
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.frames.is_empty() {
            return Err(IngestError::InvalidTrack {
                track_id: self.track_id.clone(),
                reason: "no frames".into(),
            });
        }
        if self.category.is_empty() {
            return Err(IngestError::InvalidTrack {
                track_id: self.track_id.clone(),
                reason: "empty category".into(),
            });
        }
        for (pos, pair) in self.frames.windows(2).enumerate() {
            if pair[1].frame_index <= pair[0].frame_index {
                return Err(IngestError::NonMonotonicFrames {
                    track_id: self.track_id.clone(),
                    index: pair[1].frame_index,
                    position: pos + 1,
                });
            }
        }
        for f in &self.frames {
            let expected = Space::Pixel { width: f.width, height: f.height };
            if f.bbox.space() != expected {
                return Err(IngestError::InvalidTrack {
                    track_id: self.track_id.clone(),
                    reason: format!("frame {} box not in {:?}", f.frame_index, expected),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub category_count: usize,
    pub mean_objects_per_image: f64,
    pub record_count: usize,
}

/// Named collection of tracks. Categories and statistics are always derived
/// from the tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    name: String,
    tracks: Vec<Track>,
    categories: BTreeSet<String>,
    stats: ManifestStats,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, tracks: Vec<Track>) -> Self {
        let categories: BTreeSet<String> = tracks.iter().map(|t| t.category.clone()).collect();
        let mut objects = 0usize;
        let mut images = BTreeSet::new();
        for f in tracks.iter().flat_map(|t| &t.frames) {
            objects += 1;
            images.insert(f.image_ref.as_str());
        }
        let mean = if images.is_empty() { 0.0 } else { objects as f64 / images.len() as f64 };
        let stats = ManifestStats {
            category_count: categories.len(),
            mean_objects_per_image: mean,
            record_count: tracks.len(),
        };
        Self { name: name.into(), tracks, categories, stats }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }
    pub fn categories(&self) -> &BTreeSet<String> {
        &self.categories
    }
    pub fn stats(&self) -> &ManifestStats {
        &self.stats
    }

    pub fn tracks_of<'a>(&'a self, category: &'a str) -> impl Iterator<Item = &'a Track> + 'a {
        self.tracks.iter().filter(move |t| t.category == category)
    }
}

/// Non-fatal anomalies encountered while loading.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestWarnings {
    /// Boxes that exceeded the image and were clamped.
    pub clamped_boxes: usize,
    /// Frames without a visible object (zero-size or NaN boxes).
    pub absent_frames: usize,
}

impl IngestWarnings {
    fn merge(&mut self, other: IngestWarnings) {
        self.clamped_boxes += other.clamped_boxes;
        self.absent_frames += other.absent_frames;
    }
}

// ---------------------------------------------------------------------------
// canonical manifest format

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    image_ref: String,
    frame_index: u64,
    width: u32,
    height: u32,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct TrackRecord {
    track_id: String,
    video_id: String,
    source: Source,
    category: String,
    frames: Vec<FrameRecord>,
}

impl Track {
    pub fn to_json_line(&self) -> String {
        let rec = TrackRecord {
            track_id: self.track_id.clone(),
            video_id: self.video_id.clone(),
            source: self.source,
            category: self.category.clone(),
            frames: self
                .frames
                .iter()
                .map(|f| FrameRecord {
                    image_ref: f.image_ref.clone(),
                    frame_index: f.frame_index,
                    width: f.width,
                    height: f.height,
                    bbox: f.bbox.corners(),
                })
                .collect(),
        };
        serde_json::to_string(&rec).expect("track serializes")
    }

    /// Parses one canonical manifest line. `line` is 1-based and only used
    /// for error reporting.
    pub fn from_json_line(text: &str, line: usize) -> Result<Track, IngestError> {
        let malformed = |reason: String| IngestError::MalformedLine { line, reason };
        let rec: TrackRecord = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
        let mut frames = Vec::with_capacity(rec.frames.len());
        for f in rec.frames {
            let space = Space::pixel(f.width, f.height).map_err(|e| malformed(e.to_string()))?;
            let [x0, y0, x1, y1] = f.bbox;
            let bbox = BBox::new(x0, y0, x1, y1, space).map_err(|e| malformed(e.to_string()))?;
            frames.push(Frame {
                image_ref: f.image_ref,
                frame_index: f.frame_index,
                width: f.width,
                height: f.height,
                bbox,
            });
        }
        let track = Track {
            track_id: rec.track_id,
            video_id: rec.video_id,
            source: rec.source,
            category: rec.category,
            frames,
        };
        track.validate()?;
        Ok(track)
    }
}

pub fn write_manifest<W: Write>(manifest: &DatasetManifest, mut out: W) -> std::io::Result<()> {
    for t in manifest.tracks() {
        writeln!(out, "{}", t.to_json_line())?;
    }
    Ok(())
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), IngestError> {
    let io = |e| IngestError::Io(path.to_path_buf(), e);
    let file = fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    write_manifest(manifest, &mut w).map_err(io)?;
    w.flush().map_err(io)
}

/// Reads a canonical manifest; the manifest is named after the file stem.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest, IngestError> {
    let io = |e| IngestError::Io(path.to_path_buf(), e);
    let reader = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut tracks = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        tracks.push(Track::from_json_line(&line, i + 1)?);
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(DatasetManifest::new(name, tracks))
}

// ---------------------------------------------------------------------------
// per-video ground-truth text files

/// Layout of a per-video ground-truth text file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackFormat {
    /// LaSOT `groundtruth.txt`: one `x,y,w,h` line per frame.
    Lasot,
    /// GOT-10k `groundtruth.txt`: same layout; `nan` rows mark absent frames.
    Got,
    /// `frame,x,y,w,h` lines with explicit frame numbers.
    IndexedXywh,
}

/// Everything a text ground-truth file does not say about itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackFileConfig {
    pub format: TrackFormat,
    pub source: Source,
    pub track_id: String,
    pub video_id: String,
    pub category: String,
    pub width: u32,
    pub height: u32,
    /// Directory (or URL prefix) holding the frame images.
    pub image_dir: String,
    pub image_ext: String,
    /// Zero-padding width of the image file number.
    pub pad: usize,
    /// File number of frame index 0 (LaSOT and GOT count from 1).
    pub first_number: u64,
}

impl TrackFileConfig {
    pub fn image_ref(&self, frame_index: u64) -> String {
        format!(
            "{}/{:0pad$}.{}",
            self.image_dir.trim_end_matches('/'),
            self.first_number + frame_index,
            self.image_ext,
            pad = self.pad
        )
    }

    /// Config for a LaSOT sequence directory `<root>/<category>/<video>/`
    /// holding `groundtruth.txt` and `img/00000001.jpg, ...`. Image size is
    /// read from the first frame.
    pub fn lasot(video_dir: &Path) -> Result<Self, IngestError> {
        let video_id = dir_name(video_dir);
        let category = video_dir.parent().map(dir_name).unwrap_or_default();
        let image_dir = video_dir.join("img");
        let first = image_dir.join("00000001.jpg");
        let (width, height) =
            image::image_dimensions(&first).map_err(|e| IngestError::Image(first.clone(), e))?;
        Ok(Self {
            format: TrackFormat::Lasot,
            source: Source::Lasot,
            track_id: video_id.clone(),
            video_id,
            category,
            width,
            height,
            image_dir: image_dir.to_string_lossy().into_owned(),
            image_ext: "jpg".into(),
            pad: 8,
            first_number: 1,
        })
    }

    /// Config for a GOT-10k sequence directory holding `groundtruth.txt`,
    /// `meta_info.ini` (for `object_class`) and `00000001.jpg, ...`.
    pub fn got10k(seq_dir: &Path) -> Result<Self, IngestError> {
        let video_id = dir_name(seq_dir);
        let meta = seq_dir.join("meta_info.ini");
        let text = fs::read_to_string(&meta).map_err(|e| IngestError::Io(meta.clone(), e))?;
        let category = text
            .lines()
            .filter_map(|l| l.split_once(':'))
            .find(|(k, _)| k.trim() == "object_class")
            .map(|(_, v)| v.trim().to_string())
            .ok_or_else(|| IngestError::MalformedLine { line: 0, reason: "meta_info.ini lacks object_class".into() })?;
        let first = seq_dir.join("00000001.jpg");
        let (width, height) =
            image::image_dimensions(&first).map_err(|e| IngestError::Image(first.clone(), e))?;
        Ok(Self {
            format: TrackFormat::Got,
            source: Source::Got,
            track_id: video_id.clone(),
            video_id,
            category,
            width,
            height,
            image_dir: seq_dir.to_string_lossy().into_owned(),
            image_ext: "jpg".into(),
            pad: 8,
            first_number: 1,
        })
    }
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect()
}

/// Loads a per-video ground-truth text file into a normalized track.
///
/// `x,y,w,h` rows become corner boxes in the pixel space of the video.
/// Boxes leaving the frame are clamped; rows with zero size or NaN are
/// absent frames and skipped. Both are counted in the returned warnings.
pub fn load_track_file(path: &Path, cfg: &TrackFileConfig) -> Result<(Track, IngestWarnings), IngestError> {
    let text = fs::read_to_string(path).map_err(|e| IngestError::Io(path.to_path_buf(), e))?;
    let (track, warnings) = parse_track_text(&text, cfg)?;
    if track.frames.is_empty() {
        return Err(IngestError::EmptyTrack(path.to_path_buf()));
    }
    Ok((track, warnings))
}

/// Text-level half of [`load_track_file`].
pub fn parse_track_text(text: &str, cfg: &TrackFileConfig) -> Result<(Track, IngestWarnings), IngestError> {
    let space = Space::pixel(cfg.width, cfg.height)?;
    let mut lines: Vec<&str> = text.lines().collect();
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    if lines.is_empty() {
        return Err(IngestError::MalformedLine { line: 1, reason: "empty file".into() });
    }
    let expected = match cfg.format {
        TrackFormat::Lasot | TrackFormat::Got => 4,
        TrackFormat::IndexedXywh => 5,
    };

    let mut warnings = IngestWarnings::default();
    let mut frames = Vec::with_capacity(lines.len());
    for (i, raw) in lines.iter().enumerate() {
        let line = i + 1;
        let fields = split_fields(raw);
        if fields.len() != expected {
            return Err(IngestError::MalformedLine {
                line,
                reason: format!("expected {expected} fields, found {}", fields.len()),
            });
        }
        let mut nums = Vec::with_capacity(expected);
        for f in &fields {
            let v: f64 = f
                .parse()
                .map_err(|_| IngestError::MalformedLine { line, reason: format!("not a number: {f:?}") })?;
            nums.push(v);
        }
        let (frame_index, xywh) = match cfg.format {
            TrackFormat::IndexedXywh => {
                let idx = nums[0];
                if !(idx.is_finite() && idx >= 0.0 && idx.fract() == 0.0) {
                    return Err(IngestError::MalformedLine { line, reason: format!("bad frame number {idx}") });
                }
                (idx as u64, [nums[1], nums[2], nums[3], nums[4]])
            }
            _ => (i as u64, [nums[0], nums[1], nums[2], nums[3]]),
        };
        let [x, y, w, h] = xywh;
        if xywh.iter().any(|v| v.is_nan()) || w == 0.0 || h == 0.0 {
            warnings.absent_frames += 1;
            continue;
        }
        if xywh.iter().any(|v| !v.is_finite()) || w < 0.0 || h < 0.0 {
            return Err(IngestError::MalformedLine { line, reason: format!("invalid box {xywh:?}") });
        }
        let (bbox, clamped) = BBox::clamped(x, y, x + w, y + h, space)?;
        if clamped {
            warnings.clamped_boxes += 1;
        }
        if let Some(prev) = frames.last().map(|f: &Frame| f.frame_index) {
            if frame_index <= prev {
                return Err(IngestError::NonMonotonicFrames {
                    track_id: cfg.track_id.clone(),
                    index: frame_index,
                    position: frames.len(),
                });
            }
        }
        frames.push(Frame {
            image_ref: cfg.image_ref(frame_index),
            frame_index,
            width: cfg.width,
            height: cfg.height,
            bbox,
        });
    }
    if warnings.clamped_boxes > 0 {
        log::warn!("track {}: clamped {} boxes to image bounds", cfg.track_id, warnings.clamped_boxes);
    }
    let track = Track {
        track_id: cfg.track_id.clone(),
        video_id: cfg.video_id.clone(),
        source: cfg.source,
        category: cfg.category.clone(),
        frames,
    };
    Ok((track, warnings))
}

// ---------------------------------------------------------------------------
// TAO (COCO-like video annotations)

#[derive(Deserialize)]
struct TaoVideo {
    id: u64,
    name: String,
}

#[derive(Deserialize)]
struct TaoImage {
    id: u64,
    video_id: u64,
    file_name: String,
    frame_index: u64,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct TaoAnnotation {
    image_id: u64,
    track_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct TaoCategory {
    id: u64,
    name: String,
}

#[derive(Deserialize)]
struct TaoFile {
    videos: Vec<TaoVideo>,
    images: Vec<TaoImage>,
    annotations: Vec<TaoAnnotation>,
    categories: Vec<TaoCategory>,
}

/// Loads a TAO-style annotation file (COCO layout extended with `videos`,
/// per-image `video_id`/`frame_index` and per-annotation `track_id`). Each
/// track id becomes one [`Track`]; `image_prefix` is prepended to image
/// file names.
pub fn load_tao(path: &Path, image_prefix: &str) -> Result<(DatasetManifest, IngestWarnings), IngestError> {
    let text = fs::read_to_string(path).map_err(|e| IngestError::Io(path.to_path_buf(), e))?;
    let file: TaoFile = serde_json::from_str(&text).map_err(|e| IngestError::Json(path.to_path_buf(), e))?;

    let videos: BTreeMap<u64, &str> = file.videos.iter().map(|v| (v.id, v.name.as_str())).collect();
    let images: BTreeMap<u64, &TaoImage> = file.images.iter().map(|i| (i.id, i)).collect();
    let categories: BTreeMap<u64, &str> = file.categories.iter().map(|c| (c.id, c.name.as_str())).collect();

    let mut by_track: BTreeMap<u64, Vec<&TaoAnnotation>> = BTreeMap::new();
    for a in &file.annotations {
        by_track.entry(a.track_id).or_default().push(a);
    }

    let missing = |what: &str, id: u64| IngestError::InvalidTrack {
        track_id: String::new(),
        reason: format!("unknown {what} id {id}"),
    };
    let mut warnings = IngestWarnings::default();
    let mut tracks = Vec::with_capacity(by_track.len());
    for (track_id, anns) in by_track {
        let first = anns[0];
        let category = *categories.get(&first.category_id).ok_or_else(|| missing("category", first.category_id))?;
        let mut rows = Vec::with_capacity(anns.len());
        for a in anns {
            let img = *images.get(&a.image_id).ok_or_else(|| missing("image", a.image_id))?;
            rows.push((img, a));
        }
        rows.sort_by_key(|(img, _)| img.frame_index);
        let video = rows[0].0.video_id;
        let video_id = videos.get(&video).map(|s| s.to_string()).unwrap_or_else(|| video.to_string());

        let mut frames = Vec::with_capacity(rows.len());
        let mut local = IngestWarnings::default();
        for (img, a) in rows {
            let [x, y, w, h] = a.bbox;
            if a.bbox.iter().any(|v| v.is_nan()) || w <= 0.0 || h <= 0.0 {
                local.absent_frames += 1;
                continue;
            }
            let space = Space::pixel(img.width, img.height)?;
            let (bbox, clamped) = BBox::clamped(x, y, x + w, y + h, space)?;
            local.clamped_boxes += clamped as usize;
            frames.push(Frame {
                image_ref: format!("{image_prefix}{}", img.file_name),
                frame_index: img.frame_index,
                width: img.width,
                height: img.height,
                bbox,
            });
        }
        warnings.merge(local);
        if frames.is_empty() {
            continue;
        }
        let track = Track {
            track_id: format!("{video_id}#{track_id}"),
            video_id,
            source: Source::Tao,
            category: category.to_string(),
            frames,
        };
        track.validate()?;
        tracks.push(track);
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok((DatasetManifest::new(name, tracks), warnings))
}

// ---------------------------------------------------------------------------
// segmentation benchmarks

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegFormat {
    Pdm,
    Perseg,
}

/// Directory layout of a segmentation benchmark:
/// `<root>/<images_dir>/<category>/<stem>.<ext>` paired with
/// `<root>/<masks_dir>/<category>/<stem>.<mask_ext>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegLayout {
    pub images_dir: String,
    pub masks_dir: String,
    pub image_exts: Vec<String>,
    pub mask_ext: String,
    /// Treat every non-zero mask value as one object (binary masks).
    pub binarize: bool,
}

impl SegLayout {
    pub fn for_format(format: SegFormat) -> Self {
        match format {
            SegFormat::Perseg => Self {
                images_dir: "Images".into(),
                masks_dir: "Annotations".into(),
                image_exts: vec!["jpg".into(), "png".into()],
                mask_ext: "png".into(),
                binarize: true,
            },
            SegFormat::Pdm => Self {
                images_dir: "images".into(),
                masks_dir: "masks".into(),
                image_exts: vec!["jpg".into(), "png".into()],
                mask_ext: "png".into(),
                binarize: false,
            },
        }
    }
}

/// Reads an indexed mask. Gray masks use the gray value as label; color
/// masks use the packed RGB value, so each distinct color is one object.
pub fn read_label_mask(path: &Path, binarize: bool) -> Result<LabelMask, IngestError> {
    let img = image::open(path).map_err(|e| IngestError::Image(path.to_path_buf(), e))?;
    let (w, h) = (img.width(), img.height());
    let mut labels: Vec<u32> = match &img {
        image::DynamicImage::ImageLuma8(g) => g.pixels().map(|p| p.0[0] as u32).collect(),
        image::DynamicImage::ImageLuma16(g) => g.pixels().map(|p| p.0[0] as u32).collect(),
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| ((p.0[0] as u32) << 16) | ((p.0[1] as u32) << 8) | p.0[2] as u32)
            .collect(),
    };
    if binarize {
        for l in labels.iter_mut() {
            *l = (*l != 0) as u32;
        }
    }
    Ok(LabelMask::new(w, h, labels)?)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| IngestError::Io(dir.to_path_buf(), e))? {
        out.push(e.map_err(|e| IngestError::Io(dir.to_path_buf(), e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Loads a PDM/PerSeg-style benchmark. Every labeled object in every image
/// becomes a single-frame track whose box is the tight mask box.
pub fn load_segmentation_benchmark(root: &Path, format: SegFormat) -> Result<DatasetManifest, IngestError> {
    load_segmentation_with_layout(root, format, &SegLayout::for_format(format))
}

pub fn load_segmentation_with_layout(
    root: &Path,
    format: SegFormat,
    layout: &SegLayout,
) -> Result<DatasetManifest, IngestError> {
    let source = match format {
        SegFormat::Pdm => Source::Pdm,
        SegFormat::Perseg => Source::Perseg,
    };
    let images_root = root.join(&layout.images_dir);
    let masks_root = root.join(&layout.masks_dir);
    let mut tracks = Vec::new();

    for cat_dir in sorted_entries(&images_root)?.into_iter().filter(|p| p.is_dir()) {
        let category = dir_name(&cat_dir);
        for image_path in sorted_entries(&cat_dir)? {
            let ext = image_path.extension().map(|e| e.to_string_lossy().to_lowercase()).unwrap_or_default();
            if !layout.image_exts.contains(&ext) {
                continue;
            }
            let stem = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let mask_path = masks_root.join(&category).join(format!("{stem}.{}", layout.mask_ext));
            let image_dims = image::image_dimensions(&image_path)
                .map_err(|e| IngestError::Image(image_path.clone(), e))?;
            let mask = read_label_mask(&mask_path, layout.binarize)?;
            let mask_dims = (mask.width(), mask.height());
            if mask_dims != image_dims {
                return Err(IngestError::MaskImageMismatch {
                    image: image_path,
                    mask: mask_path,
                    image_dims,
                    mask_dims,
                });
            }
            let video_id = format!("{category}/{stem}");
            for label in mask.object_labels() {
                let bbox = mask_to_bbox(&mask, label)?;
                tracks.push(Track {
                    track_id: format!("{video_id}#{label}"),
                    video_id: video_id.clone(),
                    source,
                    category: category.clone(),
                    frames: vec![Frame {
                        image_ref: image_path.to_string_lossy().into_owned(),
                        frame_index: 0,
                        width: mask.width(),
                        height: mask.height(),
                        bbox,
                    }],
                });
            }
        }
    }
    Ok(DatasetManifest::new(source.as_str().to_lowercase(), tracks))
}

// ---------------------------------------------------------------------------
// category splits

/// Seeded disjoint partition of `manifest`'s categories into train and test;
/// `|train| = floor(ratio * N)`.
pub fn split_categories(
    manifest: &DatasetManifest,
    ratio: f64,
    seed: u64,
) -> Result<(BTreeSet<String>, BTreeSet<String>), IngestError> {
    split_category_set(manifest.categories(), ratio, seed)
}

pub fn split_category_set(
    categories: &BTreeSet<String>,
    ratio: f64,
    seed: u64,
) -> Result<(BTreeSet<String>, BTreeSet<String>), IngestError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(IngestError::InvalidRatio(ratio));
    }
    let n = categories.len();
    if n < 2 {
        return Err(IngestError::TooFewCategories(n));
    }
    let mut order: Vec<&String> = categories.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let cut = (ratio * n as f64).floor() as usize;
    let train = order[..cut].iter().map(|s| s.to_string()).collect();
    let test = order[cut..].iter().map(|s| s.to_string()).collect();
    Ok((train, test))
}
