//! Detections, the line-delimited detection/ground-truth stream format, frame
//! sources and the external inference adapter.
//!
//! Stream layout (`.dets.jsonl` / `.gt.jsonl`):
//!
//! ```text
//! {"schema":1,"width":1280,"height":720,"fps":30}
//! {"frame":0,"cls":0,"score":0.91,"box":[10,10,50,30]}
//! ```
//!
//! The header line is optional. Ground-truth lines carry `gt_id` instead of
//! `score`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{BBox, MaskRaster};

pub type FrameIndex = u32;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("mask is {mask_w}x{mask_h} but frames are {frame_w}x{frame_h}")]
    MaskMismatch { mask_w: u32, mask_h: u32, frame_w: u32, frame_h: u32 },
    #[error("inference adapter unavailable: {0}")]
    AdapterUnavailable(String),
    #[error("inference adapter failed after frame {last_frame:?}: {msg}")]
    AdapterRecord { last_frame: Option<FrameIndex>, msg: String },
    #[error("frame source: {0}")]
    Source(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Vehicle categories with their stable on-disk ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum VehicleClass {
    Car,
    Bus,
    Truck,
    Motorcycle,
    Bicycle,
    Other,
}

impl VehicleClass {
    pub const ALL: [VehicleClass; 6] = [
        VehicleClass::Car,
        VehicleClass::Bus,
        VehicleClass::Truck,
        VehicleClass::Motorcycle,
        VehicleClass::Bicycle,
        VehicleClass::Other,
    ];

    pub fn id(self) -> u8 {
        match self {
            VehicleClass::Car => 0,
            VehicleClass::Bus => 1,
            VehicleClass::Truck => 2,
            VehicleClass::Motorcycle => 3,
            VehicleClass::Bicycle => 4,
            VehicleClass::Other => 255,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Some(match id {
            0 => VehicleClass::Car,
            1 => VehicleClass::Bus,
            2 => VehicleClass::Truck,
            3 => VehicleClass::Motorcycle,
            4 => VehicleClass::Bicycle,
            255 => VehicleClass::Other,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            VehicleClass::Car => "car",
            VehicleClass::Bus => "bus",
            VehicleClass::Truck => "truck",
            VehicleClass::Motorcycle => "motorcycle",
            VehicleClass::Bicycle => "bicycle",
            VehicleClass::Other => "other",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl TryFrom<u8> for VehicleClass {
    type Error = String;

    fn try_from(id: u8) -> Result<Self, Self::Error> {
        VehicleClass::from_id(id).ok_or_else(|| format!("unknown class id {id}"))
    }
}

impl From<VehicleClass> for u8 {
    fn from(c: VehicleClass) -> Self {
        c.id()
    }
}

impl std::fmt::Display for VehicleClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: FrameIndex,
    pub cls: VehicleClass,
    pub score: f32,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Header line of a detection or ground-truth stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub schema: u32,
    pub width: u32,
    pub height: u32,
    pub fps: f64,
}

impl StreamHeader {
    pub fn new(width: u32, height: u32, fps: f64) -> Self {
        Self { schema: 1, width, height, fps }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionStream {
    pub header: Option<StreamHeader>,
    pub detections: Vec<Detection>,
}

impl DetectionStream {
    /// Number of frames covered: one past the highest detection frame.
    pub fn frame_span(&self) -> u32 {
        self.detections.iter().map(|d| d.frame + 1).max().unwrap_or(0)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DetLine {
    frame: i64,
    cls: i64,
    score: f64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GtLine {
    frame: i64,
    gt_id: i64,
    cls: i64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

/// One ground-truth annotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub frame: FrameIndex,
    pub gt_id: u32,
    pub cls: VehicleClass,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GtStream {
    pub header: Option<StreamHeader>,
    pub records: Vec<GtRecord>,
}

fn line_err(line: usize, msg: impl Into<String>) -> DetectError {
    DetectError::Line { line, msg: msg.into() }
}

fn is_header(value: &serde_json::Value) -> bool {
    value.get("schema").is_some()
}

/// Shared line walker: calls `on_record` for each non-header line with its
/// 1-based line number.
fn walk_lines<F>(bytes: &[u8], mut on_record: F) -> Result<Option<StreamHeader>, DetectError>
where
    F: FnMut(usize, &str, Option<&StreamHeader>) -> Result<(), DetectError>,
{
    let text = std::str::from_utf8(bytes).map_err(|e| line_err(0, format!("invalid utf-8: {e}")))?;
    let mut header: Option<StreamHeader> = None;
    let mut seen_record = false;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if !seen_record && header.is_none() {
            let value: serde_json::Value = serde_json::from_str(line).map_err(|e| line_err(lineno, e.to_string()))?;
            if is_header(&value) {
                let h: StreamHeader = serde_json::from_value(value).map_err(|e| line_err(lineno, e.to_string()))?;
                if h.schema != 1 {
                    return Err(line_err(lineno, format!("unsupported schema {}", h.schema)));
                }
                if h.width == 0 || h.height == 0 {
                    return Err(line_err(lineno, "frame dimensions must be positive"));
                }
                header = Some(h);
                continue;
            }
        }
        seen_record = true;
        on_record(lineno, line, header.as_ref())?;
    }
    Ok(header)
}

fn checked_frame(lineno: usize, frame: i64) -> Result<FrameIndex, DetectError> {
    u32::try_from(frame).map_err(|_| line_err(lineno, format!("frame index {frame} out of range")))
}

fn checked_class(lineno: usize, cls: i64) -> Result<VehicleClass, DetectError> {
    u8::try_from(cls)
        .ok()
        .and_then(VehicleClass::from_id)
        .ok_or_else(|| line_err(lineno, format!("unknown class id {cls}")))
}

fn checked_box(lineno: usize, raw: [f64; 4], header: Option<&StreamHeader>) -> Result<BBox, DetectError> {
    let [x, y, w, h] = raw;
    let bbox = BBox::new(x, y, w, h).map_err(|e| line_err(lineno, e.to_string()))?;
    match header {
        Some(hd) => bbox
            .clip(hd.width as f64, hd.height as f64)
            .ok_or_else(|| line_err(lineno, "box lies entirely outside the frame")),
        None => Ok(bbox),
    }
}

/// Parses a detection stream. Boxes are clipped to the header's frame size.
/// The result is stably sorted by frame.
pub fn parse_detection_stream(bytes: &[u8]) -> Result<DetectionStream, DetectError> {
    let mut detections = Vec::new();
    let header = walk_lines(bytes, |lineno, line, header| {
        let raw: DetLine = serde_json::from_str(line).map_err(|e| line_err(lineno, e.to_string()))?;
        if !(0.0..=1.0).contains(&raw.score) {
            return Err(line_err(lineno, format!("score {} outside [0, 1]", raw.score)));
        }
        detections.push(Detection {
            frame: checked_frame(lineno, raw.frame)?,
            cls: checked_class(lineno, raw.cls)?,
            score: raw.score as f32,
            bbox: checked_box(lineno, raw.bbox, header)?,
        });
        Ok(())
    })?;
    detections.sort_by_key(|d| d.frame);
    Ok(DetectionStream { header, detections })
}

/// Parses a ground-truth stream (same layout, `gt_id` instead of `score`).
pub fn parse_gt_stream(bytes: &[u8]) -> Result<GtStream, DetectError> {
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    let header = walk_lines(bytes, |lineno, line, header| {
        let raw: GtLine = serde_json::from_str(line).map_err(|e| line_err(lineno, e.to_string()))?;
        let frame = checked_frame(lineno, raw.frame)?;
        let gt_id =
            u32::try_from(raw.gt_id).map_err(|_| line_err(lineno, format!("gt_id {} out of range", raw.gt_id)))?;
        if !seen.insert((frame, gt_id)) {
            return Err(line_err(lineno, format!("duplicate gt_id {gt_id} in frame {frame}")));
        }
        records.push(GtRecord {
            frame,
            gt_id,
            cls: checked_class(lineno, raw.cls)?,
            bbox: checked_box(lineno, raw.bbox, header)?,
        });
        Ok(())
    })?;
    records.sort_by_key(|r| r.frame);
    Ok(GtStream { header, records })
}

/// Formats a number the way fixtures write it: integers without a fraction,
/// everything else in shortest round-trip form.
pub(crate) fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn fmt_box(b: &BBox) -> String {
    let [x, y, w, h] = b.to_array();
    format!("[{},{},{},{}]", fmt_num(x), fmt_num(y), fmt_num(w), fmt_num(h))
}

fn header_line(h: &StreamHeader) -> String {
    format!("{{\"schema\":{},\"width\":{},\"height\":{},\"fps\":{}}}\n", h.schema, h.width, h.height, fmt_num(h.fps))
}

/// Canonical serialization, the inverse of [`parse_detection_stream`].
pub fn write_detection_stream(stream: &DetectionStream) -> String {
    let mut out = String::new();
    if let Some(h) = &stream.header {
        out.push_str(&header_line(h));
    }
    for d in &stream.detections {
        let _ = writeln!(
            out,
            "{{\"frame\":{},\"cls\":{},\"score\":{},\"box\":{}}}",
            d.frame,
            d.cls.id(),
            d.score,
            fmt_box(&d.bbox)
        );
    }
    out
}

pub fn write_gt_stream(stream: &GtStream) -> String {
    let mut out = String::new();
    if let Some(h) = &stream.header {
        out.push_str(&header_line(h));
    }
    for r in &stream.records {
        let _ = writeln!(
            out,
            "{{\"frame\":{},\"gt_id\":{},\"cls\":{},\"box\":{}}}",
            r.frame,
            r.gt_id,
            r.cls.id(),
            fmt_box(&r.bbox)
        );
    }
    out
}

fn default_allowlist() -> BTreeSet<VehicleClass> {
    [VehicleClass::Car, VehicleClass::Bus, VehicleClass::Truck, VehicleClass::Motorcycle, VehicleClass::Bicycle]
        .into_iter()
        .collect()
}

fn default_score_threshold() -> f32 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    #[serde(default = "default_score_threshold")]
    pub score_threshold: f32,
    #[serde(default = "default_allowlist")]
    pub class_allowlist: BTreeSet<VehicleClass>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { score_threshold: default_score_threshold(), class_allowlist: default_allowlist() }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(format!("score_threshold {} outside [0, 1]", self.score_threshold));
        }
        Ok(())
    }
}

/// High- and low-confidence views of one set of detections.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bands {
    pub high: Vec<Detection>,
    pub low: Vec<Detection>,
}

fn check_mask(mask: Option<&MaskRaster>, frame_size: (u32, u32)) -> Result<(), DetectError> {
    match mask {
        Some(m) if (m.width(), m.height()) != frame_size => Err(DetectError::MaskMismatch {
            mask_w: m.width(),
            mask_h: m.height(),
            frame_w: frame_size.0,
            frame_h: frame_size.1,
        }),
        _ => Ok(()),
    }
}

fn admissible(d: &Detection, cfg: &DetectorConfig, mask: Option<&MaskRaster>) -> bool {
    cfg.class_allowlist.contains(&d.cls) && !mask.is_some_and(|m| m.excludes_point(d.bbox.center()))
}

/// Keeps detections with `score >= threshold`, an allowed class and a box
/// center outside the exclusion mask. Order is preserved.
pub fn filter_detections(
    dets: &[Detection],
    cfg: &DetectorConfig,
    mask: Option<&MaskRaster>,
    frame_size: (u32, u32),
) -> Result<Vec<Detection>, DetectError> {
    check_mask(mask, frame_size)?;
    Ok(dets.iter().filter(|d| d.score >= cfg.score_threshold && admissible(d, cfg, mask)).copied().collect())
}

/// Splits admissible detections into the high band (`score >= threshold`)
/// and the low band (`score_low <= score < threshold`).
pub fn split_bands(
    dets: &[Detection],
    cfg: &DetectorConfig,
    mask: Option<&MaskRaster>,
    frame_size: (u32, u32),
    score_low: f32,
) -> Result<Bands, DetectError> {
    check_mask(mask, frame_size)?;
    let mut bands = Bands::default();
    for d in dets.iter().filter(|d| admissible(d, cfg, mask)) {
        if d.score >= cfg.score_threshold {
            bands.high.push(*d);
        } else if d.score >= score_low {
            bands.low.push(*d);
        }
    }
    Ok(bands)
}

/// Groups frame-sorted detections into `frame_count` per-frame buckets.
/// Detections beyond `frame_count` are dropped.
pub fn group_by_frame(dets: &[Detection], frame_count: u32) -> Vec<Vec<Detection>> {
    let mut frames = vec![Vec::new(); frame_count as usize];
    for d in dets {
        if let Some(bucket) = frames.get_mut(d.frame as usize) {
            bucket.push(*d);
        }
    }
    frames
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VideoInfo {
    pub frame_count: u32,
    pub width: u32,
    pub height: u32,
    pub nominal_fps: f64,
}

/// Provider of video frames. Sources may be headless (no pixels).
pub trait FrameSource: Send + Sync {
    fn info(&self) -> VideoInfo;

    /// Whether [`FrameSource::frame`] can return pixels.
    fn has_pixels(&self) -> bool;

    /// RGB raster for a frame, `Ok(None)` for headless sources.
    fn frame(&self, index: FrameIndex) -> Result<Option<RgbImage>, DetectError>;

    /// Filesystem location handed to external tools, if any.
    fn locator(&self) -> Option<&Path> {
        None
    }
}

/// Frame source without pixels, described only by its dimensions.
#[derive(Debug, Clone)]
pub struct HeadlessSource {
    info: VideoInfo,
}

impl HeadlessSource {
    pub fn new(info: VideoInfo) -> Self {
        Self { info }
    }
}

impl FrameSource for HeadlessSource {
    fn info(&self) -> VideoInfo {
        self.info
    }

    fn has_pixels(&self) -> bool {
        false
    }

    fn frame(&self, _index: FrameIndex) -> Result<Option<RgbImage>, DetectError> {
        Ok(None)
    }
}

/// Frames stored as a directory of image files, ordered by file name.
#[derive(Debug)]
pub struct ImageDirSource {
    dir: PathBuf,
    files: Vec<PathBuf>,
    info: VideoInfo,
    // decoding is not reentrant-cheap; keep the last frame around for UI fetches
    last: Mutex<Option<(FrameIndex, RgbImage)>>,
}

impl ImageDirSource {
    pub fn open(dir: impl AsRef<Path>, nominal_fps: f64) -> Result<Self, DetectError> {
        let dir = dir.as_ref().to_path_buf();
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp" | "ppm"))
            })
            .collect();
        files.sort();
        let first = files.first().ok_or_else(|| DetectError::Source(format!("no images in {}", dir.display())))?;
        let (width, height) =
            image::image_dimensions(first).map_err(|e| DetectError::Source(format!("{}: {e}", first.display())))?;
        let info = VideoInfo { frame_count: files.len() as u32, width, height, nominal_fps };
        Ok(Self { dir, files, info, last: Mutex::new(None) })
    }
}

impl FrameSource for ImageDirSource {
    fn info(&self) -> VideoInfo {
        self.info
    }

    fn has_pixels(&self) -> bool {
        true
    }

    fn frame(&self, index: FrameIndex) -> Result<Option<RgbImage>, DetectError> {
        if let Some((i, img)) = self.last.lock().unwrap().as_ref() {
            if *i == index {
                return Ok(Some(img.clone()));
            }
        }
        let path =
            self.files.get(index as usize).ok_or_else(|| DetectError::Source(format!("frame {index} out of range")))?;
        let img = image::open(path).map_err(|e| DetectError::Source(format!("{}: {e}", path.display())))?.to_rgb8();
        if img.dimensions() != (self.info.width, self.info.height) {
            return Err(DetectError::Source(format!("frame {index} has different dimensions")));
        }
        *self.last.lock().unwrap() = Some((index, img.clone()));
        Ok(Some(img))
    }

    fn locator(&self) -> Option<&Path> {
        Some(&self.dir)
    }
}

/// Frames held in memory; used for synthetic scenes.
#[derive(Debug, Clone)]
pub struct MemorySource {
    frames: Vec<RgbImage>,
    nominal_fps: f64,
}

impl MemorySource {
    pub fn new(frames: Vec<RgbImage>, nominal_fps: f64) -> Result<Self, DetectError> {
        let first = frames.first().ok_or_else(|| DetectError::Source("no frames".into()))?;
        let dims = first.dimensions();
        if frames.iter().any(|f| f.dimensions() != dims) {
            return Err(DetectError::Source("frame dimensions differ".into()));
        }
        Ok(Self { frames, nominal_fps })
    }
}

impl FrameSource for MemorySource {
    fn info(&self) -> VideoInfo {
        let (width, height) = self.frames[0].dimensions();
        VideoInfo { frame_count: self.frames.len() as u32, width, height, nominal_fps: self.nominal_fps }
    }

    fn has_pixels(&self) -> bool {
        true
    }

    fn frame(&self, index: FrameIndex) -> Result<Option<RgbImage>, DetectError> {
        self.frames
            .get(index as usize)
            .cloned()
            .map(Some)
            .ok_or_else(|| DetectError::Source(format!("frame {index} out of range")))
    }
}

/// External inference program. It is spawned with `args`; the environment
/// carries `AIV_MODEL`, `AIV_SOURCE` (when the frame source has a location),
/// `AIV_WIDTH`, `AIV_HEIGHT` and `AIV_FRAME_COUNT`. It must print a detection
/// stream on stdout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
    pub model: PathBuf,
}

/// Runs the adapter to completion and returns its detections, sorted by
/// frame exactly like a parsed detection file.
pub fn run_inference_adapter(source: &dyn FrameSource, spec: &AdapterSpec) -> Result<Vec<Detection>, DetectError> {
    if !spec.model.exists() {
        return Err(DetectError::AdapterUnavailable(format!("model artifact {} not found", spec.model.display())));
    }
    let info = source.info();
    let mut cmd = Command::new(&spec.program);
    cmd.args(&spec.args)
        .env("AIV_MODEL", &spec.model)
        .env("AIV_WIDTH", info.width.to_string())
        .env("AIV_HEIGHT", info.height.to_string())
        .env("AIV_FRAME_COUNT", info.frame_count.to_string())
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if let Some(loc) = source.locator() {
        cmd.env("AIV_SOURCE", loc);
    }
    let mut child =
        cmd.spawn().map_err(|e| DetectError::AdapterUnavailable(format!("{}: {e}", spec.program.display())))?;
    let mut stdout = Vec::new();
    child.stdout.take().expect("piped stdout").read_to_end(&mut stdout)?;
    let mut stderr = String::new();
    if let Some(mut err) = child.stderr.take() {
        let _ = err.read_to_string(&mut stderr);
    }
    let status = child.wait()?;

    let mut detections = Vec::new();
    let mut last_frame: Option<FrameIndex> = None;
    let parsed = walk_lines(&stdout, |lineno, line, _| {
        let single = parse_detection_stream(line.as_bytes())
            .map_err(|e| DetectError::AdapterRecord { last_frame, msg: format!("record {lineno}: {e}") })?;
        for mut d in single.detections {
            d.bbox = d.bbox.clip(info.width as f64, info.height as f64).ok_or_else(|| DetectError::AdapterRecord {
                last_frame,
                msg: format!("record {lineno}: box outside frame"),
            })?;
            if d.frame >= info.frame_count {
                return Err(DetectError::AdapterRecord {
                    last_frame,
                    msg: format!("record {lineno}: frame {} beyond source length {}", d.frame, info.frame_count),
                });
            }
            last_frame = Some(last_frame.map_or(d.frame, |f| f.max(d.frame)));
            detections.push(d);
        }
        Ok(())
    });
    match parsed {
        Err(DetectError::Line { line, msg }) => {
            return Err(DetectError::AdapterRecord { last_frame, msg: format!("record {line}: {msg}") })
        }
        Err(e) => return Err(e),
        Ok(_) => {}
    }
    if !status.success() {
        return Err(DetectError::AdapterRecord {
            last_frame,
            msg: format!("adapter exited with {status}: {}", stderr.trim()),
        });
    }
    detections.sort_by_key(|d| d.frame);
    Ok(detections)
}
