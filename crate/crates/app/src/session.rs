//! On-disk sessions and the blocking operations on them.
//!
//! A session directory holds everything needed to resume work after a
//! restart:
//!
//! ```text
//! <dir>/config.json   sources, video geometry, tracker and detector config
//! <dir>/state.json    lifecycle state and last progress
//! <dir>/mask.json     exclusion polygons
//! <dir>/zones.json    counting zones
//! <dir>/cache.aiv     tracker output of the last run
//! <dir>/ledgers/      one JSON (and CSV) file per counting run
//! <dir>/report.json   last evaluation report
//! <dir>/gallery/      vehicle templates, when enabled
//! ```
//!
//! The CLI drives these functions directly; the HTTP server wraps them with
//! a state machine and status events.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use aiv_core::cache::{config_hash, CacheError, CacheReader, VideoIdentity};
use aiv_core::counting::{CountMethod, CountResult, CountingError, ZoneConfig};
use aiv_core::detect::{
    parse_detection_stream, parse_gt_stream, run_inference_adapter, AdapterSpec, DetectError, Detection,
    DetectorConfig, FrameSource, HeadlessSource, ImageDirSource, VideoInfo,
};
use aiv_core::gallery::{Gallery, GalleryConfig, SystemClock};
use aiv_core::geom::{rasterize_mask, Polygon};
use aiv_core::metrics::{evaluate, EvalReport, DEFAULT_MATCH_IOU};
use aiv_core::pipeline::{quick_count, run_live, LiveRun, PipelineError, PrecomputedDetections, Progress, RunOutput};
use aiv_core::tracking::TrackerParams;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIG_FILE: &str = "config.json";
pub const STATE_FILE: &str = "state.json";
pub const MASK_FILE: &str = "mask.json";
pub const ZONES_FILE: &str = "zones.json";
pub const CACHE_FILE: &str = "cache.aiv";
pub const LEDGER_DIR: &str = "ledgers";
pub const REPORT_FILE: &str = "report.json";
pub const GALLERY_DIR: &str = "gallery";

/// Suffix of the mask file kept next to a source so later sessions on the
/// same source start with it.
pub const SIDECAR_MASK_SUFFIX: &str = ".mask.json";

const DEFAULT_FPS: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid request: {}", format_fields(.0))]
    Invalid(Vec<FieldError>),
    #[error("source unreadable: {0}")]
    Source(String),
    #[error("session {0} not found")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("no cache for this session; start a run first")]
    NoCache,
    #[error("ground truth covers frame {gt_last} but the cache has {cache_frames} frames")]
    FrameCountMismatch { gt_last: u32, cache_frames: u32 },
    #[error("ground truth {path}: {msg}")]
    GroundTruth { path: String, msg: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Counting(#[from] CountingError),
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_fields(fields: &[FieldError]) -> String {
    fields.iter().map(|f| format!("{}: {}", f.field, f.message)).collect::<Vec<_>>().join("; ")
}

/// Where detections come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectionSource {
    File { path: PathBuf },
    Adapter(AdapterSpec),
}

/// Request to create a session; the JSON body of `POST /api/sessions`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    /// Detection stream file (`.jsonl`).
    #[serde(default)]
    pub detections: Option<PathBuf>,
    /// External inference program, used instead of a detection file.
    #[serde(default)]
    pub adapter: Option<AdapterSpec>,
    /// Directory of frame images, for frame display, appearance matching
    /// and the gallery.
    #[serde(default)]
    pub frames: Option<PathBuf>,
    #[serde(default)]
    pub frame_count: Option<u32>,
    #[serde(default)]
    pub width: Option<u32>,
    #[serde(default)]
    pub height: Option<u32>,
    #[serde(default)]
    pub fps: Option<f64>,
    #[serde(default)]
    pub tracker: TrackerParams,
    #[serde(default)]
    pub detector: DetectorConfig,
    /// Register vehicle templates during runs.
    #[serde(default)]
    pub gallery: bool,
    /// Fixed delay per frame that stands in for model inference.
    #[serde(default)]
    pub simulated_latency_ms: u64,
}

/// Persisted session configuration (`config.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub session_id: String,
    pub detections: DetectionSource,
    #[serde(default)]
    pub frames: Option<PathBuf>,
    pub video: VideoInfo,
    pub tracker: TrackerParams,
    pub detector: DetectorConfig,
    #[serde(default)]
    pub gallery: bool,
    #[serde(default)]
    pub simulated_latency_ms: u64,
    pub created_at: u64,
}

impl SessionConfig {
    pub fn config_hash(&self) -> String {
        config_hash(&self.tracker, &self.detector)
    }

    /// The file or directory a sidecar mask is attached to.
    pub fn mask_anchor(&self) -> Option<&Path> {
        self.frames.as_deref().or(match &self.detections {
            DetectionSource::File { path } => Some(path.as_path()),
            DetectionSource::Adapter(_) => None,
        })
    }

    pub fn frame_source(&self) -> Result<Box<dyn FrameSource>, SessionError> {
        match &self.frames {
            Some(dir) => Ok(Box::new(
                ImageDirSource::open(dir, self.video.nominal_fps).map_err(|e| SessionError::Source(e.to_string()))?,
            )),
            None => Ok(Box::new(HeadlessSource::new(self.video))),
        }
    }

    fn video_identity(&self) -> VideoIdentity {
        let path = self.frames.clone().or(match &self.detections {
            DetectionSource::File { path } => Some(path.clone()),
            DetectionSource::Adapter(a) => Some(a.model.clone()),
        });
        path.and_then(|p| VideoIdentity::of_path(&p).ok()).unwrap_or_else(|| VideoIdentity {
            path: String::new(),
            digest: "unknown".into(),
            length: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionState {
    Created,
    Running,
    Cached,
    Counting,
    Done,
    Failed,
}

/// Persisted lifecycle state (`state.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub state: SessionState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<ProgressRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgressRecord {
    pub frame: u32,
    pub frames_total: u32,
    pub fps: f64,
}

impl From<Progress> for ProgressRecord {
    fn from(p: Progress) -> Self {
        Self { frame: p.frame, frames_total: p.frames_total, fps: p.fps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CountMode {
    /// Re-run detection filtering and tracking with the counters attached.
    Full,
    /// Count from the cache.
    #[default]
    Quick,
}

/// One counting run as stored under `ledgers/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRun {
    pub run: u32,
    pub mode: CountMode,
    pub zones: ZoneConfig,
    pub result: CountResult,
    pub created_at: u64,
}

impl CountRun {
    /// Per-class totals of the run, preferring the finish-line ledger.
    pub fn totals(&self) -> Option<&BTreeMap<aiv_core::VehicleClass, u32>> {
        self.result.finish_line.as_ref().or(self.result.motion_vector.as_ref()).map(|l| l.totals())
    }
}

/// Paths of one session directory.
#[derive(Debug, Clone)]
pub struct SessionDir {
    root: PathBuf,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, SessionError> {
    let bytes =
        fs::read(path).map_err(|e| SessionError::File { path: path.display().to_string(), msg: e.to_string() })?;
    serde_json::from_slice(&bytes)
        .map_err(|e| SessionError::File { path: path.display().to_string(), msg: e.to_string() })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SessionError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("session files serialize");
    bytes.push(b'\n');
    Ok(write_atomic(path, &bytes)?)
}

impl SessionDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn exists(&self) -> bool {
        self.path(CONFIG_FILE).is_file()
    }

    pub fn config(&self) -> Result<SessionConfig, SessionError> {
        read_json(&self.path(CONFIG_FILE))
    }

    pub fn state(&self) -> Result<StateRecord, SessionError> {
        let path = self.path(STATE_FILE);
        if path.exists() {
            read_json(&path)
        } else {
            Ok(StateRecord { state: SessionState::Created, message: None, progress: None })
        }
    }

    pub fn save_state(&self, state: &StateRecord) -> Result<(), SessionError> {
        write_json(&self.path(STATE_FILE), state)
    }

    pub fn mask(&self) -> Result<Vec<Polygon>, SessionError> {
        let path = self.path(MASK_FILE);
        if path.exists() {
            read_json(&path)
        } else {
            Ok(Vec::new())
        }
    }

    pub fn save_mask(&self, mask: &[Polygon]) -> Result<(), SessionError> {
        write_json(&self.path(MASK_FILE), &mask)
    }

    pub fn zones(&self) -> Result<ZoneConfig, SessionError> {
        let path = self.path(ZONES_FILE);
        if path.exists() {
            read_json(&path)
        } else {
            Ok(ZoneConfig::default())
        }
    }

    pub fn save_zones(&self, zones: &ZoneConfig) -> Result<(), SessionError> {
        write_json(&self.path(ZONES_FILE), zones)
    }

    pub fn cache_path(&self) -> PathBuf {
        self.path(CACHE_FILE)
    }

    pub fn has_cache(&self) -> bool {
        self.cache_path().is_file()
    }

    pub fn count_runs(&self) -> Result<Vec<CountRun>, SessionError> {
        let dir = self.path(LEDGER_DIR);
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        files.sort();
        files.iter().map(|p| read_json(p)).collect()
    }

    /// Stores a counting run as `ledgers/run-NNNN.json` plus one CSV per
    /// method, numbering it after the existing runs.
    pub fn save_count_run(
        &self,
        mode: CountMode,
        zones: &ZoneConfig,
        result: CountResult,
    ) -> Result<CountRun, SessionError> {
        let dir = self.path(LEDGER_DIR);
        fs::create_dir_all(&dir)?;
        let run = self.count_runs()?.iter().map(|r| r.run).max().unwrap_or(0) + 1;
        let record = CountRun { run, mode, zones: zones.clone(), result, created_at: aiv_core::cache::unix_millis() };
        for method in [CountMethod::FinishLine, CountMethod::MotionVector] {
            if let Some(l) = record.result.ledger(method) {
                let mut buf = Vec::new();
                l.write_csv(&mut buf)?;
                write_atomic(&dir.join(format!("run-{run:04}-{}.csv", method.as_str())), &buf)?;
            }
        }
        write_json(&dir.join(format!("run-{run:04}.json")), &record)?;
        Ok(record)
    }

    pub fn report(&self) -> Result<Option<EvalReport>, SessionError> {
        let path = self.path(REPORT_FILE);
        if path.exists() {
            read_json(&path).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn gallery_dir(&self) -> PathBuf {
        self.path(GALLERY_DIR)
    }
}

fn program_available(program: &Path) -> bool {
    if program.components().count() > 1 {
        return program.is_file();
    }
    std::env::var_os("PATH")
        .map(|paths| std::env::split_paths(&paths).any(|d| d.join(program).is_file()))
        .unwrap_or(false)
}

fn sidecar_mask_path(anchor: &Path) -> PathBuf {
    let mut s = anchor.as_os_str().to_owned();
    s.push(SIDECAR_MASK_SUFFIX);
    PathBuf::from(s)
}

/// Reads the mask saved next to a source, if any.
pub fn load_sidecar_mask(anchor: &Path) -> Result<Option<Vec<Polygon>>, SessionError> {
    let path = sidecar_mask_path(anchor);
    if path.is_file() {
        read_json(&path).map(Some)
    } else {
        Ok(None)
    }
}

/// Validates a creation request and writes a new session directory at
/// `dir`. Nothing is written when validation fails.
pub fn create_session(dir: &SessionDir, session_id: &str, req: &CreateSession) -> Result<SessionConfig, SessionError> {
    let mut errs: Vec<FieldError> = req
        .tracker
        .validation_errors()
        .into_iter()
        .map(|m| match m.split_once(": ") {
            Some((field, msg)) => FieldError::new(format!("tracker.{field}"), msg),
            None => FieldError::new("tracker", m),
        })
        .collect();
    if let Err(m) = req.detector.validate() {
        errs.push(FieldError::new("detector.score_threshold", m));
    }
    if let Some(fps) = req.fps {
        if !(fps > 0.0 && fps.is_finite()) {
            errs.push(FieldError::new("fps", "must be positive"));
        }
    }
    let detections = match (&req.detections, &req.adapter) {
        (Some(path), None) => Some(DetectionSource::File { path: path.clone() }),
        (None, Some(a)) => Some(DetectionSource::Adapter(a.clone())),
        _ => {
            errs.push(FieldError::new("detections", "give exactly one of detections or adapter"));
            None
        }
    };
    if req.tracker.appearance && req.frames.is_none() {
        errs.push(FieldError::new("tracker.appearance", "appearance matching needs frames"));
    }
    if req.gallery && req.frames.is_none() {
        errs.push(FieldError::new("gallery", "the gallery needs frames"));
    }
    if !errs.is_empty() {
        return Err(SessionError::Invalid(errs));
    }
    let detections = detections.expect("checked above");

    // Resolve video geometry from the frames, then the detection header.
    let fps = req.fps.unwrap_or(DEFAULT_FPS);
    let mut video = match &req.frames {
        Some(dir) => Some(ImageDirSource::open(dir, fps).map_err(|e| SessionError::Source(e.to_string()))?.info()),
        None => None,
    };
    match &detections {
        DetectionSource::File { path } => {
            let bytes = fs::read(path).map_err(|e| SessionError::Source(format!("{}: {e}", path.display())))?;
            let stream =
                parse_detection_stream(&bytes).map_err(|e| SessionError::Source(format!("{}: {e}", path.display())))?;
            if video.is_none() {
                let header = stream.header;
                let (width, height) =
                    match (req.width.or(header.map(|h| h.width)), req.height.or(header.map(|h| h.height))) {
                        (Some(w), Some(h)) => (w, h),
                        _ => {
                            return Err(SessionError::Invalid(vec![FieldError::new(
                                "width",
                                "detection file has no header; give width and height",
                            )]))
                        }
                    };
                video = Some(VideoInfo {
                    frame_count: req.frame_count.unwrap_or(stream.frame_span()),
                    width,
                    height,
                    nominal_fps: req.fps.or(header.map(|h| h.fps)).unwrap_or(DEFAULT_FPS),
                });
            }
        }
        DetectionSource::Adapter(spec) => {
            if !spec.model.exists() {
                return Err(SessionError::Source(format!("adapter model {} not found", spec.model.display())));
            }
            if !program_available(&spec.program) {
                return Err(SessionError::Source(format!("adapter program {} not found", spec.program.display())));
            }
            if video.is_none() {
                match (req.width, req.height, req.frame_count) {
                    (Some(width), Some(height), Some(frame_count)) => {
                        video = Some(VideoInfo { frame_count, width, height, nominal_fps: fps })
                    }
                    _ => {
                        return Err(SessionError::Invalid(vec![FieldError::new(
                            "frames",
                            "an adapter without frames needs width, height and frame_count",
                        )]))
                    }
                }
            }
        }
    }
    let mut video = video.expect("resolved above");
    if let Some(n) = req.frame_count {
        video.frame_count = n;
    }

    let config = SessionConfig {
        session_id: session_id.to_string(),
        detections,
        frames: req.frames.clone(),
        video,
        tracker: req.tracker.clone(),
        detector: req.detector.clone(),
        gallery: req.gallery,
        simulated_latency_ms: req.simulated_latency_ms,
        created_at: aiv_core::cache::unix_millis(),
    };
    let mask = match config.mask_anchor() {
        Some(anchor) => load_sidecar_mask(anchor)?.unwrap_or_default(),
        None => Vec::new(),
    };
    fs::create_dir_all(dir.root())?;
    write_json(&dir.path(CONFIG_FILE), &config)?;
    dir.save_mask(&mask)?;
    dir.save_zones(&ZoneConfig::default())?;
    dir.save_state(&StateRecord { state: SessionState::Created, message: None, progress: None })?;
    Ok(config)
}

/// Stores the mask in the session and next to its source.
pub fn save_mask(dir: &SessionDir, config: &SessionConfig, mask: &[Polygon]) -> Result<(), SessionError> {
    dir.save_mask(mask)?;
    if let Some(anchor) = config.mask_anchor() {
        let mut bytes = serde_json::to_vec_pretty(&mask).expect("polygons serialize");
        bytes.push(b'\n');
        write_atomic(&sidecar_mask_path(anchor), &bytes)?;
    }
    Ok(())
}

fn load_detections(config: &SessionConfig, source: &dyn FrameSource) -> Result<Vec<Detection>, SessionError> {
    match &config.detections {
        DetectionSource::File { path } => {
            let bytes = fs::read(path).map_err(|e| SessionError::Source(format!("{}: {e}", path.display())))?;
            Ok(parse_detection_stream(&bytes)
                .map_err(|e| SessionError::Source(format!("{}: {e}", path.display())))?
                .detections)
        }
        DetectionSource::Adapter(spec) => run_inference_adapter(source, spec).map_err(|e| match e {
            DetectError::AdapterRecord { last_frame, msg } => SessionError::Pipeline(PipelineError::Detection {
                frame: last_frame.map_or(0, |f| f + 1),
                source: DetectError::AdapterRecord { last_frame, msg },
            }),
            other => SessionError::Source(other.to_string()),
        }),
    }
}

/// Runs the live pipeline and replaces the session cache. With `zones`,
/// the counters run alongside and their ledgers are returned.
pub fn run_pipeline(
    dir: &SessionDir,
    config: &SessionConfig,
    zones: Option<&ZoneConfig>,
    progress: &mut dyn FnMut(Progress) -> bool,
) -> Result<RunOutput, SessionError> {
    let source = config.frame_source()?;
    let detections = load_detections(config, source.as_ref())?;
    let mut provider = PrecomputedDetections::new(&detections, config.video.frame_count)
        .with_delay(Duration::from_millis(config.simulated_latency_ms));
    let polygons = dir.mask()?;
    let mask = (!polygons.is_empty()).then(|| rasterize_mask(&polygons, config.video.width, config.video.height));
    let mut gallery = if config.gallery {
        Some(
            Gallery::open(
                dir.gallery_dir(),
                GalleryConfig { score_min: config.tracker.score_high, ..GalleryConfig::default() },
            )
            .map_err(|e| SessionError::File { path: dir.gallery_dir().display().to_string(), msg: e.to_string() })?,
        )
    } else {
        None
    };
    let cache = dir.cache_path();
    let out = run_live(
        LiveRun {
            source: source.as_ref(),
            detections: &mut provider,
            tracker: config.tracker.clone(),
            detector: config.detector.clone(),
            mask: mask.as_ref(),
            zones,
            gallery: gallery.as_mut(),
            clock: &SystemClock,
            cache_path: Some(&cache),
            video: config.video_identity(),
            config_hash: config.config_hash(),
        },
        progress,
    )?;
    Ok(out)
}

/// Keeps only the zone of `method`, or all zones when `method` is `None`.
pub fn select_zones(zones: &ZoneConfig, method: Option<CountMethod>) -> Result<ZoneConfig, SessionError> {
    let selected = match method {
        None => zones.clone(),
        Some(CountMethod::FinishLine) => ZoneConfig { finish_line: zones.finish_line.clone(), motion_vector: None },
        Some(CountMethod::MotionVector) => ZoneConfig { finish_line: None, motion_vector: zones.motion_vector },
    };
    if selected.is_empty() {
        let what = method.map_or("any counting method", CountMethod::as_str);
        return Err(SessionError::Invalid(vec![FieldError::new("zones", format!("no zone configured for {what}"))]));
    }
    selected.validate()?;
    Ok(selected)
}

/// Counts with the given zones and stores the run under `ledgers/`.
pub fn count(
    dir: &SessionDir,
    config: &SessionConfig,
    zones: &ZoneConfig,
    method: Option<CountMethod>,
    mode: CountMode,
    progress: &mut dyn FnMut(Progress) -> bool,
) -> Result<CountRun, SessionError> {
    let selected = select_zones(zones, method)?;
    let result = match mode {
        CountMode::Quick => {
            if !dir.has_cache() {
                return Err(SessionError::NoCache);
            }
            quick_count(dir.cache_path(), &selected, Some(&config.config_hash()))?
        }
        CountMode::Full => run_pipeline(dir, config, Some(&selected), progress)?.counts.unwrap_or_default(),
    };
    dir.save_count_run(mode, &selected, result)
}

/// Scores the cache against a ground-truth file and stores `report.json`.
/// Counting accuracy uses the latest counting run when there is one.
pub fn eval(dir: &SessionDir, gt_path: &Path) -> Result<EvalReport, SessionError> {
    let gt_err = |msg: String| SessionError::GroundTruth { path: gt_path.display().to_string(), msg };
    let bytes = fs::read(gt_path).map_err(|e| gt_err(e.to_string()))?;
    let gt = parse_gt_stream(&bytes).map_err(|e| gt_err(e.to_string()))?;
    if !dir.has_cache() {
        return Err(SessionError::NoCache);
    }
    let reader = CacheReader::open(dir.cache_path())?;
    let cache_frames = reader.header().frame_count;
    if let Some(last) = gt.records.iter().map(|r| r.frame).max() {
        if last >= cache_frames {
            return Err(SessionError::FrameCountMismatch { gt_last: last, cache_frames });
        }
    }
    let records = reader.collect::<Result<Vec<_>, _>>()?;
    let runs = dir.count_runs()?;
    let counts = runs.last().and_then(CountRun::totals);
    let report = evaluate(&gt.records, &records, DEFAULT_MATCH_IOU, counts);
    write_json(&dir.path(REPORT_FILE), &report)?;
    Ok(report)
}
