//! Live processing loop and cache-based quick counting.
//!
//! A live run pulls detections frame by frame, splits them into score bands
//! under the mask, tracks, writes the `.aiv` cache, feeds the counters and
//! optionally registers gallery templates. Quick counting replays a cache
//! through the counters without touching detection or tracking.

use std::path::Path;
use std::time::{Duration, Instant};

use image::RgbImage;
use thiserror::Error;
use tracing::{debug, warn};

use crate::cache::{CacheError, CacheHeader, CacheReader, CacheRecord, CacheWriter, VideoIdentity};
use crate::counting::{CountResult, Counter, CountingError, ZoneConfig};
use crate::detect::{group_by_frame, split_bands, DetectError, Detection, DetectorConfig, FrameIndex, FrameSource};
use crate::gallery::{Candidate, Clock, Gallery, GalleryError, Registration};
use crate::geom::MaskRaster;
use crate::tracking::{Tracker, TrackerError, TrackerParams};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("detection failed at frame {frame}: {source}")]
    Detection { frame: FrameIndex, source: DetectError },
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Counting(#[from] CountingError),
    #[error("gallery at frame {frame}: {source}")]
    Gallery { frame: FrameIndex, source: GalleryError },
    #[error("run cancelled after frame {0:?}")]
    Cancelled(Option<FrameIndex>),
}

/// Supplies the detections of one frame.
pub trait DetectionProvider: Send {
    fn detect(&mut self, frame: FrameIndex, raster: Option<&RgbImage>) -> Result<Vec<Detection>, DetectError>;
}

/// Detections known up front, optionally with a fixed per-frame delay that
/// stands in for model inference time.
#[derive(Debug, Clone)]
pub struct PrecomputedDetections {
    frames: Vec<Vec<Detection>>,
    delay: Duration,
}

impl PrecomputedDetections {
    pub fn new(detections: &[Detection], frame_count: u32) -> Self {
        Self { frames: group_by_frame(detections, frame_count), delay: Duration::ZERO }
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

impl DetectionProvider for PrecomputedDetections {
    fn detect(&mut self, frame: FrameIndex, _raster: Option<&RgbImage>) -> Result<Vec<Detection>, DetectError> {
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        Ok(self.frames.get(frame as usize).cloned().unwrap_or_default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub frame: FrameIndex,
    pub frames_total: u32,
    /// Throughput of the last frame.
    pub fps: f64,
}

/// Everything a live run needs besides its sinks.
pub struct LiveRun<'a> {
    pub source: &'a dyn FrameSource,
    pub detections: &'a mut dyn DetectionProvider,
    pub tracker: TrackerParams,
    pub detector: DetectorConfig,
    pub mask: Option<&'a MaskRaster>,
    pub zones: Option<&'a ZoneConfig>,
    pub gallery: Option<&'a mut Gallery>,
    pub clock: &'a dyn Clock,
    /// Destination of the cache; `None` keeps results in memory only.
    pub cache_path: Option<&'a Path>,
    pub video: VideoIdentity,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub frames: Vec<CacheRecord>,
    pub counts: Option<CountResult>,
    pub frame_durations: Vec<Duration>,
    pub cache_bytes: Option<u64>,
    pub templates_registered: usize,
}

/// Runs the live pipeline over every frame of the source. `progress` is
/// called after each frame; returning `false` cancels the run (and discards
/// the partial cache).
pub fn run_live(run: LiveRun<'_>, progress: &mut dyn FnMut(Progress) -> bool) -> Result<RunOutput, PipelineError> {
    let LiveRun {
        source,
        detections,
        tracker,
        detector,
        mask,
        zones,
        mut gallery,
        clock,
        cache_path,
        video,
        config_hash,
    } = run;
    detector.validate().map_err(PipelineError::Config)?;
    let info = source.info();
    if tracker.appearance && !source.has_pixels() {
        return Err(PipelineError::Config("appearance matching needs a frame source with pixels".into()));
    }
    let score_low = tracker.score_low;
    let mut tracker = Tracker::new(tracker)?;
    let mut counter = zones.map(Counter::new).transpose()?;
    let header = CacheHeader::new(video, info.width, info.height, info.frame_count, info.nominal_fps, config_hash);
    let mut writer = cache_path.map(|p| CacheWriter::create(p, &header)).transpose()?;
    let score_gate = tracker.params().score_high;
    let mut out = RunOutput::default();
    let mut warned_gallery = false;

    for frame in 0..info.frame_count {
        let started = Instant::now();
        let raster = if source.has_pixels() { source.frame(frame)? } else { None };
        let dets =
            detections.detect(frame, raster.as_ref()).map_err(|source| PipelineError::Detection { frame, source })?;
        let bands = split_bands(&dets, &detector, mask, (info.width, info.height), score_low)?;
        let tracks = tracker.step(frame, &bands.high, &bands.low, raster.as_ref())?;
        let record = CacheRecord { frame, tracks };
        if let Some(w) = writer.as_mut() {
            w.push(&record)?;
        }
        if let Some(c) = counter.as_mut() {
            c.update(frame, &record.tracks);
        }
        if let Some(g) = gallery.as_deref_mut() {
            match raster.as_ref() {
                Some(img) => {
                    for t in record.tracks.iter().filter(|t| t.score >= score_gate) {
                        let cand = Candidate { track_id: t.track_id, cls: t.cls, bbox: t.bbox, score: t.score, frame };
                        match g
                            .register(&cand, Some(img), clock)
                            .map_err(|source| PipelineError::Gallery { frame, source })?
                        {
                            Registration::Stored(_) | Registration::Replaced(_) => out.templates_registered += 1,
                            Registration::Rejected(reason) => debug!(track = t.track_id, %reason, "template rejected"),
                        }
                    }
                }
                None if !warned_gallery => {
                    warn!("gallery registration skipped: frame source has no pixels");
                    warned_gallery = true;
                }
                None => {}
            }
        }
        out.frames.push(record);
        let elapsed = started.elapsed();
        out.frame_durations.push(elapsed);
        let fps = 1.0 / elapsed.as_secs_f64().max(1e-9);
        if !progress(Progress { frame, frames_total: info.frame_count, fps }) {
            return Err(PipelineError::Cancelled(Some(frame)));
        }
    }
    if let Some(w) = writer {
        out.cache_bytes = Some(w.finish()?);
    }
    out.counts = counter.map(Counter::finish);
    Ok(out)
}

/// Counts from a cache. When `expected_hash` is given, a cache built with a
/// different configuration is refused.
pub fn quick_count(
    cache: impl AsRef<Path>,
    zones: &ZoneConfig,
    expected_hash: Option<&str>,
) -> Result<CountResult, PipelineError> {
    let reader = CacheReader::open(cache)?;
    if let Some(h) = expected_hash {
        reader.header().check_config(h)?;
    }
    let mut counter = Counter::new(zones)?;
    for rec in reader {
        let rec = rec?;
        counter.update(rec.frame, &rec.tracks);
    }
    Ok(counter.finish())
}
