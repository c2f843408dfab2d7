//! `.aiv` track cache: persisted tracker output for fast, deterministic replay.
//!
//! Layout:
//!
//! ```text
//! {"schema_version":1,...}\n        JSON header line
//! [u32 len][payload] ...             one record per frame, little-endian
//! [u64 offset] x N, [u64 N], "AIV1"  footer
//! ```
//!
//! A record payload is `u32 frame, u16 count` followed by `count` entries of
//! `u32 track_id, u8 class, f32 x, f32 y, f32 w, f32 h, f32 score`. Offsets
//! point at each record's length prefix.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;
use thiserror::Error;

use crate::detect::{DetectorConfig, FrameIndex, VehicleClass};
use crate::geom::BBox;
use crate::tracking::{TrackOutput, TrackerParams};

pub const SCHEMA_VERSION: u32 = 1;
pub const MAGIC: &[u8; 4] = b"AIV1";
/// Bytes of the source hashed for its identity digest.
pub const DIGEST_PREFIX_BYTES: u64 = 1 << 20;

const TRACK_BYTES: usize = 4 + 1 + 4 * 4 + 4;
const FOOTER_TAIL: u64 = 8 + 4;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("cache header: {0}")]
    Header(String),
    #[error("cache schema version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("cache truncated; last complete frame {last_good:?}")]
    Truncated { last_good: Option<FrameIndex> },
    #[error("cache corrupt near frame {frame:?}: {msg}")]
    Corrupt { frame: Option<FrameIndex>, msg: String },
    #[error("cache was built with config {cached}, requested {requested}; re-run the pipeline")]
    ConfigMismatch { cached: String, requested: String },
    #[error("expected frame {expected}, got {got}")]
    FrameOrder { expected: FrameIndex, got: FrameIndex },
    #[error("header declares {expected} frames but {got} were written")]
    FrameCount { expected: u32, got: u32 },
    #[error("too many tracks in frame {0}")]
    TooManyTracks(FrameIndex),
    #[error("replay consumer failed at frame {frame}: {msg}")]
    Consumer { frame: FrameIndex, msg: String },
}

fn canonical_json(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => out.push_str(&u.to_string()),
            (None, Some(i)) => out.push_str(&i.to_string()),
            _ => out.push_str(&format!("{:.6}", n.as_f64().unwrap_or(f64::NAN))),
        },
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                canonical_json(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let sorted: BTreeMap<&String, &Value> = map.iter().collect();
            out.push('{');
            for (i, (k, item)) in sorted.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                canonical_json(item, out);
            }
            out.push('}');
        }
    }
}

/// Canonical text that the config hash is computed over: sorted keys,
/// floats at six decimals.
pub fn canonical_config(params: &TrackerParams, detector: &DetectorConfig) -> String {
    let v = serde_json::json!({ "tracker": params, "detector": detector });
    let mut out = String::new();
    canonical_json(&v, &mut out);
    out
}

/// Hex SHA-256 of the canonical tracker and detector configuration.
pub fn config_hash(params: &TrackerParams, detector: &DetectorConfig) -> String {
    hex::encode(Sha256::digest(canonical_config(params, detector).as_bytes()))
}

/// Identity of the source media: path plus a digest of its first MiB and
/// its length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoIdentity {
    pub path: String,
    pub digest: String,
    pub length: u64,
}

impl VideoIdentity {
    pub fn of_file(path: &Path) -> io::Result<Self> {
        let file = File::open(path)?;
        let length = file.metadata()?.len();
        let mut prefix = Vec::new();
        file.take(DIGEST_PREFIX_BYTES).read_to_end(&mut prefix)?;
        Ok(Self { path: path.to_string_lossy().into_owned(), digest: hex::encode(Sha256::digest(&prefix)), length })
    }

    /// Identity of a directory of frames: digest over the sorted file names
    /// and sizes.
    pub fn of_dir(path: &Path) -> io::Result<Self> {
        let mut entries: Vec<(String, u64)> = std::fs::read_dir(path)?
            .filter_map(Result::ok)
            .filter_map(|e| Some((e.file_name().to_string_lossy().into_owned(), e.metadata().ok()?.len())))
            .collect();
        entries.sort();
        let mut h = Sha256::new();
        let mut length = 0;
        for (name, len) in &entries {
            h.update(name.as_bytes());
            h.update(len.to_le_bytes());
            length += len;
        }
        Ok(Self { path: path.to_string_lossy().into_owned(), digest: hex::encode(h.finalize()), length })
    }

    pub fn of_path(path: &Path) -> io::Result<Self> {
        if path.is_dir() {
            Self::of_dir(path)
        } else {
            Self::of_file(path)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub schema_version: u32,
    pub video: VideoIdentity,
    pub width: u32,
    pub height: u32,
    pub frame_count: u32,
    pub fps: f64,
    pub config_hash: String,
    /// Unix time in milliseconds.
    pub created_at: u64,
}

pub fn unix_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

impl CacheHeader {
    pub fn new(video: VideoIdentity, width: u32, height: u32, frame_count: u32, fps: f64, config_hash: String) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            video,
            width,
            height,
            frame_count,
            fps,
            config_hash,
            created_at: unix_millis(),
        }
    }

    fn validate(&self) -> Result<(), CacheError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CacheError::VersionMismatch { found: self.schema_version, expected: SCHEMA_VERSION });
        }
        if self.config_hash.is_empty() {
            return Err(CacheError::Header("config_hash is empty".into()));
        }
        if self.video.digest.is_empty() {
            return Err(CacheError::Header("video digest is empty".into()));
        }
        Ok(())
    }

    /// Errors when the cache was built with a different configuration.
    pub fn check_config(&self, requested: &str) -> Result<(), CacheError> {
        if self.config_hash == requested {
            Ok(())
        } else {
            Err(CacheError::ConfigMismatch { cached: self.config_hash.clone(), requested: requested.to_string() })
        }
    }

    /// Warning text when the cached video identity differs from `current`.
    pub fn check_video(&self, current: &VideoIdentity) -> Option<String> {
        (self.video.digest != current.digest || self.video.length != current.length).then(|| {
            format!(
                "cached video {} ({} bytes) differs from current {} ({} bytes); the video may have moved or changed",
                self.video.path, self.video.length, current.path, current.length
            )
        })
    }
}

/// Tracker output for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub frame: FrameIndex,
    pub tracks: Vec<TrackOutput>,
}

impl CacheRecord {
    fn encode(&self, buf: &mut Vec<u8>) -> Result<(), CacheError> {
        let n: u16 = self.tracks.len().try_into().map_err(|_| CacheError::TooManyTracks(self.frame))?;
        buf.clear();
        buf.extend_from_slice(&self.frame.to_le_bytes());
        buf.extend_from_slice(&n.to_le_bytes());
        for t in &self.tracks {
            buf.extend_from_slice(&t.track_id.to_le_bytes());
            buf.push(t.cls.id());
            for v in t.bbox.to_array() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            buf.extend_from_slice(&t.score.to_le_bytes());
        }
        Ok(())
    }

    fn decode(payload: &[u8]) -> Result<Self, String> {
        if payload.len() < 6 {
            return Err("record shorter than its fixed header".into());
        }
        let frame = u32::from_le_bytes(payload[0..4].try_into().unwrap());
        let n = u16::from_le_bytes(payload[4..6].try_into().unwrap()) as usize;
        if payload.len() != 6 + n * TRACK_BYTES {
            return Err(format!("frame {frame}: {} payload bytes for {n} tracks", payload.len()));
        }
        let f32_at = |o: usize| f32::from_le_bytes(payload[o..o + 4].try_into().unwrap());
        let mut tracks = Vec::with_capacity(n);
        for i in 0..n {
            let o = 6 + i * TRACK_BYTES;
            let track_id = u32::from_le_bytes(payload[o..o + 4].try_into().unwrap());
            let cls = VehicleClass::from_id(payload[o + 4])
                .ok_or_else(|| format!("frame {frame}: class id {}", payload[o + 4]))?;
            let bbox =
                BBox::new(f32_at(o + 5) as f64, f32_at(o + 9) as f64, f32_at(o + 13) as f64, f32_at(o + 17) as f64)
                    .map_err(|e| format!("frame {frame}: {e}"))?;
            tracks.push(TrackOutput { track_id, cls, bbox, score: f32_at(o + 21) });
        }
        Ok(CacheRecord { frame, tracks })
    }
}

/// Streaming cache writer. Data goes to a temporary file next to the
/// destination and is renamed into place by [`CacheWriter::finish`];
/// dropping an unfinished writer deletes the temporary file.
pub struct CacheWriter {
    out: BufWriter<NamedTempFile>,
    dest: PathBuf,
    header: CacheHeader,
    offsets: Vec<u64>,
    pos: u64,
    scratch: Vec<u8>,
}

impl CacheWriter {
    pub fn create(dest: impl AsRef<Path>, header: &CacheHeader) -> Result<Self, CacheError> {
        let dest = dest.as_ref().to_path_buf();
        let dir = match dest.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let tmp = tempfile::Builder::new().prefix(".cache-").suffix(".tmp").tempfile_in(dir)?;
        let mut out = BufWriter::new(tmp);
        let mut line = serde_json::to_vec(header).map_err(|e| CacheError::Header(e.to_string()))?;
        line.push(b'\n');
        out.write_all(&line)?;
        Ok(Self { out, dest, header: header.clone(), offsets: Vec::new(), pos: line.len() as u64, scratch: Vec::new() })
    }

    pub fn header(&self) -> &CacheHeader {
        &self.header
    }

    pub fn frames_written(&self) -> u32 {
        self.offsets.len() as u32
    }

    pub fn push(&mut self, record: &CacheRecord) -> Result<(), CacheError> {
        let expected = self.offsets.len() as FrameIndex;
        if record.frame != expected {
            return Err(CacheError::FrameOrder { expected, got: record.frame });
        }
        record.encode(&mut self.scratch)?;
        self.offsets.push(self.pos);
        self.out.write_all(&(self.scratch.len() as u32).to_le_bytes())?;
        self.out.write_all(&self.scratch)?;
        self.pos += 4 + self.scratch.len() as u64;
        Ok(())
    }

    /// Writes the footer, syncs and atomically renames into place. Returns
    /// the final file size.
    pub fn finish(mut self) -> Result<u64, CacheError> {
        let written = self.offsets.len() as u32;
        if written != self.header.frame_count {
            return Err(CacheError::FrameCount { expected: self.header.frame_count, got: written });
        }
        for off in &self.offsets {
            self.out.write_all(&off.to_le_bytes())?;
        }
        self.out.write_all(&(self.offsets.len() as u64).to_le_bytes())?;
        self.out.write_all(MAGIC)?;
        let size = self.pos + 8 * self.offsets.len() as u64 + FOOTER_TAIL;
        let tmp = self.out.into_inner().map_err(|e| e.into_error())?;
        tmp.as_file().sync_all()?;
        tmp.persist(&self.dest).map_err(|e| e.error)?;
        Ok(size)
    }
}

/// Writes a complete cache in one call.
pub fn write_cache(
    dest: impl AsRef<Path>,
    header: &CacheHeader,
    records: impl IntoIterator<Item = CacheRecord>,
) -> Result<u64, CacheError> {
    let mut w = CacheWriter::create(dest, header)?;
    for r in records {
        w.push(&r)?;
    }
    w.finish()
}

/// Lazily streams records from a cache file.
pub struct CacheReader {
    file: BufReader<File>,
    header: CacheHeader,
    offsets: Option<Vec<u64>>,
    records_start: u64,
    records_end: u64,
    pos: u64,
    next_frame: FrameIndex,
    failed: bool,
}

impl std::fmt::Debug for CacheReader {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CacheReader").field("header", &self.header).field("next_frame", &self.next_frame).finish()
    }
}

impl CacheReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CacheError> {
        let mut file = BufReader::new(File::open(path.as_ref())?);
        let mut line = Vec::new();
        file.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(CacheError::Header("missing header line".into()));
        }
        let header: CacheHeader =
            serde_json::from_slice(&line[..line.len() - 1]).map_err(|e| CacheError::Header(e.to_string()))?;
        header.validate()?;
        let records_start = line.len() as u64;
        let len = file.get_ref().metadata()?.len();
        let offsets = read_footer(file.get_mut(), records_start, len)?;
        let records_end = match &offsets {
            Some(o) => len - FOOTER_TAIL - 8 * o.len() as u64,
            None => len,
        };
        file.seek(SeekFrom::Start(records_start))?;
        Ok(Self { file, header, offsets, records_start, records_end, pos: records_start, next_frame: 0, failed: false })
    }

    pub fn header(&self) -> &CacheHeader {
        &self.header
    }

    /// Number of records according to the footer; `None` if it is missing.
    pub fn record_count(&self) -> Option<usize> {
        self.offsets.as_ref().map(Vec::len)
    }

    /// Random access to one frame through the offset table.
    pub fn read_frame(&mut self, frame: FrameIndex) -> Result<CacheRecord, CacheError> {
        let offsets = self.offsets.as_ref().ok_or(CacheError::Truncated { last_good: None })?;
        let off = *offsets
            .get(frame as usize)
            .ok_or_else(|| CacheError::Corrupt { frame: Some(frame), msg: "frame beyond cache".into() })?;
        self.file.seek(SeekFrom::Start(off))?;
        let rec = read_record(&mut self.file, self.records_end - off)
            .map_err(|msg| CacheError::Corrupt { frame: Some(frame), msg })?
            .ok_or(CacheError::Truncated { last_good: frame.checked_sub(1) })?;
        self.file.seek(SeekFrom::Start(self.pos))?;
        Ok(rec.0)
    }

    /// Restarts sequential iteration from the first record.
    pub fn rewind(&mut self) -> Result<(), CacheError> {
        self.file.seek(SeekFrom::Start(self.records_start))?;
        self.pos = self.records_start;
        self.next_frame = 0;
        self.failed = false;
        Ok(())
    }

    fn last_good(&self) -> Option<FrameIndex> {
        self.next_frame.checked_sub(1)
    }
}

fn read_footer(file: &mut File, records_start: u64, len: u64) -> Result<Option<Vec<u64>>, CacheError> {
    if len < records_start + FOOTER_TAIL {
        return Ok(None);
    }
    let mut tail = [0u8; FOOTER_TAIL as usize];
    file.seek(SeekFrom::Start(len - FOOTER_TAIL))?;
    file.read_exact(&mut tail)?;
    if &tail[8..] != MAGIC {
        return Ok(None);
    }
    let n = u64::from_le_bytes(tail[..8].try_into().unwrap());
    let table_bytes = n.checked_mul(8).filter(|b| records_start + FOOTER_TAIL + b <= len);
    let Some(table_bytes) = table_bytes else {
        return Ok(None);
    };
    file.seek(SeekFrom::Start(len - FOOTER_TAIL - table_bytes))?;
    let mut raw = vec![0u8; table_bytes as usize];
    file.read_exact(&mut raw)?;
    Ok(Some(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()))
}

/// Reads one length-prefixed record. `Ok(None)` when fewer bytes than the
/// record needs remain in `available`.
fn read_record(r: &mut impl Read, available: u64) -> Result<Option<(CacheRecord, u64)>, String> {
    if available < 4 {
        return Ok(None);
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|e| e.to_string())?;
    let len = u32::from_le_bytes(len) as u64;
    if available < 4 + len {
        return Ok(None);
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|e| e.to_string())?;
    CacheRecord::decode(&payload).map(|rec| Some((rec, 4 + len)))
}

impl Iterator for CacheReader {
    type Item = Result<CacheRecord, CacheError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let remaining = self.records_end - self.pos;
        if remaining == 0 {
            if self.offsets.is_some() {
                return None;
            }
            self.failed = true;
            return Some(Err(CacheError::Truncated { last_good: self.last_good() }));
        }
        let result = match read_record(&mut self.file, remaining) {
            Ok(Some((rec, used))) if rec.frame == self.next_frame => {
                self.pos += used;
                self.next_frame += 1;
                Ok(rec)
            }
            Ok(Some((rec, _))) => Err(CacheError::FrameOrder { expected: self.next_frame, got: rec.frame }),
            Ok(None) => Err(CacheError::Truncated { last_good: self.last_good() }),
            Err(msg) => Err(CacheError::Corrupt { frame: self.last_good(), msg }),
        };
        if result.is_err() {
            self.failed = true;
        }
        Some(result)
    }
}

/// Reads a whole cache into memory.
pub fn read_cache(path: impl AsRef<Path>) -> Result<(CacheHeader, Vec<CacheRecord>), CacheError> {
    let reader = CacheReader::open(path)?;
    let header = reader.header().clone();
    let records = reader.collect::<Result<Vec<_>, _>>()?;
    if records.len() as u32 != header.frame_count {
        return Err(CacheError::FrameCount { expected: header.frame_count, got: records.len() as u32 });
    }
    Ok((header, records))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pacing {
    AsFast,
    /// Deliver frames at this many frames per second.
    RealTime(f64),
}

/// Receives replayed records in frame order.
pub trait ReplaySink {
    fn on_frame(&mut self, record: &CacheRecord) -> Result<(), String>;
}

impl<F: FnMut(&CacheRecord) -> Result<(), String>> ReplaySink for F {
    fn on_frame(&mut self, record: &CacheRecord) -> Result<(), String> {
        self(record)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayStats {
    pub frames: u32,
    pub elapsed: Duration,
}

impl ReplayStats {
    pub fn fps(&self) -> f64 {
        let s = self.elapsed.as_secs_f64();
        if s > 0.0 {
            self.frames as f64 / s
        } else {
            f64::INFINITY
        }
    }
}

/// Feeds every record to every sink in order. With `RealTime(fps)` frame
/// `k` is released no earlier than `(k + 1) / fps` seconds after the start.
pub fn replay(
    records: impl IntoIterator<Item = Result<CacheRecord, CacheError>>,
    sinks: &mut [&mut dyn ReplaySink],
    pacing: Pacing,
) -> Result<ReplayStats, CacheError> {
    let start = Instant::now();
    let mut frames = 0u32;
    for rec in records {
        let rec = rec?;
        for sink in sinks.iter_mut() {
            sink.on_frame(&rec).map_err(|msg| CacheError::Consumer { frame: rec.frame, msg })?;
        }
        frames += 1;
        if let Pacing::RealTime(fps) = pacing {
            let due = start + Duration::from_secs_f64(frames as f64 / fps);
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
    }
    Ok(ReplayStats { frames, elapsed: start.elapsed() })
}
