//! Vehicle template gallery: one best crop and appearance feature per track,
//! grouped by class on disk, with similarity verification and retention.
//!
//! Layout under the gallery root:
//!
//! ```text
//! index.json                  array of template records
//! <class>/<template_id>.png   crop images (absent when anonymized)
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counting::class_name;
use crate::detect::{FrameIndex, VehicleClass};
use crate::geom::BBox;
use crate::tracking::appearance::{appearance_embed, cosine_distance, AppearanceError, Feature};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Error)]
pub enum GalleryError {
    #[error("no frame raster available for registration")]
    RasterUnavailable,
    #[error("appearance feature: {0}")]
    Appearance(#[from] AppearanceError),
    #[error("gallery index: {0}")]
    Index(String),
    #[error("crop image: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GalleryConfig {
    /// Minimum crop width and height in pixels.
    pub min_crop: u32,
    pub score_min: f32,
    pub similarity_min: f64,
    /// Keep features only, never write crops.
    pub anonymize: bool,
}

impl Default for GalleryConfig {
    fn default() -> Self {
        Self { min_crop: 32, score_min: 0.7, similarity_min: 0.6, anonymize: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub template_id: String,
    pub track_id: u32,
    #[serde(with = "class_name")]
    pub cls: VehicleClass,
    /// Crop path relative to the gallery root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<String>,
    pub feature: Vec<f32>,
    /// Frame of the first registration for this track.
    pub frame: FrameIndex,
    pub score: f32,
    /// Unix time in milliseconds.
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RejectReason {
    CropTooSmall { width: u32, height: u32 },
    LowScore { score: f32 },
    NotBetter { best: f32 },
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::CropTooSmall { width, height } => write!(f, "crop {width}x{height} below minimum size"),
            RejectReason::LowScore { score } => write!(f, "score {score} below threshold"),
            RejectReason::NotBetter { best } => write!(f, "existing template has score {best}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Registration {
    Stored(TemplateRecord),
    Replaced(TemplateRecord),
    Rejected(RejectReason),
}

/// One registration request.
#[derive(Debug, Clone, Copy)]
pub struct Candidate {
    pub track_id: u32,
    pub cls: VehicleClass,
    pub bbox: BBox,
    pub score: f32,
    pub frame: FrameIndex,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VerifyOutcome {
    Match { template_id: String, similarity_pct: f64 },
    NoMatch { best_similarity: Option<f64> },
    TimedOut,
}

/// Millisecond clock, injectable for tests.
pub trait Clock {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        crate::cache::unix_millis()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RetentionPolicy {
    #[serde(default)]
    pub max_age_secs: Option<u64>,
    #[serde(default)]
    pub max_records: Option<usize>,
    #[serde(default)]
    pub anonymize: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PurgeReport {
    pub expired: Vec<String>,
    pub over_cap: Vec<String>,
    pub anonymized: usize,
}

#[derive(Debug)]
pub struct Gallery {
    root: Option<PathBuf>,
    cfg: GalleryConfig,
    records: Vec<TemplateRecord>,
    by_track: BTreeMap<u32, usize>,
    next_id: u64,
}

fn parse_id(id: &str) -> Option<u64> {
    id.strip_prefix("tpl-")?.parse().ok()
}

impl Gallery {
    /// Gallery kept only in memory.
    pub fn in_memory(cfg: GalleryConfig) -> Self {
        Self { root: None, cfg, records: Vec::new(), by_track: BTreeMap::new(), next_id: 1 }
    }

    /// Opens (or creates) a gallery directory, loading its index if present.
    pub fn open(root: impl AsRef<Path>, cfg: GalleryConfig) -> Result<Self, GalleryError> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(&root)?;
        let mut g = Self { root: Some(root.clone()), ..Self::in_memory(cfg) };
        let index = root.join(INDEX_FILE);
        if index.exists() {
            g.records = read_index(&index)?;
            g.reindex();
        }
        Ok(g)
    }

    fn reindex(&mut self) {
        self.by_track = self.records.iter().enumerate().map(|(i, r)| (r.track_id, i)).collect();
        self.next_id = self.records.iter().filter_map(|r| parse_id(&r.template_id)).max().map_or(1, |m| m + 1);
    }

    pub fn config(&self) -> &GalleryConfig {
        &self.cfg
    }

    pub fn records(&self) -> &[TemplateRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Copy of the records for concurrent verification.
    pub fn snapshot(&self) -> Vec<TemplateRecord> {
        self.records.clone()
    }

    /// Registers a detection crop after the quality gate. Writes the crop
    /// and the index when the gallery is on disk.
    pub fn register(
        &mut self,
        cand: &Candidate,
        raster: Option<&RgbImage>,
        clock: &dyn Clock,
    ) -> Result<Registration, GalleryError> {
        let raster = raster.ok_or(GalleryError::RasterUnavailable)?;
        let (width, height) =
            cand.bbox.pixel_rect(raster.width(), raster.height()).map_or((0, 0), |(x0, y0, x1, y1)| (x1 - x0, y1 - y0));
        if width < self.cfg.min_crop || height < self.cfg.min_crop {
            return Ok(Registration::Rejected(RejectReason::CropTooSmall { width, height }));
        }
        if cand.score < self.cfg.score_min {
            return Ok(Registration::Rejected(RejectReason::LowScore { score: cand.score }));
        }
        let existing = self.by_track.get(&cand.track_id).copied();
        if let Some(i) = existing {
            if cand.score <= self.records[i].score {
                return Ok(Registration::Rejected(RejectReason::NotBetter { best: self.records[i].score }));
            }
        }
        let feature = appearance_embed(raster, &cand.bbox)?.into_vec();
        let template_id = match existing {
            Some(i) => self.records[i].template_id.clone(),
            None => {
                let id = format!("tpl-{:06}", self.next_id);
                self.next_id += 1;
                id
            }
        };
        let crop = if self.cfg.anonymize { None } else { Some(format!("{}/{}.png", cand.cls.name(), template_id)) };
        if let (Some(root), Some(rel)) = (&self.root, &crop) {
            let (x0, y0, x1, y1) = cand.bbox.pixel_rect(raster.width(), raster.height()).expect("checked above");
            let img = image::imageops::crop_imm(raster, x0, y0, x1 - x0, y1 - y0).to_image();
            let path = root.join(rel);
            std::fs::create_dir_all(path.parent().expect("crop path has a class directory"))?;
            img.save_with_format(&path, image::ImageFormat::Png)?;
        }
        let outcome = match existing {
            Some(i) => {
                let r = &mut self.records[i];
                r.feature = feature;
                r.score = cand.score;
                r.crop = crop;
                Registration::Replaced(r.clone())
            }
            None => {
                let r = TemplateRecord {
                    template_id,
                    track_id: cand.track_id,
                    cls: cand.cls,
                    crop,
                    feature,
                    frame: cand.frame,
                    score: cand.score,
                    created_at: clock.now_ms(),
                };
                self.by_track.insert(cand.track_id, self.records.len());
                self.records.push(r.clone());
                Registration::Stored(r)
            }
        };
        self.save_index()?;
        Ok(outcome)
    }

    /// Rewrites `index.json` atomically.
    pub fn save_index(&self) -> Result<(), GalleryError> {
        let Some(root) = &self.root else {
            return Ok(());
        };
        let mut tmp = tempfile::Builder::new().prefix(".index-").tempfile_in(root)?;
        serde_json::to_writer_pretty(&mut tmp, &self.records).map_err(|e| GalleryError::Index(e.to_string()))?;
        tmp.write_all(b"\n")?;
        tmp.as_file().sync_all()?;
        tmp.persist(root.join(INDEX_FILE)).map_err(|e| e.error)?;
        Ok(())
    }

    pub fn verify(&self, query: &Feature, timeout: Duration, clock: &dyn Clock) -> VerifyOutcome {
        verify(&self.records, query, self.cfg.similarity_min, timeout, clock)
    }

    /// Removes expired records, then the oldest records beyond the cap, and
    /// strips crops when the policy asks for anonymization.
    pub fn apply_retention(&mut self, policy: &RetentionPolicy, now_ms: u64) -> Result<PurgeReport, GalleryError> {
        let mut report = PurgeReport::default();
        let mut removed = Vec::new();
        if let Some(max_age) = policy.max_age_secs {
            let limit = max_age.saturating_mul(1000);
            let (old, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.records)
                .into_iter()
                .partition(|r| now_ms.saturating_sub(r.created_at) > limit);
            report.expired = old.iter().map(|r| r.template_id.clone()).collect();
            removed.extend(old);
            self.records = keep;
        }
        if let Some(cap) = policy.max_records {
            if self.records.len() > cap {
                let mut order: Vec<usize> = (0..self.records.len()).collect();
                order.sort_by(|&a, &b| {
                    let (ra, rb) = (&self.records[a], &self.records[b]);
                    ra.created_at.cmp(&rb.created_at).then_with(|| ra.template_id.cmp(&rb.template_id))
                });
                let drop: std::collections::BTreeSet<usize> =
                    order[..self.records.len() - cap].iter().copied().collect();
                let mut keep = Vec::with_capacity(cap);
                for (i, r) in std::mem::take(&mut self.records).into_iter().enumerate() {
                    if drop.contains(&i) {
                        report.over_cap.push(r.template_id.clone());
                        removed.push(r);
                    } else {
                        keep.push(r);
                    }
                }
                self.records = keep;
            }
        }
        for r in &removed {
            self.remove_crop(r.crop.as_deref())?;
        }
        if policy.anonymize {
            for i in 0..self.records.len() {
                if let Some(c) = self.records[i].crop.take() {
                    self.remove_crop(Some(&c))?;
                    report.anonymized += 1;
                }
            }
        }
        let next_id = self.next_id;
        self.reindex();
        // ids are never reused, even after purging the newest record
        self.next_id = self.next_id.max(next_id);
        self.save_index()?;
        Ok(report)
    }

    fn remove_crop(&self, rel: Option<&str>) -> Result<(), GalleryError> {
        if let (Some(root), Some(rel)) = (&self.root, rel) {
            match std::fs::remove_file(root.join(rel)) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
        }
        Ok(())
    }
}

fn read_index(path: &Path) -> Result<Vec<TemplateRecord>, GalleryError> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| GalleryError::Index(e.to_string()))
}

/// Reads a gallery index without opening the gallery for writing.
pub fn load_index(root: impl AsRef<Path>) -> Result<Vec<TemplateRecord>, GalleryError> {
    let path = root.as_ref().join(INDEX_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_index(&path)
}

/// Best cosine similarity of `query` over `records`. Ties go to the
/// earlier record. The clock is checked before each comparison.
pub fn verify(
    records: &[TemplateRecord],
    query: &Feature,
    similarity_min: f64,
    timeout: Duration,
    clock: &dyn Clock,
) -> VerifyOutcome {
    let start = clock.now_ms();
    let budget = timeout.as_millis() as u64;
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in records.iter().enumerate() {
        if clock.now_ms().saturating_sub(start) > budget {
            return VerifyOutcome::TimedOut;
        }
        let Ok(d) = cosine_distance(query.as_slice(), &r.feature) else {
            continue;
        };
        let sim = (1.0 - d).clamp(-1.0, 1.0);
        if best.is_none_or(|(_, b)| sim > b) {
            best = Some((i, sim));
        }
    }
    match best {
        Some((i, sim)) if sim >= similarity_min => {
            VerifyOutcome::Match { template_id: records[i].template_id.clone(), similarity_pct: 100.0 * sim }
        }
        other => VerifyOutcome::NoMatch { best_similarity: other.map(|(_, s)| s) },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use std::cell::Cell;

    struct FixedClock(u64);
    impl Clock for FixedClock {
        fn now_ms(&self) -> u64 {
            self.0
        }
    }

    /// Advances by `step` ms on every reading.
    struct TickClock {
        t: Cell<u64>,
        step: u64,
    }
    impl Clock for TickClock {
        fn now_ms(&self) -> u64 {
            let t = self.t.get();
            self.t.set(t + self.step);
            t
        }
    }

    fn frame() -> RgbImage {
        RgbImage::from_fn(128, 128, |x, y| if x < 64 { Rgb([200, 30, 30]) } else { Rgb([(y * 2) as u8, 30, 220]) })
    }

    fn cand(track_id: u32, x: f64, size: f64, score: f32) -> Candidate {
        Candidate { track_id, cls: VehicleClass::Car, bbox: BBox::new(x, 0.0, size, size).unwrap(), score, frame: 3 }
    }

    #[test]
    fn quality_gate() {
        let mut g = Gallery::in_memory(GalleryConfig::default());
        let f = frame();
        assert!(matches!(
            g.register(&cand(1, 0.0, 64.0, 0.9), Some(&f), &FixedClock(0)).unwrap(),
            Registration::Stored(_)
        ));
        assert!(matches!(
            g.register(&cand(2, 0.0, 16.0, 0.9), Some(&f), &FixedClock(0)).unwrap(),
            Registration::Rejected(RejectReason::CropTooSmall { width: 16, height: 16 })
        ));
        assert!(matches!(
            g.register(&cand(3, 0.0, 64.0, 0.5), Some(&f), &FixedClock(0)).unwrap(),
            Registration::Rejected(RejectReason::LowScore { .. })
        ));
        assert!(matches!(
            g.register(&cand(4, 0.0, 64.0, 0.9), None, &FixedClock(0)),
            Err(GalleryError::RasterUnavailable)
        ));
    }

    #[test]
    fn better_score_replaces_same_id() {
        let mut g = Gallery::in_memory(GalleryConfig::default());
        let f = frame();
        let Registration::Stored(first) = g.register(&cand(1, 0.0, 64.0, 0.8), Some(&f), &FixedClock(0)).unwrap()
        else {
            panic!()
        };
        let Registration::Replaced(second) = g.register(&cand(1, 64.0, 64.0, 0.95), Some(&f), &FixedClock(5)).unwrap()
        else {
            panic!()
        };
        assert_eq!(first.template_id, second.template_id);
        assert_eq!(second.score, 0.95);
        assert_ne!(first.feature, second.feature);
        assert_eq!(g.len(), 1);
        assert!(matches!(
            g.register(&cand(1, 0.0, 64.0, 0.9), Some(&f), &FixedClock(9)).unwrap(),
            Registration::Rejected(RejectReason::NotBetter { .. })
        ));
    }

    #[test]
    fn verify_outcomes() {
        let mut g = Gallery::in_memory(GalleryConfig::default());
        let f = frame();
        let Registration::Stored(r) = g.register(&cand(1, 0.0, 64.0, 0.9), Some(&f), &FixedClock(0)).unwrap() else {
            panic!()
        };
        let q = Feature::normalized(r.feature.clone()).unwrap();
        match g.verify(&q, Duration::from_secs(1), &FixedClock(0)) {
            VerifyOutcome::Match { template_id, similarity_pct } => {
                assert_eq!(template_id, r.template_id);
                assert!((similarity_pct - 100.0).abs() < 1e-4);
            }
            other => panic!("{other:?}"),
        }
        let empty = Gallery::in_memory(GalleryConfig::default());
        assert_eq!(
            empty.verify(&q, Duration::from_secs(1), &FixedClock(0)),
            VerifyOutcome::NoMatch { best_similarity: None }
        );
    }

    #[test]
    fn similarity_threshold_is_inclusive() {
        let rec = |v: Vec<f32>| TemplateRecord {
            template_id: "tpl-000001".into(),
            track_id: 1,
            cls: VehicleClass::Car,
            crop: None,
            feature: v,
            frame: 0,
            score: 1.0,
            created_at: 0,
        };
        // cos = 0.59 and 0.6 against the query (1, 0)
        let q = Feature::normalized(vec![1.0, 0.0]).unwrap();
        let below = rec(vec![0.59, (1.0f32 - 0.59 * 0.59).sqrt()]);
        assert!(matches!(
            verify(&[below], &q, 0.6, Duration::from_secs(1), &FixedClock(0)),
            VerifyOutcome::NoMatch { .. }
        ));
        let at = rec(vec![0.6, 0.8]);
        assert!(matches!(verify(&[at], &q, 0.6, Duration::from_secs(1), &FixedClock(0)), VerifyOutcome::Match { .. }));
    }

    #[test]
    fn verify_times_out() {
        let records: Vec<TemplateRecord> = (0..10)
            .map(|i| TemplateRecord {
                template_id: format!("tpl-{i:06}"),
                track_id: i,
                cls: VehicleClass::Car,
                crop: None,
                feature: vec![1.0, 0.0],
                frame: 0,
                score: 1.0,
                created_at: 0,
            })
            .collect();
        let q = Feature::normalized(vec![1.0, 0.0]).unwrap();
        let clock = TickClock { t: Cell::new(0), step: 40 };
        assert_eq!(verify(&records, &q, 0.6, Duration::from_millis(100), &clock), VerifyOutcome::TimedOut);
    }

    #[test]
    fn on_disk_layout_and_retention() {
        let dir = tempfile::tempdir().unwrap();
        let f = frame();
        let mut g = Gallery::open(dir.path(), GalleryConfig::default()).unwrap();
        for i in 0..10u32 {
            g.register(&cand(i + 1, 0.0, 40.0, 0.9), Some(&f), &FixedClock(1000 + i as u64)).unwrap();
        }
        assert!(dir.path().join("car/tpl-000001.png").exists());
        let index: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join(INDEX_FILE)).unwrap()).unwrap();
        assert_eq!(index.as_array().unwrap().len(), 10);
        assert_eq!(index[0]["cls"], "car");

        let reopened = Gallery::open(dir.path(), GalleryConfig::default()).unwrap();
        assert_eq!(reopened.records(), g.records());

        let report = g.apply_retention(&RetentionPolicy { max_records: Some(7), ..Default::default() }, 2000).unwrap();
        assert_eq!(report.over_cap, vec!["tpl-000001", "tpl-000002", "tpl-000003"]);
        assert_eq!(g.len(), 7);
        assert!(!dir.path().join("car/tpl-000001.png").exists());

        let noop = g.apply_retention(
            &RetentionPolicy { max_age_secs: Some(60), max_records: Some(50), anonymize: false },
            2000,
        );
        assert_eq!(noop.unwrap(), PurgeReport::default());

        let anon = g.apply_retention(&RetentionPolicy { anonymize: true, ..Default::default() }, 2000).unwrap();
        assert_eq!(anon.anonymized, 7);
        assert!(g.records().iter().all(|r| r.crop.is_none() && !r.feature.is_empty()));

        g.apply_retention(&RetentionPolicy { max_records: Some(0), ..Default::default() }, 2000).unwrap();
        assert!(g.is_empty());
        let Registration::Stored(r) = g.register(&cand(99, 0.0, 40.0, 0.9), Some(&f), &FixedClock(0)).unwrap() else {
            panic!()
        };
        assert_eq!(r.template_id, "tpl-000011");
    }

    #[test]
    fn max_age_expires() {
        let f = frame();
        let mut g = Gallery::in_memory(GalleryConfig::default());
        g.register(&cand(1, 0.0, 40.0, 0.9), Some(&f), &FixedClock(0)).unwrap();
        g.register(&cand(2, 0.0, 40.0, 0.9), Some(&f), &FixedClock(50_000)).unwrap();
        let rep = g.apply_retention(&RetentionPolicy { max_age_secs: Some(30), ..Default::default() }, 60_000).unwrap();
        assert_eq!(rep.expired, vec!["tpl-000001"]);
        assert_eq!(g.len(), 1);
    }
}
