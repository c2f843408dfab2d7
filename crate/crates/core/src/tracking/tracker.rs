//! Two-band multi-object tracker.
//!
//! Each frame runs:
//!
//! 1. Kalman prediction for every live track.
//! 2. Active and lost tracks against high-score detections (IoU gate, and
//!    with appearance enabled also a cosine gate; cost is the smaller of the
//!    two distances).
//! 3. Tentative tracks against the high-score detections left over.
//! 4. Still-unmatched active tracks against low-score detections, IoU only.
//! 5. Lifecycle: unmatched active tracks become lost, lost tracks past
//!    `max_time_lost` are removed, unmatched tentative tracks are dropped,
//!    leftover high-score detections start new tentative tracks.
//!
//! With `appearance` off this is ByteTrack association; with it on it is a
//! BoT-SORT style tracker without camera-motion compensation.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::appearance::{cosine_distance, AppearanceEmbedder, AppearanceError, ColorHistogram, Feature};
use super::assignment::{solve_assignment, GatedCostMatrix};
use super::kalman::KalmanState;
use crate::detect::{Detection, FrameIndex, VehicleClass};
use crate::geom::{iou, BBox};

/// Weight of the existing track feature when blending in a new observation.
const FEATURE_MOMENTUM: f32 = 0.9;

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("frame {got} does not follow frame {last}")]
    FrameRegression { last: FrameIndex, got: FrameIndex },
    #[error("appearance matching is enabled but no frame raster was given for frame {0}")]
    MissingRaster(FrameIndex),
    #[error("appearance feature for frame {frame}: {source}")]
    Appearance { frame: FrameIndex, source: AppearanceError },
    #[error("invalid tracker parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerParams {
    #[serde(default = "defaults::iou_threshold")]
    pub iou_threshold: f64,
    #[serde(default = "defaults::score_high")]
    pub score_high: f32,
    #[serde(default = "defaults::score_low")]
    pub score_low: f32,
    #[serde(default = "defaults::cosine_distance_max")]
    pub cosine_distance_max: f64,
    #[serde(default = "defaults::min_hits")]
    pub min_hits: u32,
    #[serde(default = "defaults::max_time_lost")]
    pub max_time_lost: u32,
    #[serde(default)]
    pub appearance: bool,
}

mod defaults {
    pub fn iou_threshold() -> f64 {
        0.45
    }
    pub fn score_high() -> f32 {
        0.7
    }
    pub fn score_low() -> f32 {
        0.1
    }
    pub fn cosine_distance_max() -> f64 {
        0.4
    }
    pub fn min_hits() -> u32 {
        3
    }
    pub fn max_time_lost() -> u32 {
        30
    }
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            iou_threshold: defaults::iou_threshold(),
            score_high: defaults::score_high(),
            score_low: defaults::score_low(),
            cosine_distance_max: defaults::cosine_distance_max(),
            min_hits: defaults::min_hits(),
            max_time_lost: defaults::max_time_lost(),
            appearance: false,
        }
    }
}

impl TrackerParams {
    /// BoT-SORT style defaults (appearance matching on).
    pub fn with_appearance() -> Self {
        Self { appearance: true, ..Self::default() }
    }

    /// Field-level validation messages; empty when valid.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let unit = |name: &str, v: f64, errs: &mut Vec<String>| {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("{name}: {v} outside [0, 1]"));
            }
        };
        unit("iou_threshold", self.iou_threshold, &mut errs);
        unit("score_high", self.score_high as f64, &mut errs);
        unit("score_low", self.score_low as f64, &mut errs);
        unit("cosine_distance_max", self.cosine_distance_max, &mut errs);
        if self.score_low >= self.score_high {
            errs.push(format!("score_low: {} must be below score_high {}", self.score_low, self.score_high));
        }
        if self.min_hits == 0 {
            errs.push("min_hits: must be at least 1".into());
        }
        errs
    }

    pub fn validate(&self) -> Result<(), TrackerError> {
        let errs = self.validation_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(TrackerError::InvalidParams(errs.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackStatus {
    Tentative,
    Active,
    Lost,
    Removed,
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: u32,
    pub state: KalmanState,
    pub status: TrackStatus,
    pub age: u32,
    pub time_since_update: u32,
    pub hits: u32,
    pub history: Vec<(FrameIndex, BBox)>,
    pub feature: Option<Feature>,
    pub last_score: f32,
    class_votes: BTreeMap<VehicleClass, f64>,
}

impl Track {
    /// Class with the highest accumulated detection score.
    pub fn cls(&self) -> VehicleClass {
        self.class_votes
            .iter()
            .fold(None::<(VehicleClass, f64)>, |best, (c, w)| match best {
                Some((_, bw)) if bw >= *w => best,
                _ => Some((*c, *w)),
            })
            .map(|(c, _)| c)
            .unwrap_or(VehicleClass::Other)
    }

    pub fn bbox(&self) -> BBox {
        self.state.bbox()
    }

    fn observe(&mut self, frame: FrameIndex, det: &Detection, feature: Option<&Feature>) {
        // measurement boxes are validated on construction
        self.state = self.state.update(&det.bbox).expect("valid detection box");
        self.hits += 1;
        self.time_since_update = 0;
        self.last_score = det.score;
        self.history.push((frame, det.bbox));
        *self.class_votes.entry(det.cls).or_default() += det.score as f64;
        if let Some(f) = feature {
            self.feature = Some(match &self.feature {
                Some(old) => old.blend(f, FEATURE_MOMENTUM),
                None => f.clone(),
            });
        }
    }
}

/// One confirmed track as reported for a frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackOutput {
    pub track_id: u32,
    pub cls: VehicleClass,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f32,
}

/// Canonical detection order: score descending, then class and box.
fn canonical_order(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then(a.cls.cmp(&b.cls)).then_with(|| {
        let (x, y) = (a.bbox.to_array(), b.bbox.to_array());
        x.iter().zip(&y).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
    })
}

pub struct Tracker {
    params: TrackerParams,
    tracks: Vec<Track>,
    next_id: u32,
    last_frame: Option<FrameIndex>,
    removed: u32,
    embedder: Box<dyn AppearanceEmbedder>,
}

impl std::fmt::Debug for Tracker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tracker")
            .field("params", &self.params)
            .field("tracks", &self.tracks.len())
            .field("next_id", &self.next_id)
            .field("last_frame", &self.last_frame)
            .finish()
    }
}

impl Tracker {
    pub fn new(params: TrackerParams) -> Result<Self, TrackerError> {
        Self::with_embedder(params, Box::new(ColorHistogram))
    }

    pub fn with_embedder(params: TrackerParams, embedder: Box<dyn AppearanceEmbedder>) -> Result<Self, TrackerError> {
        params.validate()?;
        Ok(Self { params, tracks: Vec::new(), next_id: 1, last_frame: None, removed: 0, embedder })
    }

    pub fn params(&self) -> &TrackerParams {
        &self.params
    }

    /// Live (non-removed) tracks, ordered by id.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn removed_count(&self) -> u32 {
        self.removed
    }

    fn cost_matrix(
        &self,
        track_idx: &[usize],
        dets: &[Detection],
        det_features: Option<&[Feature]>,
        use_appearance: bool,
    ) -> GatedCostMatrix {
        let predicted: Vec<BBox> = track_idx.iter().map(|&i| self.tracks[i].bbox()).collect();
        GatedCostMatrix::from_fn(track_idx.len(), dets.len(), |r, c| {
            let overlap = iou(&predicted[r], &dets[c].bbox);
            if overlap < self.params.iou_threshold {
                return None;
            }
            let motion = 1.0 - overlap;
            if !use_appearance {
                return Some(motion);
            }
            let track_feat = self.tracks[track_idx[r]].feature.as_ref();
            match (track_feat, det_features.map(|f| &f[c])) {
                (Some(tf), Some(df)) => {
                    let d = cosine_distance(tf.as_slice(), df.as_slice()).unwrap_or(2.0);
                    (d <= self.params.cosine_distance_max).then_some(motion.min(d))
                }
                _ => Some(motion),
            }
        })
    }

    /// Processes one frame. `high` and `low` are the two detection bands.
    pub fn step(
        &mut self,
        frame: FrameIndex,
        high: &[Detection],
        low: &[Detection],
        raster: Option<&RgbImage>,
    ) -> Result<Vec<TrackOutput>, TrackerError> {
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(TrackerError::FrameRegression { last, got: frame });
            }
        }
        if self.params.appearance && raster.is_none() {
            return Err(TrackerError::MissingRaster(frame));
        }
        let first_frame = self.last_frame.is_none();
        let gap = self.last_frame.map_or(1, |l| frame - l);

        let mut high = high.to_vec();
        high.sort_by(canonical_order);
        let mut low = low.to_vec();
        low.sort_by(canonical_order);

        let det_features: Option<Vec<Feature>> = match (self.params.appearance, raster) {
            (true, Some(img)) => Some(
                high.iter()
                    .map(|d| self.embedder.embed(img, &d.bbox))
                    .collect::<Result<_, _>>()
                    .map_err(|source| TrackerError::Appearance { frame, source })?,
            ),
            _ => None,
        };

        for t in &mut self.tracks {
            for _ in 0..gap {
                t.state = t.state.predict();
            }
            t.age += gap;
            t.time_since_update += gap;
        }

        let mut det_taken = vec![false; high.len()];
        let mut track_matched = vec![false; self.tracks.len()];

        // stage 1: confirmed and lost tracks vs high band
        let pool: Vec<usize> = (0..self.tracks.len())
            .filter(|&i| matches!(self.tracks[i].status, TrackStatus::Active | TrackStatus::Lost))
            .collect();
        let m = self.cost_matrix(&pool, &high, det_features.as_deref(), self.params.appearance);
        for (r, c) in solve_assignment(&m) {
            let t = &mut self.tracks[pool[r]];
            t.observe(frame, &high[c], det_features.as_ref().map(|f| &f[c]));
            t.status = TrackStatus::Active;
            track_matched[pool[r]] = true;
            det_taken[c] = true;
        }

        // tentative tracks vs remaining high band
        let tentative: Vec<usize> =
            (0..self.tracks.len()).filter(|&i| self.tracks[i].status == TrackStatus::Tentative).collect();
        let rest: Vec<usize> = (0..high.len()).filter(|&c| !det_taken[c]).collect();
        let rest_dets: Vec<Detection> = rest.iter().map(|&c| high[c]).collect();
        let rest_feats: Option<Vec<Feature>> =
            det_features.as_ref().map(|f| rest.iter().map(|&c| f[c].clone()).collect());
        let m = self.cost_matrix(&tentative, &rest_dets, rest_feats.as_deref(), self.params.appearance);
        for (r, c) in solve_assignment(&m) {
            let t = &mut self.tracks[tentative[r]];
            t.observe(frame, &rest_dets[c], rest_feats.as_ref().map(|f| &f[c]));
            if t.hits >= self.params.min_hits {
                t.status = TrackStatus::Active;
            }
            track_matched[tentative[r]] = true;
            det_taken[rest[c]] = true;
        }

        // stage 2: tracks that were active before this frame vs low band
        let second: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&i| !track_matched[i] && self.tracks[i].status == TrackStatus::Active)
            .collect();
        let m = self.cost_matrix(&second, &low, None, false);
        for (r, c) in solve_assignment(&m) {
            self.tracks[second[r]].observe(frame, &low[c], None);
            track_matched[second[r]] = true;
        }

        for (i, t) in self.tracks.iter_mut().enumerate() {
            if track_matched[i] {
                continue;
            }
            t.status = match t.status {
                TrackStatus::Tentative => TrackStatus::Removed,
                TrackStatus::Active => TrackStatus::Lost,
                TrackStatus::Lost if t.time_since_update > self.params.max_time_lost => TrackStatus::Removed,
                other => other,
            };
        }
        let before = self.tracks.len();
        self.tracks.retain(|t| t.status != TrackStatus::Removed);
        self.removed += (before - self.tracks.len()) as u32;

        for (c, det) in high.iter().enumerate() {
            if det_taken[c] || det.score < self.params.score_high {
                continue;
            }
            let status =
                if first_frame || self.params.min_hits <= 1 { TrackStatus::Active } else { TrackStatus::Tentative };
            let mut track = Track {
                id: self.next_id,
                state: KalmanState::initiate(&det.bbox),
                status,
                age: 0,
                time_since_update: 0,
                hits: 1,
                history: vec![(frame, det.bbox)],
                feature: det_features.as_ref().map(|f| f[c].clone()),
                last_score: det.score,
                class_votes: BTreeMap::new(),
            };
            track.class_votes.insert(det.cls, det.score as f64);
            self.next_id += 1;
            self.tracks.push(track);
        }

        self.last_frame = Some(frame);
        Ok(self
            .tracks
            .iter()
            .filter(|t| t.status == TrackStatus::Active && t.time_since_update == 0)
            .map(|t| TrackOutput { track_id: t.id, cls: t.cls(), bbox: t.bbox().quantized(), score: t.last_score })
            .collect())
    }
}
