//! Tracking and counting evaluation.
//!
//! Per frame, ground truth and predictions of the same class are paired by
//! the assignment solver on cost `1 - IoU`, gated at `iou_min`. Identity
//! switches are counted when a ground-truth object is matched to a different
//! prediction id than at its previous matched frame.
//!
//! Ratios that would divide by zero are `None` and render as blank cells.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::CacheRecord;
use crate::detect::{FrameIndex, GtRecord, VehicleClass};
use crate::geom::iou;
use crate::tracking::{solve_assignment, GatedCostMatrix, TrackOutput};

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty frame-duration series")]
    EmptySeries,
    #[error("frame duration must be positive")]
    NonPositiveDuration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub gt_id: u32,
    pub pred_id: u32,
    pub cls: VehicleClass,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameMatching {
    pub frame: FrameIndex,
    pub matches: Vec<MatchPair>,
    /// `(gt_id, class)` of ground truth left unmatched.
    pub unmatched_gt: Vec<(u32, VehicleClass)>,
    /// `(track_id, class)` of predictions left unmatched.
    pub unmatched_pred: Vec<(u32, VehicleClass)>,
}

/// Class-aware one-to-one matching of one frame.
pub fn match_frame(frame: FrameIndex, gt: &[GtRecord], preds: &[TrackOutput], iou_min: f64) -> FrameMatching {
    let m = GatedCostMatrix::from_fn(gt.len(), preds.len(), |r, c| {
        if gt[r].cls != preds[c].cls {
            return None;
        }
        let v = iou(&gt[r].bbox, &preds[c].bbox);
        (v >= iou_min).then_some(1.0 - v)
    });
    let pairs = solve_assignment(&m);
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; preds.len()];
    let mut out = FrameMatching { frame, ..Default::default() };
    for (r, c) in pairs {
        gt_used[r] = true;
        pred_used[c] = true;
        out.matches.push(MatchPair {
            gt_id: gt[r].gt_id,
            pred_id: preds[c].track_id,
            cls: gt[r].cls,
            iou: iou(&gt[r].bbox, &preds[c].bbox),
        });
    }
    out.unmatched_gt = gt.iter().zip(&gt_used).filter(|(_, u)| !**u).map(|(g, _)| (g.gt_id, g.cls)).collect();
    out.unmatched_pred = preds.iter().zip(&pred_used).filter(|(_, u)| !**u).map(|(p, _)| (p.track_id, p.cls)).collect();
    out
}

/// `1 - (FN + FP + IDS) / denom`; `None` when `denom` is zero.
pub fn mota(fn_total: u64, fp_total: u64, ids_total: u64, denom: u64) -> Option<f64> {
    (denom > 0).then(|| 1.0 - (fn_total + fp_total + ids_total) as f64 / denom as f64)
}

/// Mean IoU over matches; `None` without matches.
pub fn motp(sum_iou: f64, total_matches: u64) -> Option<f64> {
    (total_matches > 0).then(|| sum_iou / total_matches as f64)
}

/// Identity switches over frame-ordered matchings.
pub fn count_ids<'a>(matchings: impl IntoIterator<Item = &'a FrameMatching>) -> u64 {
    let mut last: BTreeMap<u32, u32> = BTreeMap::new();
    let mut ids = 0;
    for fm in matchings {
        for m in &fm.matches {
            if let Some(prev) = last.insert(m.gt_id, m.pred_id) {
                if prev != m.pred_id {
                    ids += 1;
                }
            }
        }
    }
    ids
}

/// Precision, recall and F1; each is `None` on 0/0.
pub fn prf1(tp: u64, fp: u64, fn_: u64) -> (Option<f64>, Option<f64>, Option<f64>) {
    let ratio = |n: u64, d: u64| (d > 0).then(|| n as f64 / d as f64);
    (ratio(tp, tp + fp), ratio(tp, tp + fn_), ratio(2 * tp, 2 * tp + fp + fn_))
}

/// `(FP / detections, FN / gt)`, with 0/0 taken as 0.
pub fn fpr_fnr(fp: u64, fn_: u64, detections_total: u64, gt_total: u64) -> (f64, f64) {
    let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    (ratio(fp, detections_total), ratio(fn_, gt_total))
}

/// `100 * detected / gt`; `None` when `gt` is zero.
pub fn counting_accuracy(detected: u64, gt: u64) -> Option<f64> {
    (gt > 0).then(|| 100.0 * detected as f64 / gt as f64)
}

/// Rounds half away from zero at `digits` decimals, for display.
pub fn round_half_up(x: f64, digits: u32) -> f64 {
    let scale = 10f64.powi(digits as i32);
    let scaled = x * scale;
    // absorb representation error such as 0.9375 * 1000 = 937.4999...
    let nudged = scaled + scaled.signum() * 1e-9 * scaled.abs().max(1.0);
    (nudged.abs() + 0.5).floor() * scaled.signum() / scale
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpsStats {
    /// Per-frame fps, one series per run.
    pub per_frame_fps: Vec<Vec<f64>>,
    pub avg_min_fps: f64,
    pub avg_fps: f64,
    pub avg_max_fps: f64,
    pub fps_range: f64,
}

/// Throughput statistics from frame durations of one or more runs.
pub fn fps_stats(runs: &[Vec<Duration>]) -> Result<FpsStats, MetricsError> {
    if runs.is_empty() || runs.iter().any(Vec::is_empty) {
        return Err(MetricsError::EmptySeries);
    }
    let mut per_frame_fps = Vec::with_capacity(runs.len());
    let (mut mins, mut means, mut maxs) = (0.0, 0.0, 0.0);
    for run in runs {
        if run.iter().any(|d| d.is_zero()) {
            return Err(MetricsError::NonPositiveDuration);
        }
        let fps: Vec<f64> = run.iter().map(|d| 1.0 / d.as_secs_f64()).collect();
        mins += fps.iter().copied().fold(f64::INFINITY, f64::min);
        maxs += fps.iter().copied().fold(0.0, f64::max);
        means += fps.iter().sum::<f64>() / fps.len() as f64;
        per_frame_fps.push(fps);
    }
    let n = runs.len() as f64;
    let (avg_min_fps, avg_fps, avg_max_fps) = (mins / n, means / n, maxs / n);
    Ok(FpsStats { per_frame_fps, avg_min_fps, avg_fps, avg_max_fps, fps_range: avg_max_fps - avg_min_fps })
}

/// Raw counts plus derived ratios for one class, or overall.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub gt_total: u64,
    pub pred_total: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub ids: u64,
    pub total_matches: u64,
    pub sum_iou: f64,
    /// Denominator is the ground-truth instance count.
    pub mota: Option<f64>,
    /// Denominator is the match count, the convention of the published
    /// comparison tables.
    pub mota_matches: Option<f64>,
    pub motp: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub fpr: f64,
    pub fnr: f64,
    /// Distinct ground-truth objects.
    pub gt_objects: u64,
    /// Vehicles reported by the counter (or distinct track ids).
    pub counted: u64,
    pub counting_accuracy_pct: Option<f64>,
}

impl Metrics {
    fn finalize(&mut self) {
        self.mota = mota(self.fn_, self.fp, self.ids, self.gt_total);
        self.mota_matches = mota(self.fn_, self.fp, self.ids, self.total_matches);
        self.motp = motp(self.sum_iou, self.total_matches);
        (self.precision, self.recall, self.f1) = prf1(self.tp, self.fp, self.fn_);
        (self.fpr, self.fnr) = fpr_fnr(self.fp, self.fn_, self.pred_total, self.gt_total);
        self.counting_accuracy_pct = counting_accuracy(self.counted, self.gt_objects);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: u32,
    pub iou_min: f64,
    pub overall: Metrics,
    /// Keyed by lowercase class name.
    pub per_class: BTreeMap<String, Metrics>,
}

/// Evaluates tracker output against ground truth. `counts` holds per-class
/// counter totals; without it, distinct predicted track ids are used.
pub fn evaluate(
    gt: &[GtRecord],
    frames: &[CacheRecord],
    iou_min: f64,
    counts: Option<&BTreeMap<VehicleClass, u32>>,
) -> EvalReport {
    let mut gt_by_frame: BTreeMap<FrameIndex, Vec<GtRecord>> = BTreeMap::new();
    for g in gt {
        gt_by_frame.entry(g.frame).or_default().push(*g);
    }
    let mut by_class: BTreeMap<VehicleClass, Metrics> = BTreeMap::new();
    let mut last_pred: BTreeMap<u32, u32> = BTreeMap::new();
    let mut gt_objects: BTreeMap<VehicleClass, BTreeSet<u32>> = BTreeMap::new();
    let mut pred_objects: BTreeMap<VehicleClass, BTreeSet<u32>> = BTreeMap::new();
    let empty = Vec::new();

    let pred_frames: BTreeMap<FrameIndex, &CacheRecord> = frames.iter().map(|r| (r.frame, r)).collect();
    let all_frames: BTreeSet<FrameIndex> = gt_by_frame.keys().chain(pred_frames.keys()).copied().collect();
    for f in all_frames {
        let g = gt_by_frame.get(&f).unwrap_or(&empty);
        let p: &[TrackOutput] = pred_frames.get(&f).map_or(&[], |r| &r.tracks);
        for x in g {
            by_class.entry(x.cls).or_default().gt_total += 1;
            gt_objects.entry(x.cls).or_default().insert(x.gt_id);
        }
        for x in p {
            by_class.entry(x.cls).or_default().pred_total += 1;
            pred_objects.entry(x.cls).or_default().insert(x.track_id);
        }
        let fm = match_frame(f, g, p, iou_min);
        for m in &fm.matches {
            let s = by_class.entry(m.cls).or_default();
            s.tp += 1;
            s.total_matches += 1;
            s.sum_iou += m.iou;
            if let Some(prev) = last_pred.insert(m.gt_id, m.pred_id) {
                if prev != m.pred_id {
                    s.ids += 1;
                }
            }
        }
        for (_, c) in &fm.unmatched_gt {
            by_class.entry(*c).or_default().fn_ += 1;
        }
        for (_, c) in &fm.unmatched_pred {
            by_class.entry(*c).or_default().fp += 1;
        }
    }

    let mut overall = Metrics::default();
    let mut per_class = BTreeMap::new();
    let classes: BTreeSet<VehicleClass> =
        by_class.keys().copied().chain(counts.into_iter().flat_map(|c| c.keys().copied())).collect();
    for cls in classes {
        let mut s = by_class.remove(&cls).unwrap_or_default();
        s.gt_objects = gt_objects.get(&cls).map_or(0, |x| x.len() as u64);
        s.counted = match counts {
            Some(c) => c.get(&cls).copied().unwrap_or(0) as u64,
            None => pred_objects.get(&cls).map_or(0, |x| x.len() as u64),
        };
        overall.gt_total += s.gt_total;
        overall.pred_total += s.pred_total;
        overall.tp += s.tp;
        overall.fp += s.fp;
        overall.fn_ += s.fn_;
        overall.ids += s.ids;
        overall.total_matches += s.total_matches;
        overall.sum_iou += s.sum_iou;
        overall.gt_objects += s.gt_objects;
        overall.counted += s.counted;
        s.finalize();
        per_class.insert(cls.name().to_string(), s);
    }
    overall.finalize();
    let frame_count = frames.len().max(gt_by_frame.keys().next_back().map_or(0, |f| *f as usize + 1)) as u32;
    EvalReport { frames: frame_count, iou_min, overall, per_class }
}

fn cell(v: Option<f64>, digits: u32) -> String {
    v.map(|x| format!("{:.*}", digits as usize, round_half_up(x, digits))).unwrap_or_default()
}

impl EvalReport {
    /// Aligned text table, one row per class plus an overall row.
    pub fn to_table(&self) -> String {
        let head = [
            "class",
            "GT",
            "Det",
            "TP",
            "FP",
            "FN",
            "IDS",
            "MOTA",
            "MOTP",
            "Precision",
            "Recall",
            "F1",
            "FPR",
            "FNR",
            "IoU",
            "GT n",
            "Counted",
            "Count acc %",
        ];
        let row = |name: &str, m: &Metrics| -> Vec<String> {
            vec![
                name.to_string(),
                m.gt_total.to_string(),
                m.pred_total.to_string(),
                m.tp.to_string(),
                m.fp.to_string(),
                m.fn_.to_string(),
                m.ids.to_string(),
                cell(m.mota, 4),
                cell(m.motp, 3),
                cell(m.precision, 2),
                cell(m.recall, 2),
                cell(m.f1, 2),
                cell(Some(m.fpr), 3),
                cell(Some(m.fnr), 3),
                format!("{}", self.iou_min),
                m.gt_objects.to_string(),
                m.counted.to_string(),
                cell(m.counting_accuracy_pct, 2),
            ]
        };
        let mut rows: Vec<Vec<String>> = vec![head.iter().map(|s| s.to_string()).collect()];
        for (name, m) in &self.per_class {
            rows.push(row(name, m));
        }
        rows.push(row("all", &self.overall));
        let widths: Vec<usize> = (0..head.len()).map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::BBox;

    fn g(frame: u32, id: u32, x: f64) -> GtRecord {
        GtRecord { frame, gt_id: id, cls: VehicleClass::Car, bbox: BBox::new(x, 0.0, 10.0, 10.0).unwrap() }
    }

    fn p(id: u32, x: f64) -> TrackOutput {
        TrackOutput { track_id: id, cls: VehicleClass::Car, bbox: BBox::new(x, 0.0, 10.0, 10.0).unwrap(), score: 1.0 }
    }

    #[test]
    fn identical_boxes_all_match() {
        let fm = match_frame(0, &[g(0, 1, 0.0), g(0, 2, 50.0)], &[p(7, 50.0), p(8, 0.0)], 0.5);
        assert_eq!(fm.matches.len(), 2);
        assert!(fm.matches.iter().all(|m| m.iou == 1.0));
        assert_eq!((fm.matches[0].gt_id, fm.matches[0].pred_id), (1, 8));
    }

    #[test]
    fn disjoint_boxes_unmatched() {
        let fm = match_frame(0, &[g(0, 1, 0.0)], &[p(1, 100.0)], 0.5);
        assert!(fm.matches.is_empty());
        assert_eq!(fm.unmatched_gt, vec![(1, VehicleClass::Car)]);
        assert_eq!(fm.unmatched_pred, vec![(1, VehicleClass::Car)]);
    }

    #[test]
    fn class_mismatch_never_matches() {
        let mut pred = p(1, 0.0);
        pred.cls = VehicleClass::Bus;
        assert!(match_frame(0, &[g(0, 1, 0.0)], &[pred], 0.5).matches.is_empty());
    }

    #[test]
    fn mota_motp_examples() {
        assert_eq!(mota(0, 3, 1, 64), Some(0.9375));
        assert!((mota(0, 2, 0, 63).unwrap() - 0.968).abs() < 5e-4);
        assert_eq!(mota(0, 0, 0, 10), Some(1.0));
        assert_eq!(mota(1, 0, 0, 0), None);
        assert!((motp(61.0, 64).unwrap() - 0.953).abs() < 5e-4);
        assert_eq!(motp(0.0, 0), None);
    }

    #[test]
    fn prf1_examples() {
        let (pr, r, f) = prf1(46, 0, 2);
        assert_eq!(pr, Some(1.0));
        assert!((r.unwrap() - 0.9583).abs() < 1e-4);
        assert!((f.unwrap() - 0.9787).abs() < 1e-4);
        assert_eq!(prf1(0, 0, 0), (None, None, None));
        assert_eq!(prf1(0, 3, 2).2, Some(0.0));
    }

    #[test]
    fn fpr_fnr_zero_fill() {
        assert_eq!(fpr_fnr(0, 0, 0, 0), (0.0, 0.0));
        let (a, b) = fpr_fnr(2, 3, 63, 7);
        assert!((a - 0.0317).abs() < 1e-4 && (b - 0.4286).abs() < 1e-4);
    }

    #[test]
    fn rounding() {
        assert_eq!(round_half_up(0.9375, 3), 0.938);
        assert_eq!(round_half_up(0.96825, 4), 0.9683);
        assert_eq!(round_half_up(103.2787, 2), 103.28);
        assert_eq!(round_half_up(0.125, 2), 0.13);
        assert_eq!(round_half_up(-0.125, 2), -0.13);
    }

    #[test]
    fn fps_examples() {
        let s = fps_stats(&[vec![Duration::from_millis(25); 4]]).unwrap();
        assert!((s.avg_min_fps - 40.0).abs() < 1e-9 && (s.avg_max_fps - 40.0).abs() < 1e-9 && s.fps_range.abs() < 1e-9);
        let ms = |f: f64| Duration::from_secs_f64(1.0 / f);
        let s = fps_stats(&[vec![ms(20.0), ms(40.0)], vec![ms(30.0), ms(50.0)]]).unwrap();
        assert!((s.avg_min_fps - 25.0).abs() < 1e-6);
        assert!((s.avg_max_fps - 45.0).abs() < 1e-6);
        assert!((s.fps_range - 20.0).abs() < 1e-6);
        assert_eq!(fps_stats(&[]), Err(MetricsError::EmptySeries));
        assert_eq!(fps_stats(&[vec![]]), Err(MetricsError::EmptySeries));
    }

    #[test]
    fn perfect_report() {
        let gt: Vec<GtRecord> = (0..5).flat_map(|f| [g(f, 1, f as f64), g(f, 2, 100.0)]).collect();
        let frames: Vec<CacheRecord> =
            (0..5).map(|f| CacheRecord { frame: f, tracks: vec![p(1, f as f64), p(2, 100.0)] }).collect();
        let r = evaluate(&gt, &frames, 0.5, None);
        let m = &r.overall;
        assert_eq!((m.tp, m.fp, m.fn_, m.ids), (10, 0, 0, 0));
        assert_eq!(m.mota, Some(1.0));
        assert_eq!(m.motp, Some(1.0));
        assert_eq!((m.precision, m.recall, m.f1), (Some(1.0), Some(1.0), Some(1.0)));
        assert_eq!(m.counting_accuracy_pct, Some(100.0));
        assert!(r.to_table().lines().count() == 3);
    }
}
