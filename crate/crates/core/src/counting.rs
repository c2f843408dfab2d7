//! Per-class vehicle counting over a stream of tracker outputs.
//!
//! Two independent methods:
//!
//! * **Finish line**: a track is counted once its box center has been inside
//!   a polygon for `dwell` consecutive frames in which the track was reported.
//! * **Motion vector**: a corridor starts at `anchor`, runs `distance` pixels
//!   along `direction_deg` and is `width` pixels wide. A track is counted once
//!   its center has advanced `distance` pixels along the direction since it
//!   first entered the corridor, without straying sideways out of the strip.
//!
//! Angles are in image coordinates: 0° points along +x, 90° along +y (down).

use std::collections::{BTreeMap, BTreeSet};
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{FrameIndex, VehicleClass};
use crate::geom::{Point, Polygon};
use crate::tracking::TrackOutput;

#[derive(Debug, Error)]
pub enum CountingError {
    #[error("invalid zone: {0}")]
    InvalidZone(String),
    #[error("ledger csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("ledger csv line {line}: {msg}")]
    CsvRecord { line: u64, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountMethod {
    FinishLine,
    MotionVector,
}

impl CountMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            CountMethod::FinishLine => "finish_line",
            CountMethod::MotionVector => "motion_vector",
        }
    }

    pub fn from_str_opt(s: &str) -> Option<Self> {
        match s {
            "finish_line" => Some(CountMethod::FinishLine),
            "motion_vector" => Some(CountMethod::MotionVector),
            _ => None,
        }
    }
}

fn default_dwell() -> u32 {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinishLineZone {
    pub region: Polygon,
    #[serde(default = "default_dwell")]
    pub dwell: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionVectorSpec {
    pub anchor: Point,
    pub direction_deg: f64,
    pub distance: f64,
    pub width: f64,
}

impl MotionVectorSpec {
    fn axis(&self) -> (f64, f64) {
        let r = self.direction_deg.to_radians();
        (r.cos(), r.sin())
    }

    /// `(along, lateral)` coordinates of `p` relative to the anchor.
    fn local(&self, p: Point) -> (f64, f64) {
        let (ux, uy) = self.axis();
        let (dx, dy) = (p.x - self.anchor.x, p.y - self.anchor.y);
        (dx * ux + dy * uy, -dx * uy + dy * ux)
    }

    pub fn in_corridor(&self, p: Point) -> bool {
        let (along, lat) = self.local(p);
        (0.0..=self.distance).contains(&along) && lat.abs() <= self.width / 2.0
    }
}

/// Counting configuration as stored in `zones.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_line: Option<FinishLineZone>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion_vector: Option<MotionVectorSpec>,
}

impl ZoneConfig {
    pub fn validate(&self) -> Result<(), CountingError> {
        if let Some(fl) = &self.finish_line {
            if fl.dwell == 0 {
                return Err(CountingError::InvalidZone("finish_line.dwell must be at least 1".into()));
            }
        }
        if let Some(mv) = &self.motion_vector {
            if !(0.0..360.0).contains(&mv.direction_deg) {
                return Err(CountingError::InvalidZone(format!(
                    "motion_vector.direction_deg {} outside [0, 360)",
                    mv.direction_deg
                )));
            }
            if !(mv.distance > 0.0 && mv.distance.is_finite()) {
                return Err(CountingError::InvalidZone("motion_vector.distance must be positive".into()));
            }
            if !(mv.width > 0.0 && mv.width.is_finite()) {
                return Err(CountingError::InvalidZone("motion_vector.width must be positive".into()));
            }
            if !(mv.anchor.x.is_finite() && mv.anchor.y.is_finite()) {
                return Err(CountingError::InvalidZone("motion_vector.anchor must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.finish_line.is_none() && self.motion_vector.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountEvent {
    pub track_id: u32,
    #[serde(rename = "class", with = "class_name")]
    pub cls: VehicleClass,
    pub frame: FrameIndex,
    pub method: CountMethod,
}

pub(crate) mod class_name {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    use crate::detect::VehicleClass;

    pub fn serialize<S: Serializer>(c: &VehicleClass, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(c.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<VehicleClass, D::Error> {
        let s = String::deserialize(d)?;
        VehicleClass::from_name(&s).ok_or_else(|| D::Error::custom(format!("unknown class {s:?}")))
    }
}

/// Append-only list of count events with per-class totals.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "LedgerRepr", into = "LedgerRepr")]
pub struct CountLedger {
    events: Vec<CountEvent>,
    totals: BTreeMap<VehicleClass, u32>,
}

#[derive(Serialize, Deserialize)]
struct LedgerRepr {
    events: Vec<CountEvent>,
    #[serde(default)]
    totals: BTreeMap<String, u32>,
}

impl From<LedgerRepr> for CountLedger {
    fn from(r: LedgerRepr) -> Self {
        // totals are always rebuilt from the events
        let mut ledger = CountLedger::default();
        for e in r.events {
            ledger.push(e);
        }
        ledger
    }
}

impl From<CountLedger> for LedgerRepr {
    fn from(l: CountLedger) -> Self {
        LedgerRepr { totals: l.totals.iter().map(|(c, n)| (c.name().to_string(), *n)).collect(), events: l.events }
    }
}

impl CountLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: CountEvent) {
        *self.totals.entry(event.cls).or_default() += 1;
        self.events.push(event);
    }

    pub fn events(&self) -> &[CountEvent] {
        &self.events
    }

    pub fn totals(&self) -> &BTreeMap<VehicleClass, u32> {
        &self.totals
    }

    pub fn total(&self, cls: VehicleClass) -> u32 {
        self.totals.get(&cls).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), CountingError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["track_id", "class", "frame", "method"])?;
        for e in &self.events {
            wr.write_record([
                e.track_id.to_string(),
                e.cls.name().to_string(),
                e.frame.to_string(),
                e.method.as_str().to_string(),
            ])?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: io::Read>(r: R) -> Result<Self, CountingError> {
        let mut rd = csv::Reader::from_reader(r);
        let mut ledger = CountLedger::new();
        for rec in rd.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |msg: &str| CountingError::CsvRecord { line, msg: msg.to_string() };
            if rec.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            ledger.push(CountEvent {
                track_id: rec[0].parse().map_err(|_| bad("bad track_id"))?,
                cls: VehicleClass::from_name(&rec[1]).ok_or_else(|| bad("unknown class"))?,
                frame: rec[2].parse().map_err(|_| bad("bad frame"))?,
                method: CountMethod::from_str_opt(&rec[3]).ok_or_else(|| bad("unknown method"))?,
            });
        }
        Ok(ledger)
    }
}

/// Finish-line state machine.
#[derive(Debug, Clone)]
pub struct FinishLineCounter {
    zone: FinishLineZone,
    inside: BTreeMap<u32, u32>,
    counted: BTreeSet<u32>,
}

impl FinishLineCounter {
    pub fn new(zone: FinishLineZone) -> Self {
        Self { zone, inside: BTreeMap::new(), counted: BTreeSet::new() }
    }

    /// Feeds the tracks reported at `frame`. Tracks not reported this frame
    /// keep their counter unchanged.
    pub fn update(&mut self, frame: FrameIndex, tracks: &[TrackOutput], ledger: &mut CountLedger) {
        for t in tracks {
            if self.counted.contains(&t.track_id) {
                continue;
            }
            let n = self.inside.entry(t.track_id).or_default();
            if self.zone.region.contains(t.bbox.center()) {
                *n += 1;
            } else {
                *n = 0;
            }
            if *n >= self.zone.dwell {
                self.inside.remove(&t.track_id);
                self.counted.insert(t.track_id);
                ledger.push(CountEvent { track_id: t.track_id, cls: t.cls, frame, method: CountMethod::FinishLine });
            }
        }
    }
}

/// Motion-vector state machine.
#[derive(Debug, Clone)]
pub struct MotionVectorCounter {
    spec: MotionVectorSpec,
    entry: BTreeMap<u32, Point>,
    counted: BTreeSet<u32>,
}

impl MotionVectorCounter {
    pub fn new(spec: MotionVectorSpec) -> Self {
        Self { spec, entry: BTreeMap::new(), counted: BTreeSet::new() }
    }

    pub fn update(&mut self, frame: FrameIndex, tracks: &[TrackOutput], ledger: &mut CountLedger) {
        let (ux, uy) = self.spec.axis();
        for t in tracks {
            if self.counted.contains(&t.track_id) {
                continue;
            }
            let c = t.bbox.center();
            let (along, lat) = self.spec.local(c);
            let entry = match self.entry.get(&t.track_id) {
                Some(e) if lat.abs() <= self.spec.width / 2.0 && along >= 0.0 => *e,
                Some(_) => {
                    self.entry.remove(&t.track_id);
                    continue;
                }
                None if self.spec.in_corridor(c) => {
                    self.entry.insert(t.track_id, c);
                    c
                }
                None => continue,
            };
            let advanced = (c.x - entry.x) * ux + (c.y - entry.y) * uy;
            if advanced >= self.spec.distance {
                self.entry.remove(&t.track_id);
                self.counted.insert(t.track_id);
                ledger.push(CountEvent { track_id: t.track_id, cls: t.cls, frame, method: CountMethod::MotionVector });
            }
        }
    }
}

/// Ledgers produced for one zone configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountResult {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_line: Option<CountLedger>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion_vector: Option<CountLedger>,
}

impl CountResult {
    pub fn ledger(&self, method: CountMethod) -> Option<&CountLedger> {
        match method {
            CountMethod::FinishLine => self.finish_line.as_ref(),
            CountMethod::MotionVector => self.motion_vector.as_ref(),
        }
    }
}

/// Runs every configured method over a frame stream.
#[derive(Debug, Clone)]
pub struct Counter {
    finish_line: Option<(FinishLineCounter, CountLedger)>,
    motion_vector: Option<(MotionVectorCounter, CountLedger)>,
}

impl Counter {
    pub fn new(zones: &ZoneConfig) -> Result<Self, CountingError> {
        zones.validate()?;
        Ok(Self {
            finish_line: zones.finish_line.clone().map(|z| (FinishLineCounter::new(z), CountLedger::new())),
            motion_vector: zones.motion_vector.map(|s| (MotionVectorCounter::new(s), CountLedger::new())),
        })
    }

    pub fn update(&mut self, frame: FrameIndex, tracks: &[TrackOutput]) {
        if let Some((c, l)) = &mut self.finish_line {
            c.update(frame, tracks, l);
        }
        if let Some((c, l)) = &mut self.motion_vector {
            c.update(frame, tracks, l);
        }
    }

    /// Copy of the ledgers so far.
    pub fn snapshot(&self) -> CountResult {
        CountResult {
            finish_line: self.finish_line.as_ref().map(|(_, l)| l.clone()),
            motion_vector: self.motion_vector.as_ref().map(|(_, l)| l.clone()),
        }
    }

    pub fn finish(self) -> CountResult {
        CountResult { finish_line: self.finish_line.map(|(_, l)| l), motion_vector: self.motion_vector.map(|(_, l)| l) }
    }
}

/// Counts a complete in-memory frame stream.
pub fn count_frames<'a>(
    zones: &ZoneConfig,
    frames: impl IntoIterator<Item = (FrameIndex, &'a [TrackOutput])>,
) -> Result<CountResult, CountingError> {
    let mut counter = Counter::new(zones)?;
    for (frame, tracks) in frames {
        counter.update(frame, tracks);
    }
    Ok(counter.finish())
}
