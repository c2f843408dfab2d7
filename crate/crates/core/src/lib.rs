//! Vehicle tracking and counting engine.
//!
//! Detections (from a file or an external inference program) are filtered
//! through a region mask, associated into tracks, persisted to a replayable
//! cache and counted with finish-line or motion-vector rules. The metrics
//! module scores tracker output against ground truth.

pub mod cache;
pub mod counting;
pub mod detect;
pub mod gallery;
pub mod geom;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod tracking;

pub use detect::{Detection, DetectorConfig, FrameIndex, VehicleClass};
pub use geom::{BBox, Point, Polygon};
pub use tracking::{TrackOutput, Tracker, TrackerParams};
