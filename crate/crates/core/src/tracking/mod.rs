//! Multi-object tracking: motion model, assignment, appearance and the
//! tracker state machine.

pub mod appearance;
pub mod assignment;
pub mod kalman;
pub mod tracker;

pub use appearance::{appearance_embed, cosine_distance, AppearanceEmbedder, ColorHistogram, Feature};
pub use assignment::{solve_assignment, GatedCostMatrix};
pub use kalman::KalmanState;
pub use tracker::{Track, TrackOutput, TrackStatus, Tracker, TrackerError, TrackerParams};
