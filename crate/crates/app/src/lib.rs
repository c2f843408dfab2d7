//! Command-line and HTTP front end of the tracking engine.
//!
//! [`session`] owns the on-disk layout of a session and the blocking
//! operations on it; [`server`] exposes them over HTTP with status events.

pub mod server;
pub mod session;
