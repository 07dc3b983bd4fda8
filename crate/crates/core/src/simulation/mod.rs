//! Stand-ins for the human annotator and the detector.

pub mod annotator;
pub mod mock;
pub mod harness;
pub mod scenario;
