//! Model-assisted annotation loop.
//!
//! A small set of manually labeled images seeds a detector; the detector
//! pre-labels the next batch, a reviewer corrects the boxes, the corrections
//! join the training pool and the detector is trained again. This crate holds
//! the label formats, box geometry and augmentation, detection metrics, the
//! on-disk workspace, the detector process contract, a simulated detector and
//! annotator, and the loop driver itself.

pub mod adapter;
pub mod clock;
mod fsutil;
pub mod geometry;
pub mod labelfmt;
pub mod metrics;
pub mod orchestrator;
pub mod review;
mod rng;
pub mod simulation;
pub mod workspace;

pub use geometry::{Affine2, AugmentationSpec, ImageDims};
pub use labelfmt::{BoundingBox, LabelMap, Prediction};
