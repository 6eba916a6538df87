//! Contour quality assessment with ordinal Bayesian classification.
//!
//! The crate is organised along the processing chain:
//!
//! * [`geometry`] - raster masks, DSC / surface DSC / HD95, surrogate quality labels
//! * [`synthgen`] - synthetic reference shapes, pseudo-CT slices and perturbed contours
//! * [`boc_net`] - dropout network with a conditional ordinal head, CORN loss, Adam training
//! * [`uq`] - predictive moments from Monte Carlo dropout passes, rater entropy and voting
//! * [`calibration`] - accuracy-vs-uncertainty curves, threshold selection, selective evaluation
//! * [`decision`] - confident/abstain verdicts and the clinician warning rule

pub mod boc_net;
pub mod calibration;
pub mod decision;
pub mod error;
pub mod geometry;
pub mod rng;
pub mod synthgen;
pub mod uq;

pub use error::{QaError, Result};

/// Number of ordinal quality classes used throughout (0 = not acceptable,
/// 1 = major revision, 2 = no/minor revision).
pub const NUM_CLASSES: usize = 3;
