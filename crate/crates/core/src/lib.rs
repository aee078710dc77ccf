//! Crowd video analytics toolkit.
//!
//! Three analysis pipelines operate on grayscale frame sequences:
//!
//! - [`flowseg`]: dominant-flow segmentation of the instantaneous motion field
//!   (K-means over flow orientation plus blob absorption) and per-segment
//!   people counting from foreground blobs.
//! - [`advection`]: particle advection over dense optical flow, tracklet
//!   linking, LCSS-based track clustering and source/sink reporting.
//! - [`groups`]: pedestrian group detection from trajectories via an
//!   association matrix and KL-divergence couple pruning.
//!
//! [`simulate`] is a floor-field cellular automaton that renders synthetic
//! footage with known ground truth, so the pipelines above can be checked end
//! to end. [`raster`], [`motion`] and [`foreground`] hold the pixel-level
//! substrate shared by everything else.

pub mod advection;
pub mod error;
pub mod flowseg;
pub mod foreground;
pub mod groups;
pub mod motion;
pub mod raster;
pub mod simulate;

pub use error::{Error, Result};
