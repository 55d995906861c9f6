//! Discriminative-template tracking head over feature pyramids.
//!
//! An object is represented by a single feature vector read from the pyramid
//! level matching its scale. Templates (plain, sampled means, or a ridge
//! regression against sampled negatives) produce per-level similarity maps
//! that reweight the pyramid, and a per-frame selector with optional temporal
//! smoothing turns scored candidates into a track. A synthetic backbone and
//! the usual benchmark metrics make the whole loop testable without a CNN.

pub mod attention;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod pyramid;
pub mod synth;
pub mod template;
pub mod tracker;

pub use error::{Error, Result};
pub use pyramid::{BoundingBox, FeatureMap, FeaturePyramid, Mask};
pub use template::{TemplateKind, TemplateVector};
pub use tracker::{Detection, Track, TrackerConfig};
