//! Instance-wise quality-distribution label assignment for dense object
//! detectors.
//!
//! Each ground-truth instance gets a per-level Gaussian-mixture quality
//! surface over normalized in-box offsets. Positive training samples are
//! drawn from that surface at floating-point locations, read out of the
//! prediction maps with bilinear interpolation, and supervised with the
//! quality value as a soft label. The mixture parameters come from a small
//! encoder over the RoIAligned ground-truth feature and are trained against
//! the IoU of the detector's own predicted boxes.
//!
//! All numeric code is generic over [`Real`] (`f32` or `f64`); the aliases
//! below pin the common concrete choices.

pub mod assign;
pub mod error;
pub mod geometry;
pub mod gridops;
pub mod io;
pub mod losses;
pub mod params;
pub mod qde;
pub mod qdist;
pub mod scalar;
pub mod toytrain;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Box64 = geometry::BBox<f64>;
pub type Box32 = geometry::BBox<f32>;
pub type Grid64 = gridops::FeatureGrid<f64>;
pub type Grid32 = gridops::FeatureGrid<f32>;
pub type Gmm64 = qdist::QualityGmm<f64>;
pub type Gmm32 = qdist::QualityGmm<f32>;
pub type Encoder64 = qde::EncoderWeights<f64>;
pub type Encoder32 = qde::EncoderWeights<f32>;
pub type Detector64 = toytrain::ToyDetector<f64>;
pub type Detector32 = toytrain::ToyDetector<f32>;
