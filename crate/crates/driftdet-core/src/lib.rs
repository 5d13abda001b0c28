//! driftdet: a desk-scale testbed for unsupervised domain adaptation in
//! object detection.
//!
//! The crate generates paired synthetic detection datasets with controllable
//! domain shift, trains a small single-stage detector from scratch, and
//! adapts it across domains at three levels: statistical image translation,
//! adversarial feature alignment through a gradient reversal layer, and
//! teacher-to-student pseudo-labeling. Evaluation covers AP@0.5 under two
//! interpolation conventions, gap coverage, and Fréchet feature distances.

pub mod audit;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scenegen;
pub mod translator;
pub mod types;

pub use error::{Error, Result};
pub use types::{Annotation, BoundingBox, Domain, Provenance, RgbImage, Sample};
