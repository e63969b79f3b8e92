//! Volumetric MRI denoising toolkit.
//!
//! Implements a two-stage scheme on 3D magnitude images: a local-PCA filter
//! with eigenvalue shrinkage, followed by a rotationally invariant non-local
//! means pass guided by the first-stage output, with Rician bias handling
//! throughout (noise estimation, intensity correction, noise-map correction).

pub mod error;
pub mod metrics;
pub mod nlpca;
pub mod noise;
pub mod phantom;
pub mod pipeline;
pub mod prinlm;
pub(crate) mod stats;
pub mod tuner;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{PatchGeometry, RoiMask, Volume3D};
