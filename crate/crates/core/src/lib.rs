//! Saliency-guided patch mix-up engine with a desk-scale training harness.
//!
//! The crate covers the full path from raw dataset bytes to evaluated models:
//!
//! - [`tensor`] / [`rng`]: deterministic numeric kernels and seeded sampling
//! - [`autodiff`]: reverse-mode differentiation over those kernels
//! - [`dataio`]: byte-exact dataset parsers, classic augmentation, normalization
//! - [`netlib`]: small CNNs, Nesterov SGD, learning-rate schedules
//! - [`saliency`]: input-gradient saliency maps pooled to patch grids
//! - [`mixers`]: patch-mask construction and the mixing policies
//! - [`evalsuite`]: accuracy, calibration error, FGSM robustness
//! - [`rlmix`]: a policy-gradient controller that picks the split percentile
//! - [`config`] / [`harness`]: reproducible end-to-end runs

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod harness;
pub mod dataio;
pub mod mixers;
pub mod evalsuite;
pub mod netlib;
pub mod rlmix;
pub mod saliency;
pub mod rng;
pub mod tensor;
