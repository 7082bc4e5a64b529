//! Intrinsic image decomposition laboratory.
//!
//! Splits an image into reflectance and shading (`I = R * S`) using
//! illumination-invariant priors and a progressive encoder-decoder network
//! trained with a small reverse-mode autodiff kernel.

pub mod autodiff;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod priors;
pub mod signet;
pub mod synth;
