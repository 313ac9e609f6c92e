//! The guide's chapters, included so that `cargo test` runs every listing.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/spectral.md")]
pub mod spectral {}

#[doc = include_str!("../../../book/src/integrator.md")]
pub mod integrator {}

#[doc = include_str!("../../../book/src/resonance.md")]
pub mod resonance {}

#[doc = include_str!("../../../book/src/mfe.md")]
pub mod mfe {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
