//! Multicontinuum homogenization for two-dimensional high-contrast parabolic
//! problems, with partially explicit time stepping.
//!
//! The pipeline runs bottom-up: a [`geometry::MeshHierarchy`] and a
//! [`media::CoefficientField`] feed the constrained cell problems in
//! [`upscale`], whose effective tensors drive the spectral splitting in
//! [`split`] and the coarse time steppers in [`macrosystem`]. The fine-grid
//! [`reference`] solver and [`postprocess`] close the loop with error curves,
//! and [`experiment`] wires everything to configuration files.

pub mod assembly;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod linalg;
pub mod macrosystem;
pub mod media;
pub mod postprocess;
pub mod reference;
pub mod split;
pub mod upscale;

pub use error::{Error, Result};
