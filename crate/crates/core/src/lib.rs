//! Volumetric radar-echo nowcasting: unit transforms, denoising,
//! semi-Lagrangian extrapolation, per-level variational motion estimation,
//! verification and analysis.

pub mod advect;
pub mod analysis;
pub mod denoise;
pub mod error;
pub mod flow;
pub mod grid;
pub mod io;
pub mod synth;
pub mod transform;
pub mod verify;

pub use error::{Error, Result};
pub use grid::{MotionField, Oob, RadarVolume, RainField, Space};
