//! Shared fixtures for the kernel benchmarks.

use voxflow_core::grid::{MotionField, RainField, Space};
use voxflow_core::advect::advect_once;

/// A smooth dBR blob translated by `(ux, uy)` per step over `frames` frames.
pub fn translating_blob(n: usize, frames: usize, ux: f64, uy: f64) -> (Vec<RainField>, MotionField) {
    let mf = MotionField::uniform(1, n, n, ux, uy);
    let c = n as f64 / 2.0;
    let s2 = (n as f64 / 8.0).powi(2);
    let seed = ndarray::Array2::from_shape_fn((n, n), |(y, x)| {
        let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
        -15.0 + 45.0 * (-r2 / (2.0 * s2)).exp()
    });
    let mut out = vec![RainField::from_plane(seed, Space::Dbr, None).expect("valid seed")];
    for _ in 1..frames {
        let next = advect_once(out.last().expect("non-empty"), &mf).expect("matching shapes");
        out.push(next);
    }
    (out, mf)
}
