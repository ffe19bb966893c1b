//! Quality control of reflectivity volumes: polarimetric clutter removal and
//! horizontal morphological despeckling, one altitude level at a time.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::grid::RadarVolume;
use crate::transform::NO_ECHO_DBZ;

/// Sets reflectivity to no-echo wherever ρ_HV is below `rho_min`.
pub fn polarimetric_filter(vol: &RadarVolume, rho_min: f64) -> Result<RadarVolume> {
    if !(rho_min > 0.0 && rho_min <= 1.0) {
        return invalid(format!("rho_min {rho_min} outside (0, 1]"));
    }
    let rho = vol
        .rho_hv()
        .ok_or_else(|| Error::Precondition("volume carries no rho_hv".into()))?
        .to_owned();
    let mut out = vol.clone();
    ndarray::Zip::from(out.data_mut()).and(&rho).for_each(|d, &r| {
        if r < rho_min {
            *d = NO_ECHO_DBZ;
        }
    });
    Ok(out)
}

/// Parameters of [`morphological_clean`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CleanConfig {
    /// Erosion/dilation depth of the opening.
    pub open_iters: usize,
    /// Reflectivity above which echoes are protected from removal.
    pub protect_dbz: f64,
    /// Dilation depth of the protection mask.
    pub dilate_iters: usize,
    /// Echo is anything strictly above this reflectivity.
    pub echo_dbz: f64,
    /// Radius of the diamond structuring element.
    pub radius: usize,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig { open_iters: 2, protect_dbz: 40.0, dilate_iters: 2, echo_dbz: 0.0, radius: 1 }
    }
}

/// Binary dilation with the L1 ball of `radius`, `iters` times.
pub fn dilate(mask: ArrayView2<bool>, radius: usize, iters: usize) -> Array2<bool> {
    let mut cur = mask.to_owned();
    for _ in 0..iters {
        cur = diamond_pass(cur.view(), radius, false);
    }
    cur
}

/// Binary erosion with the L1 ball of `radius`, `iters` times. Cells outside
/// the grid count as background.
pub fn erode(mask: ArrayView2<bool>, radius: usize, iters: usize) -> Array2<bool> {
    let mut cur = mask.to_owned();
    for _ in 0..iters {
        cur = diamond_pass(cur.view(), radius, true);
    }
    cur
}

fn diamond_pass(mask: ArrayView2<bool>, radius: usize, erode: bool) -> Array2<bool> {
    let (ny, nx) = mask.dim();
    let r = radius as isize;
    Array2::from_shape_fn((ny, nx), |(y, x)| {
        let mut any = false;
        let mut all = true;
        for dy in -r..=r {
            let rem = r - dy.abs();
            for dx in -rem..=rem {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                let v = yy >= 0 && xx >= 0 && yy < ny as isize && xx < nx as isize && mask[[yy as usize, xx as usize]];
                any |= v;
                all &= v;
            }
        }
        if erode { all } else { any }
    })
}

/// Cleans one reflectivity plane. Returns the cleaned plane.
pub fn clean_plane(plane: ArrayView2<f64>, valid: ArrayView2<bool>, cfg: &CleanConfig) -> Array2<f64> {
    let echo = ndarray::Zip::from(&plane).and(&valid).map_collect(|&v, &m| m && v > cfg.echo_dbz);
    let opened = dilate(erode(echo.view(), cfg.radius, cfg.open_iters).view(), cfg.radius, cfg.open_iters);
    let strong = ndarray::Zip::from(&plane).and(&valid).map_collect(|&v, &m| m && v > cfg.protect_dbz);
    let protected = dilate(strong.view(), cfg.radius, cfg.dilate_iters);
    let mut out = plane.to_owned();
    ndarray::Zip::from(&mut out)
        .and(&echo)
        .and(&opened)
        .and(&protected)
        .for_each(|v, &e, &o, &p| {
            if e && !o && !p {
                *v = NO_ECHO_DBZ;
            }
        });
    out
}

/// Removes small isolated echoes from every `(t, z)` plane independently.
pub fn morphological_clean(vol: &RadarVolume, cfg: &CleanConfig) -> Result<RadarVolume> {
    if cfg.radius == 0 {
        return invalid("structuring element radius must be >= 1");
    }
    let (t, z, _, _) = vol.dim();
    let planes: Vec<Array2<f64>> = (0..t * z)
        .into_par_iter()
        .map(|i| {
            let (it, iz) = (i / z, i % z);
            clean_plane(
                vol.data().index_axis(Axis(0), it).index_axis(Axis(0), iz),
                vol.mask().index_axis(Axis(0), iz),
                cfg,
            )
        })
        .collect();
    let mut out = vol.clone();
    for (i, p) in planes.into_iter().enumerate() {
        out.data_mut()
            .index_axis_mut(Axis(0), i / z)
            .index_axis_mut(Axis(0), i % z)
            .assign(&p);
    }
    Ok(out)
}

/// Polarimetric filtering (when ρ_HV is present) followed by morphological cleaning.
pub fn denoise(vol: &RadarVolume, rho_min: f64, cfg: &CleanConfig) -> Result<RadarVolume> {
    let filtered = if vol.rho_hv().is_some() { polarimetric_filter(vol, rho_min)? } else { vol.clone() };
    morphological_clean(&filtered, cfg)
}
