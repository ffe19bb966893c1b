//! Backward semi-Lagrangian extrapolation under Lagrangian persistence.
//!
//! Each output cell samples the input at its upstream departure point
//! `p − u(p)`. Values are interpolated bilinearly; validity is carried along
//! with nearest-neighbor sampling, and departure points outside the grid are
//! flagged invalid.

use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{invalid, shape, Result};
use crate::grid::{sample_fill_grad, MotionField, Oob, RadarVolume, RainField};
use crate::transform::NO_ECHO_DBZ;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    #[default]
    BackwardSemiLagrangian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtrapolationConfig {
    pub steps: usize,
    pub interp: Interpolation,
    pub oob: Oob,
    pub scheme: Scheme,
}

impl ExtrapolationConfig {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return invalid("extrapolation needs at least one step");
        }
        Ok(ExtrapolationConfig { steps, interp: Interpolation::Bilinear, oob: Oob::Zero, scheme: Scheme::default() })
    }
}

/// One backward warp of a single plane. With [`Oob::Zero`], neighbors outside
/// the grid read as `fill` (the no-precipitation value of the field's space).
pub fn advect_plane(
    field: ArrayView2<f64>,
    mask: ArrayView2<bool>,
    ux: ArrayView2<f64>,
    uy: ArrayView2<f64>,
    oob: Oob,
    fill: f64,
) -> (Array2<f64>, Array2<bool>) {
    let (ny, nx) = field.dim();
    let mut out = Array2::zeros((ny, nx));
    let mut out_mask = Array2::from_elem((ny, nx), false);
    for iy in 0..ny {
        for ix in 0..nx {
            let mut sx = ix as f64 - ux[[iy, ix]];
            let mut sy = iy as f64 - uy[[iy, ix]];
            let (rx, ry) = (sx.round(), sy.round());
            out_mask[[iy, ix]] = rx >= 0.0
                && ry >= 0.0
                && rx <= (nx - 1) as f64
                && ry <= (ny - 1) as f64
                && mask[[ry as usize, rx as usize]];
            if oob == Oob::Clamp {
                sx = sx.clamp(0.0, (nx - 1) as f64);
                sy = sy.clamp(0.0, (ny - 1) as f64);
            }
            out[[iy, ix]] = sample_fill_grad(field, sx, sy, fill).0;
        }
    }
    (out, out_mask)
}

fn check_shapes(field: &RainField, mf: &MotionField) -> Result<()> {
    if field.dim() != mf.dim() {
        return shape(format!("field {:?} vs motion {:?}", field.dim(), mf.dim()));
    }
    Ok(())
}

fn advect_with(field: &RainField, mf: &MotionField, oob: Oob) -> Result<RainField> {
    check_shapes(field, mf)?;
    let (z, ny, nx) = field.dim();
    let fill = field.space().background();
    let levels: Vec<_> = (0..z)
        .into_par_iter()
        .map(|k| {
            let u = mf.level(k);
            advect_plane(
                field.level(k),
                field.level_mask(k),
                u.index_axis(Axis(0), 0),
                u.index_axis(Axis(0), 1),
                oob,
                fill,
            )
        })
        .collect();
    let mut data = Array3::zeros((z, ny, nx));
    let mut mask = Array3::from_elem((z, ny, nx), false);
    for (k, (d, m)) in levels.into_iter().enumerate() {
        data.index_axis_mut(Axis(0), k).assign(&d);
        mask.index_axis_mut(Axis(0), k).assign(&m);
    }
    RainField::new(data, field.space(), mask)
}

/// One time step of advection of every level by its own motion field.
pub fn advect_once(field: &RainField, mf: &MotionField) -> Result<RainField> {
    advect_with(field, mf, Oob::Zero)
}

/// `k` iterated one-step advections; element `i` is the lead `i + 1` forecast.
pub fn extrapolate(field: &RainField, mf: &MotionField, k: usize) -> Result<Vec<RainField>> {
    extrapolate_with(field, mf, &ExtrapolationConfig::new(k)?)
}

pub fn extrapolate_with(field: &RainField, mf: &MotionField, cfg: &ExtrapolationConfig) -> Result<Vec<RainField>> {
    check_shapes(field, mf)?;
    let mut out = Vec::with_capacity(cfg.steps);
    let mut cur = field.clone();
    for _ in 0..cfg.steps {
        cur = advect_with(&cur, mf, cfg.oob)?;
        out.push(cur.clone());
    }
    Ok(out)
}

/// Reflectivity nowcast from frame `origin` of a volume: `leads` frames of
/// advected dBZ. A single-level motion field on a multi-level volume advects
/// the column-maximum composite. Cells entering from outside the grid are
/// no-echo; the observation mask of the origin volume is kept.
pub fn extrapolate_volume(vol: &RadarVolume, mf: &MotionField, origin: usize, leads: usize) -> Result<RadarVolume> {
    if leads == 0 {
        return invalid("nowcast needs at least one lead");
    }
    let (t, z, ny, nx) = vol.dim();
    if origin >= t {
        return invalid(format!("origin frame {origin} outside 0..{t}"));
    }
    let (mz, my, mx) = mf.dim();
    if (my, mx) != (ny, nx) {
        return shape(format!("motion grid {my}x{mx} vs volume {ny}x{nx}"));
    }
    let src = if mz == 1 && z > 1 {
        vol.cmax()
    } else if mz == z {
        vol.clone()
    } else {
        return shape(format!("motion has {mz} levels, volume {z}"));
    };
    let zs = src.dim().1;
    let mut data = Array4::from_elem((leads, zs, ny, nx), NO_ECHO_DBZ);
    let per_level: Vec<Vec<Array2<f64>>> = (0..zs)
        .into_par_iter()
        .map(|k| {
            let u = mf.level(k);
            let mut cur = src.frame(origin).index_axis(Axis(0), k).to_owned();
            let valid = src.mask().index_axis(Axis(0), k).to_owned();
            (0..leads)
                .map(|_| {
                    let (next, _) = advect_plane(
                        cur.view(),
                        valid.view(),
                        u.index_axis(Axis(0), 0),
                        u.index_axis(Axis(0), 1),
                        Oob::Zero,
                        NO_ECHO_DBZ,
                    );
                    cur = next;
                    cur.clone()
                })
                .collect()
        })
        .collect();
    for (k, frames) in per_level.into_iter().enumerate() {
        for (l, f) in frames.into_iter().enumerate() {
            data.index_axis_mut(Axis(0), l).index_axis_mut(Axis(0), k).assign(&f);
        }
    }
    RadarVolume::new(data, src.z_levels().to_vec(), src.dt())?.with_mask(src.mask().to_owned())
}
