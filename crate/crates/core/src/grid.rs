//! Tensor types shared by every stage of the pipeline, plus the pooling and
//! interpolation primitives they are built on.
//!
//! Axis order is fixed as `T × Z × Y × X` (row-major). Invalid observations
//! are carried in explicit boolean masks, never as NaN inside the data.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis, Zip};

use crate::error::{invalid, shape, Error, Result};
use crate::transform::{DBR_FLOOR, NO_ECHO_DBZ};

/// A time sequence of reflectivity volumes on a Cartesian grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarVolume {
    data: Array4<f64>,
    z_levels: Vec<f64>,
    dt: u32,
    mask: Array3<bool>,
    rho_hv: Option<Array4<f64>>,
}

impl RadarVolume {
    /// Creates a volume with every cell valid. `data` is `T × Z × Y × X` in dBZ.
    pub fn new(data: Array4<f64>, z_levels: Vec<f64>, dt: u32) -> Result<Self> {
        let (_, z, y, x) = data.dim();
        let vol = RadarVolume {
            mask: Array3::from_elem((z, y, x), true),
            data,
            z_levels,
            dt,
            rho_hv: None,
        };
        vol.validate()?;
        Ok(vol)
    }

    pub fn with_mask(mut self, mask: Array3<bool>) -> Result<Self> {
        self.mask = mask;
        self.validate()?;
        Ok(self)
    }

    pub fn with_rho_hv(mut self, rho_hv: Array4<f64>) -> Result<Self> {
        self.rho_hv = Some(rho_hv);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let (_, z, y, x) = self.data.dim();
        if self.z_levels.len() != z {
            return shape(format!("{} altitudes for {} levels", self.z_levels.len(), z));
        }
        if self.z_levels.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("altitudes must be strictly increasing");
        }
        if self.mask.dim() != (z, y, x) {
            return shape(format!("mask {:?} vs grid {:?}", self.mask.dim(), (z, y, x)));
        }
        if let Some(rho) = &self.rho_hv {
            if rho.dim() != self.data.dim() {
                return shape(format!("rho_hv {:?} vs data {:?}", rho.dim(), self.data.dim()));
            }
        }
        Ok(())
    }

    /// `(T, Z, Y, X)`
    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> ArrayView4<'_, f64> {
        self.data.view()
    }

    pub fn data_mut(&mut self) -> &mut Array4<f64> {
        &mut self.data
    }

    pub fn z_levels(&self) -> &[f64] {
        &self.z_levels
    }

    /// Time step in seconds.
    pub fn dt(&self) -> u32 {
        self.dt
    }

    pub fn mask(&self) -> ArrayView3<'_, bool> {
        self.mask.view()
    }

    pub fn rho_hv(&self) -> Option<ArrayView4<'_, f64>> {
        self.rho_hv.as_ref().map(|r| r.view())
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, f64> {
        self.data.index_axis(Axis(0), t)
    }

    /// Keeps frames `range` only.
    pub fn slice_time(&self, start: usize, end: usize) -> Result<RadarVolume> {
        let t = self.dim().0;
        if start >= end || end > t {
            return invalid(format!("frame range {start}..{end} outside 0..{t}"));
        }
        Ok(RadarVolume {
            data: self.data.slice(s![start..end, .., .., ..]).to_owned(),
            z_levels: self.z_levels.clone(),
            dt: self.dt,
            mask: self.mask.clone(),
            rho_hv: self
                .rho_hv
                .as_ref()
                .map(|r| r.slice(s![start..end, .., .., ..]).to_owned()),
        })
    }

    /// Column-maximum composite (a single level).
    pub fn cmax(&self) -> RadarVolume {
        let z = self.dim().1;
        max_pool_vertical(self, z).expect("Z always divides Z")
    }
}

/// Unit space of a [`RainField`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    /// Rain rate in mm h⁻¹.
    Mmh,
    /// 10·log10(R), floored at −15.
    Dbr,
}

impl Space {
    /// Value representing "no precipitation" in this space.
    pub fn background(self) -> f64 {
        match self {
            Space::Mmh => 0.0,
            Space::Dbr => DBR_FLOOR,
        }
    }
}

/// A `Z × Y × X` precipitation field in a tagged unit space.
#[derive(Debug, Clone, PartialEq)]
pub struct RainField {
    data: Array3<f64>,
    space: Space,
    mask: Array3<bool>,
}

impl RainField {
    pub fn new(data: Array3<f64>, space: Space, mask: Array3<bool>) -> Result<Self> {
        if data.dim() != mask.dim() {
            return shape(format!("data {:?} vs mask {:?}", data.dim(), mask.dim()));
        }
        let floor = space.background();
        let bad = Zip::from(&data)
            .and(&mask)
            .fold(false, |acc, &v, &m| acc || (m && !(v >= floor - 1e-9)));
        if bad {
            return invalid(format!("valid values below {floor} in {space:?} space"));
        }
        Ok(RainField { data, space, mask })
    }

    /// Field with every cell valid.
    pub fn from_data(data: Array3<f64>, space: Space) -> Result<Self> {
        let mask = Array3::from_elem(data.dim(), true);
        RainField::new(data, space, mask)
    }

    /// Single-level field from a 2-D plane; a 2-D mask is broadcast.
    pub fn from_plane(plane: Array2<f64>, space: Space, mask: Option<Array2<bool>>) -> Result<Self> {
        let mask = mask.unwrap_or_else(|| Array2::from_elem(plane.dim(), true));
        RainField::new(plane.insert_axis(Axis(0)), space, mask.insert_axis(Axis(0)))
    }

    /// `(Z, Y, X)`
    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn mask(&self) -> ArrayView3<'_, bool> {
        self.mask.view()
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn level(&self, z: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), z)
    }

    pub fn level_mask(&self, z: usize) -> ArrayView2<'_, bool> {
        self.mask.index_axis(Axis(0), z)
    }

    pub fn into_parts(self) -> (Array3<f64>, Space, Array3<bool>) {
        (self.data, self.space, self.mask)
    }

    /// Column maximum over levels. A cell is valid if any level is valid there.
    pub fn cmax(&self) -> RainField {
        let (z, y, x) = self.dim();
        if z == 1 {
            return self.clone();
        }
        let mut data = Array3::from_elem((1, y, x), self.space.background());
        let mut mask = Array3::from_elem((1, y, x), false);
        for k in 0..z {
            Zip::from(data.index_axis_mut(Axis(0), 0))
                .and(mask.index_axis_mut(Axis(0), 0))
                .and(self.data.index_axis(Axis(0), k))
                .and(self.mask.index_axis(Axis(0), k))
                .for_each(|d, m, &v, &valid| {
                    if valid {
                        if !*m || v > *d {
                            *d = v;
                        }
                        *m = true;
                    }
                });
        }
        RainField { data, space: self.space, mask }
    }
}

/// Per-altitude horizontal displacement fields, `Z × 2 × Y × X`, in grid
/// cells per time step. Channel 0 is the column (x) displacement, channel 1
/// the row (y) displacement.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    u: Array4<f64>,
}

impl MotionField {
    pub fn new(u: Array4<f64>) -> Result<Self> {
        if u.dim().1 != 2 {
            return shape(format!("motion field needs 2 components, got {}", u.dim().1));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return invalid("motion field contains non-finite values");
        }
        Ok(MotionField { u })
    }

    pub fn zeros(z: usize, y: usize, x: usize) -> Self {
        MotionField { u: Array4::zeros((z, 2, y, x)) }
    }

    /// The same displacement `(ux, uy)` everywhere on every level.
    pub fn uniform(z: usize, y: usize, x: usize, ux: f64, uy: f64) -> Self {
        let mut u = Array4::zeros((z, 2, y, x));
        u.slice_mut(s![.., 0, .., ..]).fill(ux);
        u.slice_mut(s![.., 1, .., ..]).fill(uy);
        MotionField { u }
    }

    /// Stacks per-level `2 × Y × X` fields.
    pub fn from_levels(levels: &[Array3<f64>]) -> Result<Self> {
        let Some(first) = levels.first() else {
            return invalid("no motion levels");
        };
        let (c, y, x) = first.dim();
        let mut u = Array4::zeros((levels.len(), c, y, x));
        for (z, l) in levels.iter().enumerate() {
            if l.dim() != (c, y, x) {
                return shape("motion levels differ in shape");
            }
            u.index_axis_mut(Axis(0), z).assign(l);
        }
        MotionField::new(u)
    }

    /// `(Z, Y, X)`
    pub fn dim(&self) -> (usize, usize, usize) {
        let (z, _, y, x) = self.u.dim();
        (z, y, x)
    }

    pub fn data(&self) -> ArrayView4<'_, f64> {
        self.u.view()
    }

    /// `2 × Y × X` view of one level.
    pub fn level(&self, z: usize) -> ArrayView3<'_, f64> {
        self.u.index_axis(Axis(0), z)
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.u
    }

    /// Mean endpoint error against `truth` at level `z` over cells where `region` is set.
    pub fn endpoint_error(&self, truth: &MotionField, z: usize, region: ArrayView2<bool>) -> Option<f64> {
        let a = self.level(z);
        let b = truth.level(z);
        let (mut sum, mut n) = (0.0, 0usize);
        for ((iy, ix), &m) in region.indexed_iter() {
            if m {
                let dx = a[[0, iy, ix]] - b[[0, iy, ix]];
                let dy = a[[1, iy, ix]] - b[[1, iy, ix]];
                sum += (dx * dx + dy * dy).sqrt();
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// Out-of-domain policy for [`bilinear_sample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Oob {
    /// Neighbors outside the grid read as zero.
    #[default]
    Zero,
    /// Coordinates are clamped onto the grid.
    Clamp,
}

/// Bilinear interpolation of `field` at column `x`, row `y`.
pub fn bilinear_sample(field: ArrayView2<f64>, x: f64, y: f64, oob: Oob) -> Result<f64> {
    if x.is_nan() || y.is_nan() {
        return invalid("NaN sample coordinate");
    }
    Ok(match oob {
        Oob::Zero => sample_zero(field, x, y),
        Oob::Clamp => {
            let (ny, nx) = field.dim();
            sample_zero(field, x.clamp(0.0, (nx - 1) as f64), y.clamp(0.0, (ny - 1) as f64))
        }
    })
}

#[inline]
fn read_fill(field: &ArrayView2<f64>, ix: isize, iy: isize, fill: f64) -> f64 {
    let (ny, nx) = field.dim();
    if ix < 0 || iy < 0 || ix >= nx as isize || iy >= ny as isize {
        fill
    } else {
        field[[iy as usize, ix as usize]]
    }
}

/// Bilinear sample with zero-valued outside neighbors. Coordinates must be finite.
#[inline]
pub(crate) fn sample_zero(field: ArrayView2<f64>, x: f64, y: f64) -> f64 {
    sample_fill_grad(field, x, y, 0.0).0
}

/// Value and partial derivatives `(v, ∂v/∂x, ∂v/∂y)` of the bilinear
/// interpolant whose outside neighbors read as `fill`.
#[inline]
pub(crate) fn sample_fill_grad(field: ArrayView2<f64>, x: f64, y: f64, fill: f64) -> (f64, f64, f64) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (ix, iy) = (x0 as isize, y0 as isize);
    let f00 = read_fill(&field, ix, iy, fill);
    let f10 = read_fill(&field, ix + 1, iy, fill);
    let f01 = read_fill(&field, ix, iy + 1, fill);
    let f11 = read_fill(&field, ix + 1, iy + 1, fill);
    let top = f00 + fx * (f10 - f00);
    let bottom = f01 + fx * (f11 - f01);
    let v = top + fy * (bottom - top);
    let dx = (1.0 - fy) * (f10 - f00) + fy * (f11 - f01);
    let dy = bottom - top;
    (v, dx, dy)
}

/// Pads by edge replication to multiples of `k`. Returns the padded field and
/// a mask that is false on padded cells.
pub fn pad_to_multiple(field: ArrayView2<f64>, k: usize) -> (Array2<f64>, Array2<bool>) {
    let (ny, nx) = field.dim();
    let py = ny.div_ceil(k) * k;
    let px = nx.div_ceil(k) * k;
    let out = Array2::from_shape_fn((py, px), |(y, x)| field[[y.min(ny - 1), x.min(nx - 1)]]);
    let mask = Array2::from_shape_fn((py, px), |(y, x)| y < ny && x < nx);
    (out, mask)
}

/// Block-mean pooling with a `k × k` kernel and stride `k`.
pub fn avg_pool2d(field: ArrayView2<f64>, k: usize) -> Result<Array2<f64>> {
    if k == 0 {
        return invalid("pooling factor must be >= 1");
    }
    if field.is_empty() {
        return invalid("cannot pool an empty field");
    }
    if k == 1 {
        return Ok(field.to_owned());
    }
    let (ny, nx) = field.dim();
    let (oy, ox) = (ny.div_ceil(k), nx.div_ceil(k));
    let norm = 1.0 / (k * k) as f64;
    Ok(Array2::from_shape_fn((oy, ox), |(by, bx)| {
        let mut acc = 0.0;
        for y in by * k..(by + 1) * k {
            for x in bx * k..(bx + 1) * k {
                acc += field[[y.min(ny - 1), x.min(nx - 1)]];
            }
        }
        acc * norm
    }))
}

/// Pools a field and its validity mask. A pooled cell is valid only if every
/// cell of its block is valid and none of them is padding.
pub fn avg_pool2d_masked(
    field: ArrayView2<f64>,
    mask: ArrayView2<bool>,
    k: usize,
) -> Result<(Array2<f64>, Array2<bool>)> {
    if field.dim() != mask.dim() {
        return shape("field and mask differ in shape");
    }
    let pooled = avg_pool2d(field, k)?;
    let (ny, nx) = field.dim();
    let pmask = Array2::from_shape_fn(pooled.dim(), |(by, bx)| {
        (by * k..(by + 1) * k).all(|y| {
            (bx * k..(bx + 1) * k).all(|x| y < ny && x < nx && mask[[y, x]])
        })
    });
    Ok((pooled, pmask))
}

/// Adjoint of [`avg_pool2d`]: maps a gradient on the pooled grid back onto
/// the `(ny, nx)` fine grid, replicated padding included.
pub(crate) fn avg_pool2d_adjoint(grad: ArrayView2<f64>, ny: usize, nx: usize, k: usize) -> Array2<f64> {
    if k == 1 {
        return grad.to_owned();
    }
    let norm = 1.0 / (k * k) as f64;
    let mut out = Array2::zeros((ny, nx));
    let (gy, gx) = grad.dim();
    for py in 0..gy * k {
        for px in 0..gx * k {
            let g = grad[[py / k, px / k]];
            if g != 0.0 {
                out[[py.min(ny - 1), px.min(nx - 1)]] += g * norm;
            }
        }
    }
    out
}

/// Element-wise maximum over groups of `factor` adjacent altitude levels.
///
/// Invalid cells count as −∞; an output cell is invalid only when its whole
/// group is. Altitudes become the group maxima, so `factor == Z` yields the
/// column-maximum composite.
pub fn max_pool_vertical(vol: &RadarVolume, factor: usize) -> Result<RadarVolume> {
    let (t, z, ny, nx) = vol.dim();
    if factor == 0 || z % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "{z} levels not divisible by pooling factor {factor}"
        )));
    }
    let zo = z / factor;
    let mut data = Array4::from_elem((t, zo, ny, nx), NO_ECHO_DBZ);
    let mut rho = vol.rho_hv.as_ref().map(|_| Array4::from_elem((t, zo, ny, nx), 1.0));
    let mut mask = Array3::from_elem((zo, ny, nx), false);
    for g in 0..zo {
        for (iy, ix) in (0..ny).flat_map(|y| (0..nx).map(move |x| (y, x))) {
            let members: Vec<usize> = (g * factor..(g + 1) * factor)
                .filter(|&k| vol.mask[[k, iy, ix]])
                .collect();
            if members.is_empty() {
                continue;
            }
            mask[[g, iy, ix]] = true;
            for it in 0..t {
                let best = members
                    .iter()
                    .copied()
                    .max_by(|&a, &b| vol.data[[it, a, iy, ix]].total_cmp(&vol.data[[it, b, iy, ix]]))
                    .expect("non-empty");
                data[[it, g, iy, ix]] = vol.data[[it, best, iy, ix]];
                if let (Some(out), Some(src)) = (rho.as_mut(), vol.rho_hv.as_ref()) {
                    out[[it, g, iy, ix]] = src[[it, best, iy, ix]];
                }
            }
        }
    }
    let z_levels = vol
        .z_levels
        .chunks(factor)
        .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(RadarVolume { data, z_levels, dt: vol.dt, mask, rho_hv: rho })
}
