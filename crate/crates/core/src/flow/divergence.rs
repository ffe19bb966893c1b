//! Sobel-filter divergence of motion fields and its penalty term.

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::grid::MotionField;

/// Sobel derivative kernels divided by 8, so a unit-slope ramp has derivative 1.
/// Indexed `[dy + 1][dx + 1]` and applied as a correlation.
const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
const NORM: f64 = 1.0 / 8.0;

/// Per-level divergence plus the mask of cells whose 3×3 stencil lies fully
/// inside the grid. Edge cells use replicated padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub values: Array3<f64>,
    pub interior: Array2<bool>,
}

pub(crate) fn divergence_plane(ux: ArrayView2<f64>, uy: ArrayView2<f64>) -> Array2<f64> {
    let (ny, nx) = ux.dim();
    let at = |f: &ArrayView2<f64>, y: isize, x: isize| {
        f[[y.clamp(0, ny as isize - 1) as usize, x.clamp(0, nx as isize - 1) as usize]]
    };
    Array2::from_shape_fn((ny, nx), |(y, x)| {
        let mut acc = 0.0;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                let (i, j) = ((dy + 1) as usize, (dx + 1) as usize);
                acc += SOBEL_X[i][j] * at(&ux, yy, xx) + SOBEL_Y[i][j] * at(&uy, yy, xx);
            }
        }
        acc * NORM
    })
}

pub(crate) fn interior_mask(ny: usize, nx: usize) -> Array2<bool> {
    Array2::from_shape_fn((ny, nx), |(y, x)| y >= 1 && x >= 1 && y + 1 < ny && x + 1 < nx)
}

/// ∂u_x/∂x + ∂u_y/∂y at every level.
pub fn divergence(mf: &MotionField) -> Divergence {
    let (z, ny, nx) = mf.dim();
    let mut values = Array3::zeros((z, ny, nx));
    for k in 0..z {
        let u = mf.level(k);
        values
            .index_axis_mut(Axis(0), k)
            .assign(&divergence_plane(u.index_axis(Axis(0), 0), u.index_axis(Axis(0), 1)));
    }
    Divergence { values, interior: interior_mask(ny, nx) }
}

/// Mean |∇·u| over interior cells of one level, with its gradient with
/// respect to `(ux, uy)` accumulated into `grad` scaled by `weight`.
pub(crate) fn penalty_plane(
    ux: ArrayView2<f64>,
    uy: ArrayView2<f64>,
    grad: Option<(&mut Array2<f64>, &mut Array2<f64>, f64)>,
) -> f64 {
    let (ny, nx) = ux.dim();
    if ny < 3 || nx < 3 {
        return 0.0;
    }
    let n = ((ny - 2) * (nx - 2)) as f64;
    let mut sum = 0.0;
    let mut signs = Array2::<f64>::zeros((ny, nx));
    for y in 1..ny - 1 {
        for x in 1..nx - 1 {
            let mut d = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    d += SOBEL_X[i][j] * ux[[y + i - 1, x + j - 1]] + SOBEL_Y[i][j] * uy[[y + i - 1, x + j - 1]];
                }
            }
            d *= NORM;
            sum += d.abs();
            signs[[y, x]] = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
    }
    if let Some((gx, gy, weight)) = grad {
        let scale = weight * NORM / n;
        for y in 1..ny - 1 {
            for x in 1..nx - 1 {
                let s = signs[[y, x]];
                if s == 0.0 {
                    continue;
                }
                for i in 0..3 {
                    for j in 0..3 {
                        gx[[y + i - 1, x + j - 1]] += scale * s * SOBEL_X[i][j];
                        gy[[y + i - 1, x + j - 1]] += scale * s * SOBEL_Y[i][j];
                    }
                }
            }
        }
    }
    sum / n
}

/// Physics penalty: mean |∇·u| over interior cells, averaged over levels.
pub fn loss_pi(mf: &MotionField) -> f64 {
    let (z, _, _) = mf.dim();
    let total: f64 = (0..z)
        .map(|k| {
            let u = mf.level(k);
            penalty_plane(u.index_axis(Axis(0), 0), u.index_axis(Axis(0), 1), None)
        })
        .sum();
    total / z as f64
}
