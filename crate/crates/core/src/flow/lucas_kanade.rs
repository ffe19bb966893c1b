//! Classical windowed Lucas-Kanade flow, used as a sanity baseline.

use std::collections::VecDeque;

use ndarray::{Array2, Array4, ArrayView2};

use crate::error::{invalid, shape, Result};
use crate::grid::{sample_fill_grad, MotionField};

#[derive(Debug, Clone)]
pub struct LucasKanade {
    /// Single-level motion field.
    pub field: MotionField,
    /// Pixels whose structure tensor passed the eigenvalue test.
    pub accepted: Array2<bool>,
    /// Set when no pixel was accepted; the field is then zero.
    pub all_rejected: bool,
}

/// Minimum eigenvalue of the windowed structure tensor, per window cell.
const MIN_EIGEN: f64 = 1e-3;
const ITERATIONS: usize = 8;

fn clamped(f: &ArrayView2<f64>, y: isize, x: isize) -> f64 {
    let (ny, nx) = f.dim();
    f[[y.clamp(0, ny as isize - 1) as usize, x.clamp(0, nx as isize - 1) as usize]]
}

fn min_eigen(a: f64, b: f64, c: f64) -> f64 {
    let tr = a + c;
    let det = a * c - b * b;
    tr / 2.0 - ((tr * tr / 4.0 - det).max(0.0)).sqrt()
}

/// Windowed sums of `f` via a summed-area table with clamped borders.
fn box_sum(f: &Array2<f64>, r: usize) -> Array2<f64> {
    let (ny, nx) = f.dim();
    let mut sat = Array2::<f64>::zeros((ny + 1, nx + 1));
    for y in 0..ny {
        for x in 0..nx {
            sat[[y + 1, x + 1]] = f[[y, x]] + sat[[y, x + 1]] + sat[[y + 1, x]] - sat[[y, x]];
        }
    }
    Array2::from_shape_fn((ny, nx), |(y, x)| {
        let (y0, x0) = (y.saturating_sub(r), x.saturating_sub(r));
        let (y1, x1) = ((y + r + 1).min(ny), (x + r + 1).min(nx));
        sat[[y1, x1]] - sat[[y0, x1]] - sat[[y1, x0]] + sat[[y0, x0]]
    })
}

/// Fills rejected pixels with the value of the nearest accepted pixel
/// (breadth-first over 4-neighbors, ties resolved in scan order).
fn nearest_fill(u: &mut [Array2<f64>; 2], accepted: &Array2<bool>) {
    let (ny, nx) = accepted.dim();
    let mut seen = accepted.clone();
    let mut queue: VecDeque<(usize, usize)> =
        accepted.indexed_iter().filter(|(_, &a)| a).map(|(p, _)| p).collect();
    while let Some((y, x)) = queue.pop_front() {
        let neighbors = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
        for (yy, xx) in neighbors {
            if yy < ny && xx < nx && !seen[[yy, xx]] {
                seen[[yy, xx]] = true;
                for c in u.iter_mut() {
                    c[[yy, xx]] = c[[y, x]];
                }
                queue.push_back((yy, xx));
            }
        }
    }
}

/// Estimates the motion taking `a` to `b` (so that `b(p) ≈ a(p − u)`) with
/// an odd `window`, refining the estimate by repeated warping.
pub fn estimate_lucas_kanade(a: ArrayView2<f64>, b: ArrayView2<f64>, window: usize) -> Result<LucasKanade> {
    if window < 3 || window % 2 == 0 {
        return invalid("window must be odd and >= 3");
    }
    if a.dim() != b.dim() {
        return shape("frames differ in shape");
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return invalid("frames must be finite");
    }
    let (ny, nx) = a.dim();
    let r = window / 2;
    let area = (window * window) as f64;

    let gx = Array2::from_shape_fn((ny, nx), |(y, x)| {
        (clamped(&a, y as isize, x as isize + 1) - clamped(&a, y as isize, x as isize - 1)) / 2.0
    });
    let gy = Array2::from_shape_fn((ny, nx), |(y, x)| {
        (clamped(&a, y as isize + 1, x as isize) - clamped(&a, y as isize - 1, x as isize)) / 2.0
    });
    let sxx = box_sum(&(&gx * &gx), r);
    let sxy = box_sum(&(&gx * &gy), r);
    let syy = box_sum(&(&gy * &gy), r);
    let accepted = Array2::from_shape_fn((ny, nx), |(y, x)| {
        min_eigen(sxx[[y, x]], sxy[[y, x]], syy[[y, x]]) > MIN_EIGEN * area
    });

    let mut u = [Array2::<f64>::zeros((ny, nx)), Array2::<f64>::zeros((ny, nx))];
    if accepted.iter().any(|&v| v) {
        for _ in 0..ITERATIONS {
            let mut wx = Array2::<f64>::zeros((ny, nx));
            let mut wy = Array2::<f64>::zeros((ny, nx));
            let mut res = Array2::<f64>::zeros((ny, nx));
            for y in 0..ny {
                for x in 0..nx {
                    let sx = (x as f64 - u[0][[y, x]]).clamp(0.0, (nx - 1) as f64);
                    let sy = (y as f64 - u[1][[y, x]]).clamp(0.0, (ny - 1) as f64);
                    let (v, _, _) = sample_fill_grad(a, sx, sy, 0.0);
                    let r = b[[y, x]] - v;
                    wx[[y, x]] = gx[[y, x]] * r;
                    wy[[y, x]] = gy[[y, x]] * r;
                    res[[y, x]] = r;
                }
            }
            let bx = box_sum(&wx, r);
            let by = box_sum(&wy, r);
            let mut change = 0.0f64;
            for y in 0..ny {
                for x in 0..nx {
                    if !accepted[[y, x]] {
                        continue;
                    }
                    let (p, q, s) = (sxx[[y, x]], sxy[[y, x]], syy[[y, x]]);
                    let det = p * s - q * q;
                    // b ≈ a − du·∇a, so du = −G⁻¹ Σ ∇a · residual
                    let dux = -(s * bx[[y, x]] - q * by[[y, x]]) / det;
                    let duy = -(p * by[[y, x]] - q * bx[[y, x]]) / det;
                    let (dux, duy) = (dux.clamp(-2.0, 2.0), duy.clamp(-2.0, 2.0));
                    u[0][[y, x]] += dux;
                    u[1][[y, x]] += duy;
                    change = change.max(dux.abs()).max(duy.abs());
                }
            }
            if change < 1e-4 {
                break;
            }
        }
        for c in u.iter_mut() {
            c.zip_mut_with(&accepted, |v, &ok| {
                if !ok {
                    *v = 0.0;
                }
            });
        }
        nearest_fill(&mut u, &accepted);
    }
    let all_rejected = !accepted.iter().any(|&v| v);
    let mut out = Array4::zeros((1, 2, ny, nx));
    for c in 0..2 {
        out.slice_mut(ndarray::s![0, c, .., ..]).assign(&u[c]);
    }
    Ok(LucasKanade { field: MotionField::new(out)?, accepted, all_rejected })
}
