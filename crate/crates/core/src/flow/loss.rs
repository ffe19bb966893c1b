//! Sequence-consistent, multi-scale extrapolation loss with a divergence
//! penalty, and its analytic gradient with respect to the motion field.
//!
//! For one altitude level with frames `Φ_0 … Φ_{P}` and motion `u`:
//!
//! ```text
//! L_seq(u)   = mean_t  mean_{valid p} C( ξ(Φ_t, u)(p) − Φ_{t+1}(p) )
//! L_ms(u)    = mean_k  L_seq( pool_k Φ, pool_k(u) / k )
//! L_pi(u)    = mean_{interior p} |∇·u (p)|
//! L(u)       = (1 − β) L_ms(u) + β L_pi(u)
//! ```
//!
//! `ξ` is the backward bilinear warp of [`crate::advect`]. Volumetric losses
//! average the per-level values.

use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};

use crate::error::{invalid, shape, Error, Result};
use crate::flow::divergence::penalty_plane;
use crate::grid::{avg_pool2d, avg_pool2d_adjoint, avg_pool2d_masked, sample_fill_grad, MotionField, RainField};

/// Pointwise error criterion applied to dBR residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Criterion {
    #[default]
    MaeDbr,
    MseDbr,
}

impl Criterion {
    #[inline]
    fn value_and_slope(self, r: f64) -> (f64, f64) {
        match self {
            Criterion::MaeDbr => {
                let s = if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (r.abs(), s)
            }
            Criterion::MseDbr => (r * r, 2.0 * r),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight of the divergence penalty, strictly inside (0, 1).
    pub beta: f64,
    /// Average-pooling factors of the multi-scale data term.
    pub scales: Vec<usize>,
    pub criterion: Criterion,
    /// Observed frames available at inference time.
    pub n_inputs: usize,
    /// Future frames used only when fitting.
    pub m_future: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { beta: 0.1, scales: vec![1, 2, 4, 8], criterion: Criterion::MaeDbr, n_inputs: 8, m_future: 16 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return invalid(format!("beta {} must lie strictly inside (0, 1)", self.beta));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return invalid("scales must be a non-empty list of factors >= 1");
        }
        Ok(())
    }
}

/// Components of the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub multiscale: f64,
    pub pi: f64,
}

/// Frames and masks of one altitude level.
#[derive(Debug, Clone)]
pub(crate) struct Series {
    pub frames: Vec<Array2<f64>>,
    pub masks: Vec<Array2<bool>>,
    pub fill: f64,
}

impl Series {
    pub fn from_fields(phi: &[RainField], z: usize) -> Series {
        Series {
            frames: phi.iter().map(|f| f.level(z).to_owned()).collect(),
            masks: phi.iter().map(|f| f.level_mask(z).to_owned()).collect(),
            fill: phi[0].space().background(),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.frames[0].dim()
    }

    pub fn pooled(&self, k: usize) -> Result<Series> {
        let mut frames = Vec::with_capacity(self.frames.len());
        let mut masks = Vec::with_capacity(self.frames.len());
        for (f, m) in self.frames.iter().zip(&self.masks) {
            let (pf, pm) = avg_pool2d_masked(f.view(), m.view(), k)?;
            frames.push(pf);
            masks.push(pm);
        }
        Ok(Series { frames, masks, fill: self.fill })
    }

    /// Whether any valid cell of any frame carries precipitation.
    pub fn has_signal(&self) -> bool {
        self.frames
            .iter()
            .zip(&self.masks)
            .any(|(f, m)| f.iter().zip(m.iter()).any(|(&v, &ok)| ok && v > self.fill + 1e-9))
    }
}

/// Mean over consecutive pairs of the masked mean criterion at one scale.
/// Gradients (scaled by `weight`) are accumulated into `grad`. Returns `None`
/// when no pair has a jointly valid cell.
pub(crate) fn sequence_loss(
    series: &Series,
    ux: ArrayView2<f64>,
    uy: ArrayView2<f64>,
    criterion: Criterion,
    mut grad: Option<(&mut Array2<f64>, &mut Array2<f64>, f64)>,
) -> Option<f64> {
    let (ny, nx) = series.dim();
    let pairs = series.frames.len().saturating_sub(1);
    // per-pair sums, counts and per-cell slopes
    let mut pair_terms: Vec<(f64, usize)> = Vec::with_capacity(pairs);
    let mut slopes: Vec<Vec<(usize, f64, f64)>> = Vec::with_capacity(pairs);
    for t in 0..pairs {
        let src = series.frames[t].view();
        let src_mask = &series.masks[t];
        let dst = &series.frames[t + 1];
        let dst_mask = &series.masks[t + 1];
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut cell_slopes = Vec::new();
        for iy in 0..ny {
            for ix in 0..nx {
                if !dst_mask[[iy, ix]] {
                    continue;
                }
                let sx = ix as f64 - ux[[iy, ix]];
                let sy = iy as f64 - uy[[iy, ix]];
                let (rx, ry) = (sx.round(), sy.round());
                if rx < 0.0 || ry < 0.0 || rx > (nx - 1) as f64 || ry > (ny - 1) as f64 {
                    continue;
                }
                if !src_mask[[ry as usize, rx as usize]] {
                    continue;
                }
                let (v, dvx, dvy) = sample_fill_grad(src, sx, sy, series.fill);
                let (c, slope) = criterion.value_and_slope(v - dst[[iy, ix]]);
                sum += c;
                count += 1;
                if grad.is_some() && slope != 0.0 {
                    // d/du = slope * dv/ds * ds/du, with ds/du = -1
                    cell_slopes.push((iy * nx + ix, -slope * dvx, -slope * dvy));
                }
            }
        }
        pair_terms.push((sum, count));
        slopes.push(cell_slopes);
    }
    let used = pair_terms.iter().filter(|(_, c)| *c > 0).count();
    if used == 0 {
        return None;
    }
    let loss = pair_terms
        .iter()
        .filter(|(_, c)| *c > 0)
        .map(|(s, c)| s / *c as f64)
        .sum::<f64>()
        / used as f64;
    if let Some((gx, gy, weight)) = grad.as_mut() {
        let gxs = gx.as_slice_mut().expect("standard layout");
        let gys = gy.as_slice_mut().expect("standard layout");
        for ((_, count), cells) in pair_terms.iter().zip(&slopes) {
            if *count == 0 {
                continue;
            }
            let scale = *weight / (*count as f64 * used as f64);
            for &(i, a, b) in cells {
                gxs[i] += scale * a;
                gys[i] += scale * b;
            }
        }
    }
    Some(loss)
}

/// The full objective for one altitude level, with pooled frames cached per scale.
#[derive(Debug, Clone)]
pub(crate) struct LevelObjective {
    scales: Vec<(usize, Series)>,
    criterion: Criterion,
    beta: f64,
    dim: (usize, usize),
}

impl LevelObjective {
    pub fn new(series: &Series, scales: &[usize], criterion: Criterion, beta: f64) -> Result<Self> {
        let dim = series.dim();
        let mut pooled = Vec::with_capacity(scales.len());
        for &k in scales {
            if k == 0 || dim.0.div_ceil(k) < 2 || dim.1.div_ceil(k) < 2 {
                return invalid(format!("pooling factor {k} too large for a {}x{} grid", dim.0, dim.1));
            }
            pooled.push((k, if k == 1 { series.clone() } else { series.pooled(k)? }));
        }
        Ok(LevelObjective { scales: pooled, criterion, beta, dim })
    }

    /// Multi-scale data term. `u` is `2 × Y × X`.
    pub fn multiscale(&self, u: &Array3<f64>, mut grad: Option<(&mut Array2<f64>, &mut Array2<f64>, f64)>) -> Result<f64> {
        let (ny, nx) = self.dim;
        let ux = u.index_axis(Axis(0), 0);
        let uy = u.index_axis(Axis(0), 1);
        let mut terms = Vec::with_capacity(self.scales.len());
        let mut scale_grads = Vec::with_capacity(self.scales.len());
        for (k, series) in &self.scales {
            let k = *k;
            let (pux, puy) = if k == 1 {
                (ux.to_owned(), uy.to_owned())
            } else {
                (avg_pool2d(ux, k)? / k as f64, avg_pool2d(uy, k)? / k as f64)
            };
            let mut gx = Array2::zeros(pux.dim());
            let mut gy = Array2::zeros(puy.dim());
            let g = grad.as_ref().map(|_| (&mut gx, &mut gy, 1.0));
            if let Some(v) = sequence_loss(series, pux.view(), puy.view(), self.criterion, g) {
                terms.push(v);
                scale_grads.push((k, gx, gy));
            }
        }
        if terms.is_empty() {
            return Err(Error::NoOverlap);
        }
        let n = terms.len() as f64;
        if let Some((gx_out, gy_out, weight)) = grad.as_mut() {
            for (k, gx, gy) in scale_grads {
                let s = *weight / n / k as f64;
                **gx_out += &(avg_pool2d_adjoint(gx.view(), ny, nx, k) * s);
                **gy_out += &(avg_pool2d_adjoint(gy.view(), ny, nx, k) * s);
            }
        }
        Ok(terms.iter().sum::<f64>() / n)
    }

    pub fn eval(&self, u: &Array3<f64>, want_grad: bool) -> Result<(LossBreakdown, Option<Array3<f64>>)> {
        let (ny, nx) = self.dim;
        let mut gx = Array2::zeros((ny, nx));
        let mut gy = Array2::zeros((ny, nx));
        let w_data = 1.0 - self.beta;
        let ms = self.multiscale(u, want_grad.then_some((&mut gx, &mut gy, w_data)))?;
        let pi = penalty_plane(
            u.index_axis(Axis(0), 0),
            u.index_axis(Axis(0), 1),
            want_grad.then_some((&mut gx, &mut gy, self.beta)),
        );
        let total = w_data * ms + self.beta * pi;
        let grad = want_grad.then(|| {
            let mut g = Array3::zeros((2, ny, nx));
            g.index_axis_mut(Axis(0), 0).assign(&gx);
            g.index_axis_mut(Axis(0), 1).assign(&gy);
            g
        });
        Ok((LossBreakdown { total, multiscale: ms, pi }, grad))
    }
}

fn check_sequence(phi: &[RainField], mf: &MotionField) -> Result<()> {
    if phi.len() < 2 {
        return invalid("a loss sequence needs at least two frames");
    }
    let dim = phi[0].dim();
    let space = phi[0].space();
    if phi.iter().any(|f| f.dim() != dim || f.space() != space) {
        return shape("frames differ in shape or unit space");
    }
    if mf.dim() != dim {
        return shape(format!("motion {:?} vs frames {:?}", mf.dim(), dim));
    }
    Ok(())
}

fn level_mean(values: impl Iterator<Item = Option<f64>>) -> Result<f64> {
    let vals: Vec<f64> = values.flatten().collect();
    if vals.is_empty() {
        return Err(Error::NoOverlap);
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Criterion between one advected frame and its successor over jointly valid cells.
pub fn loss_single(psi_t: &RainField, psi_next: &RainField, mf: &MotionField, cfg: &LossConfig) -> Result<f64> {
    loss_sequence(&[psi_t.clone(), psi_next.clone()], mf, cfg)
}

/// Mean criterion over all consecutive pairs of `phi` under a single motion field.
pub fn loss_sequence(phi: &[RainField], mf: &MotionField, cfg: &LossConfig) -> Result<f64> {
    check_sequence(phi, mf)?;
    let z = phi[0].dim().0;
    level_mean((0..z).map(|k| {
        let s = Series::from_fields(phi, k);
        let u = mf.level(k);
        sequence_loss(&s, u.index_axis(Axis(0), 0), u.index_axis(Axis(0), 1), cfg.criterion, None)
    }))
}

fn level_objectives(phi: &[RainField], mf: &MotionField, cfg: &LossConfig) -> Result<Vec<LevelObjective>> {
    cfg.validate()?;
    check_sequence(phi, mf)?;
    let z = phi[0].dim().0;
    (0..z)
        .map(|k| LevelObjective::new(&Series::from_fields(phi, k), &cfg.scales, cfg.criterion, cfg.beta))
        .collect()
}

/// Sequence loss averaged over the configured pooling scales.
pub fn loss_multiscale(phi: &[RainField], mf: &MotionField, cfg: &LossConfig) -> Result<f64> {
    let objectives = level_objectives(phi, mf, cfg)?;
    level_mean(objectives.iter().enumerate().map(|(k, o)| o.multiscale(&mf.level(k).to_owned(), None).ok()))
}

/// `(1 − β)·loss_multiscale + β·loss_pi`.
pub fn loss_total(phi: &[RainField], mf: &MotionField, cfg: &LossConfig) -> Result<f64> {
    Ok(loss_total_with_grad(phi, mf, cfg)?.0.total)
}

/// Total loss, its components, and the analytic gradient (`Z × 2 × Y × X`).
pub fn loss_total_with_grad(phi: &[RainField], mf: &MotionField, cfg: &LossConfig) -> Result<(LossBreakdown, Array4<f64>)> {
    let objectives = level_objectives(phi, mf, cfg)?;
    let (z, ny, nx) = mf.dim();
    let mut grad = Array4::zeros((z, 2, ny, nx));
    let mut parts = Vec::with_capacity(z);
    for (k, o) in objectives.iter().enumerate() {
        match o.eval(&mf.level(k).to_owned(), true) {
            Ok((b, g)) => {
                grad.index_axis_mut(Axis(0), k).assign(&g.expect("gradient requested"));
                parts.push(b);
            }
            Err(Error::NoOverlap) => {}
            Err(e) => return Err(e),
        }
    }
    if parts.is_empty() {
        return Err(Error::NoOverlap);
    }
    let n = parts.len() as f64;
    grad /= n;
    let mean = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    Ok((LossBreakdown { total: mean(|b| b.total), multiscale: mean(|b| b.multiscale), pi: mean(|b| b.pi) }, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advect::advect_once;
    use crate::grid::Space;

    fn dbr_plane(f: impl Fn(usize, usize) -> f64, n: usize) -> RainField {
        RainField::from_plane(Array2::from_shape_fn((n, n), |(y, x)| f(y, x)), Space::Dbr, None).unwrap()
    }

    fn blob(cx: f64, cy: f64) -> impl Fn(usize, usize) -> f64 {
        move |y, x| {
            let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            -15.0 + 40.0 * (-r2 / 18.0).exp()
        }
    }

    #[test]
    fn self_consistent_pair_has_zero_loss() {
        let a = dbr_plane(blob(10.0, 12.0), 24);
        let mf = MotionField::uniform(1, 24, 24, 1.3, -0.6);
        let b = advect_once(&a, &mf).unwrap();
        let cfg = LossConfig::default();
        assert!(loss_single(&a, &b, &mf, &cfg).unwrap().abs() < 1e-12);
        assert_eq!(loss_single(&a, &a, &MotionField::zeros(1, 24, 24), &cfg).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_gives_unit_mae() {
        let a = dbr_plane(blob(8.0, 8.0), 16);
        let b = dbr_plane(|y, x| blob(8.0, 8.0)(y, x) + 1.0, 16);
        let l = loss_single(&a, &b, &MotionField::zeros(1, 16, 16), &LossConfig::default()).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        let mse = LossConfig { criterion: Criterion::MseDbr, ..Default::default() };
        assert!((loss_single(&a, &b, &MotionField::zeros(1, 16, 16), &mse).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sequence_matches_pairwise_advect() {
        let frames: Vec<_> = (0..4).map(|t| dbr_plane(blob(6.0 + 2.0 * t as f64, 10.0 + 0.5 * t as f64), 20)).collect();
        let mf = MotionField::uniform(1, 20, 20, 1.7, 0.4);
        let cfg = LossConfig::default();
        let seq = loss_sequence(&frames, &mf, &cfg).unwrap();
        // independent route: advect each frame, then a masked mean by hand
        let mut acc = 0.0;
        for w in frames.windows(2) {
            let adv = advect_once(&w[0], &mf).unwrap();
            let (mut s, mut n) = (0.0, 0);
            for ((i, &v), &m) in adv.data().indexed_iter().zip(adv.mask().iter()) {
                if m && w[1].mask()[i] {
                    s += (v - w[1].data()[i]).abs();
                    n += 1;
                }
            }
            acc += s / n as f64;
        }
        assert!((seq - acc / 3.0).abs() < 1e-12);
    }

    #[test]
    fn generated_sequence_scores_zero_at_truth() {
        let mf = MotionField::uniform(1, 32, 32, 2.0, 1.0);
        let mut frames = vec![dbr_plane(blob(8.0, 8.0), 32)];
        for _ in 0..4 {
            let next = advect_once(frames.last().unwrap(), &mf).unwrap();
            frames.push(next);
        }
        let cfg = LossConfig::default();
        assert!(loss_sequence(&frames, &mf, &cfg).unwrap() < 1e-6);
        assert!(loss_sequence(&frames, &MotionField::zeros(1, 32, 32), &cfg).unwrap() > 0.0);
    }

    #[test]
    fn single_scale_equals_sequence() {
        let frames: Vec<_> = (0..3).map(|t| dbr_plane(blob(7.0 + t as f64, 9.0), 16)).collect();
        let mf = MotionField::uniform(1, 16, 16, 0.8, 0.1);
        let cfg = LossConfig { scales: vec![1], ..Default::default() };
        assert_eq!(loss_multiscale(&frames, &mf, &cfg).unwrap(), loss_sequence(&frames, &mf, &cfg).unwrap());
    }

    #[test]
    fn multiscale_consistent_at_true_translation() {
        let n = 64;
        let mut frames = vec![dbr_plane(blob(20.0, 24.0), n)];
        for t in 1..4 {
            frames.push(dbr_plane(blob(20.0 + 4.0 * t as f64, 24.0), n));
        }
        let mf = MotionField::uniform(1, n, n, 4.0, 0.0);
        let cfg = LossConfig { scales: vec![1, 2, 4], ..Default::default() };
        let l = loss_multiscale(&frames, &mf, &cfg).unwrap();
        let wrong = loss_multiscale(&frames, &MotionField::zeros(1, n, n), &cfg).unwrap();
        assert!(l < 0.05 * wrong, "{l} vs {wrong}");
    }

    #[test]
    fn pooling_averages_out_checkerboard_noise() {
        let n = 32;
        // independent sign noise per frame: no motion can align the two
        let noise = |seed: u64| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let plane = Array2::from_shape_fn((n, n), |_| if rng.gen::<bool>() { 5.0 } else { -5.0 });
            RainField::from_plane(plane, Space::Dbr, None).unwrap()
        };
        let frames = vec![noise(1), noise(2)];
        let base = LossConfig::default();
        for (ux, uy) in [(0.0, 0.0), (0.3, 0.2), (1.0, 0.0)] {
            let mf = MotionField::uniform(1, n, n, ux, uy);
            let fine = loss_multiscale(&frames, &mf, &LossConfig { scales: vec![1], ..base.clone() }).unwrap();
            let coarse = loss_multiscale(&frames, &mf, &LossConfig { scales: vec![8], ..base.clone() }).unwrap();
            assert!(coarse < 0.25 * fine, "u=({ux},{uy}): {coarse} vs {fine}");
        }
    }

    #[test]
    fn total_combines_terms() {
        let frames: Vec<_> = (0..3).map(|t| dbr_plane(blob(7.0 + t as f64, 9.0), 16)).collect();
        let mut u = Array4::zeros((1, 2, 16, 16));
        for y in 0..16 {
            for x in 0..16 {
                u[[0, 0, y, x]] = 0.05 * x as f64;
            }
        }
        let mf = MotionField::new(u).unwrap();
        let cfg = LossConfig { beta: 0.5, ..Default::default() };
        let ms = loss_multiscale(&frames, &mf, &cfg).unwrap();
        let pi = crate::flow::loss_pi(&mf);
        assert!((loss_total(&frames, &mf, &cfg).unwrap() - 0.5 * (ms + pi)).abs() < 1e-12);
        for beta in [0.0, 1.0, -0.1] {
            assert!(loss_total(&frames, &mf, &LossConfig { beta, ..Default::default() }).is_err());
        }
    }

    #[test]
    fn perfect_uniform_fit_has_zero_total() {
        let mf = MotionField::uniform(1, 32, 32, 2.0, 1.0);
        let mut frames = vec![dbr_plane(blob(8.0, 8.0), 32)];
        for _ in 0..3 {
            let next = advect_once(frames.last().unwrap(), &mf).unwrap();
            frames.push(next);
        }
        let cfg = LossConfig { scales: vec![1], ..Default::default() };
        assert!(loss_total(&frames, &mf, &cfg).unwrap() < 1e-12);
    }

    #[test]
    fn empty_overlap_is_an_error() {
        let mask = Array2::from_elem((8, 8), false);
        let f = RainField::from_plane(Array2::from_elem((8, 8), -15.0), Space::Dbr, Some(mask)).unwrap();
        let r = loss_single(&f, &f, &MotionField::zeros(1, 8, 8), &LossConfig::default());
        assert!(matches!(r, Err(Error::NoOverlap)));
    }
}
