//! Per-sample variational motion estimation: minimizes the total loss
//! directly over a full-resolution motion field, coarse to fine.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, shape, Error, Result};
use crate::flow::loss::{LevelObjective, LossBreakdown, LossConfig, Series};
use crate::grid::{MotionField, RainField};

/// Starting point of the optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    /// Zero field at full resolution, no pyramid.
    Zero,
    /// Zero field at the coarsest pyramid level, refined level by level.
    #[default]
    Pyramid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    /// Iteration cap per pyramid level.
    pub max_iters: usize,
    /// Initial step length in grid cells (applied to the max-normalized gradient).
    pub step_size: f64,
    pub momentum: f64,
    /// Radius of the box blur applied to the gradient before each step (0 disables it).
    pub smoothing: usize,
    pub coarse_to_fine_levels: usize,
    pub init: Init,
    /// Validate the analytic gradient against central differences before optimizing.
    pub grad_check: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iters: 150,
            step_size: 0.25,
            momentum: 0.8,
            smoothing: 16,
            coarse_to_fine_levels: 3,
            init: Init::Pyramid,
            grad_check: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return invalid("max_iters must be >= 1");
        }
        if !(self.step_size > 0.0) {
            return invalid("step_size must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid("momentum must lie in [0, 1)");
        }
        if self.coarse_to_fine_levels == 0 {
            return invalid("coarse_to_fine_levels must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelStatus {
    /// Step length shrank below tolerance.
    Converged,
    /// Stopped at the iteration cap.
    MaxIters,
    /// No precipitation in any frame; the zero field is returned.
    NoSignal,
}

/// One accepted iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub level: usize,
    /// 0 is full resolution.
    pub pyramid_level: usize,
    pub iter: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub field: MotionField,
    pub status: Vec<LevelStatus>,
    pub trace: Vec<TraceRow>,
    /// Largest gradient relative error per level, when `grad_check` was requested.
    pub grad_check: Option<Vec<f64>>,
}

/// Relative error of the analytic gradient against central finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

const GRAD_CHECK_TOL: f64 = 1e-4;

/// Compares the analytic gradient of the level objective at `u` with central
/// differences on `n_coords` random coordinates (all of them when `None`).
/// Per-coordinate error is `|a − n| / max(|a|, |n|, 1e-6·‖g‖∞)`.
///
/// Along one coordinate the loss is piecewise linear (or quadratic for MSE),
/// so the step is the largest of [`FD_STEPS`] whose forward and backward
/// differences agree, which keeps roundoff small without straddling a kink.
pub(crate) fn check_gradient(
    obj: &LevelObjective,
    u: &Array3<f64>,
    n_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheck> {
    let (center, g) = obj.eval(u, true)?;
    let g = g.expect("gradient requested");
    let l0 = center.total;
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let total = g.len();
    let coords: Vec<usize> = match n_coords {
        None => (0..total).collect(),
        Some(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n.min(total)).map(|_| rng.gen_range(0..total)).collect()
        }
    };
    let mut worst = 0.0f64;
    let mut probe = u.clone();
    for &i in &coords {
        let orig = probe.as_slice().expect("standard layout")[i];
        let mut numeric = 0.0;
        for (j, &h) in FD_STEPS.iter().enumerate() {
            probe.as_slice_mut().expect("standard layout")[i] = orig + h;
            let plus = obj.eval(&probe, false)?.0.total;
            probe.as_slice_mut().expect("standard layout")[i] = orig - h;
            let minus = obj.eval(&probe, false)?.0.total;
            probe.as_slice_mut().expect("standard layout")[i] = orig;
            numeric = (plus - minus) / (2.0 * h);
            let (fwd, bwd) = ((plus - l0) / h, (l0 - minus) / h);
            let noise = 16.0 * f64::EPSILON * l0.abs().max(1.0) / h;
            if j + 1 == FD_STEPS.len() || (fwd - bwd).abs() <= 1e-3 * fwd.abs().max(bwd.abs()) + noise {
                break;
            }
        }
        let analytic = g.as_slice().expect("standard layout")[i];
        let denom = analytic.abs().max(numeric.abs()).max(1e-6 * scale).max(f64::MIN_POSITIVE);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(GradCheck { max_rel_error: worst, checked: coords.len() })
}

const FD_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];

/// Gradient check of the total loss for a frame sequence at motion `mf`, all coordinates.
pub fn gradient_check(phi: &[RainField], mf: &MotionField, cfg: &LossConfig) -> Result<GradCheck> {
    cfg.validate()?;
    if phi.len() < 2 {
        return invalid("need at least two frames");
    }
    if mf.dim() != phi[0].dim() {
        return shape("motion and frames differ in shape");
    }
    let mut worst = GradCheck { max_rel_error: 0.0, checked: 0 };
    let z = mf.dim().0;
    for k in 0..z {
        let obj = LevelObjective::new(&Series::from_fields(phi, k), &cfg.scales, cfg.criterion, cfg.beta)?;
        let g = check_gradient(&obj, &mf.level(k).to_owned(), None, 0)?;
        worst.max_rel_error = worst.max_rel_error.max(g.max_rel_error);
        worst.checked += g.checked;
    }
    // level averaging rescales both gradients identically
    Ok(worst)
}

/// Bilinear ×2 upsampling of a `2 × Y × X` motion field to `(ny, nx)`, with vectors doubled.
fn upsample(u: &Array3<f64>, ny: usize, nx: usize) -> Array3<f64> {
    let (_, cy, cx) = u.dim();
    Array3::from_shape_fn((2, ny, nx), |(c, y, x)| {
        let sy = ((y as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (cy - 1) as f64);
        let sx = ((x as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (cx - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(cy - 1), (x0 + 1).min(cx - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let top = u[[c, y0, x0]] * (1.0 - fx) + u[[c, y0, x1]] * fx;
        let bottom = u[[c, y1, x0]] * (1.0 - fx) + u[[c, y1, x1]] * fx;
        2.0 * (top * (1.0 - fy) + bottom * fy)
    })
}

/// Scales usable on a grid: pooled size at least 2 in both directions.
fn usable_scales(scales: &[usize], ny: usize, nx: usize) -> Vec<usize> {
    scales.iter().copied().filter(|&k| ny.div_ceil(k) >= 2 && nx.div_ceil(k) >= 2).collect()
}

struct LevelResult {
    u: Array3<f64>,
    status: LevelStatus,
    trace: Vec<TraceRow>,
    grad_check: Option<f64>,
}

/// Two passes of a separable box blur of radius `r` per channel, clamped at
/// the borders. Symmetric and positive semi-definite, so the blurred
/// negative gradient stays a descent direction.
fn smooth(g: &Array3<f64>, r: usize) -> Array3<f64> {
    if r == 0 {
        return g.clone();
    }
    let (c, ny, nx) = g.dim();
    let mut out = g.clone();
    let mut tmp = Array2::<f64>::zeros((ny, nx));
    for k in 0..c {
        for _ in 0..2 {
            let mut plane = out.index_axis_mut(ndarray::Axis(0), k);
            for y in 0..ny {
                for x in 0..nx {
                    let (lo, hi) = (x.saturating_sub(r), (x + r).min(nx - 1));
                    tmp[[y, x]] = (lo..=hi).map(|j| plane[[y, j]]).sum::<f64>() / (hi - lo + 1) as f64;
                }
            }
            for y in 0..ny {
                for x in 0..nx {
                    let (lo, hi) = (y.saturating_sub(r), (y + r).min(ny - 1));
                    plane[[y, x]] = (lo..=hi).map(|i| tmp[[i, x]]).sum::<f64>() / (hi - lo + 1) as f64;
                }
            }
        }
    }
    out
}

/// Momentum descent on the max-normalized gradient with backtracking: a
/// step that raises the loss is rejected, momentum is reset and the step
/// length halved; accepted steps lengthen it slightly.
fn descend(
    obj: &LevelObjective,
    mut u: Array3<f64>,
    opt: &OptimizerConfig,
    level: usize,
    pyramid_level: usize,
    trace: &mut Vec<TraceRow>,
) -> Result<(Array3<f64>, LevelStatus)> {
    let (mut cur, g) = obj.eval(&u, true)?;
    if !cur.total.is_finite() {
        return Err(Error::Diverged { iteration: 0 });
    }
    let mut g = g.expect("gradient requested");
    trace.push(TraceRow { level, pyramid_level, iter: 0, loss: cur });
    let mut velocity = Array3::<f64>::zeros(u.dim());
    let mut step = opt.step_size;
    let min_step = opt.step_size * 1e-4;
    for iter in 1..=opt.max_iters {
        let d = smooth(&g, opt.smoothing);
        let gmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax == 0.0 {
            return Ok((u, LevelStatus::Converged));
        }
        let proposal_v = &velocity * opt.momentum - &d * (step / gmax);
        let proposal = &u + &proposal_v;
        let (next, next_g) = obj.eval(&proposal, true)?;
        if !next.total.is_finite() {
            return Err(Error::Diverged { iteration: iter });
        }
        if next.total <= cur.total {
            u = proposal;
            velocity = proposal_v;
            cur = next;
            g = next_g.expect("gradient requested");
            step *= 1.1;
            trace.push(TraceRow { level, pyramid_level, iter, loss: cur });
        } else {
            velocity.fill(0.0);
            step *= 0.5;
            if step < min_step {
                return Ok((u, LevelStatus::Converged));
            }
        }
    }
    Ok((u, LevelStatus::MaxIters))
}

fn estimate_level(series: &Series, z: usize, cfg: &LossConfig, opt: &OptimizerConfig) -> Result<LevelResult> {
    let (ny, nx) = series.dim();
    if !series.has_signal() {
        return Ok(LevelResult { u: Array3::zeros((2, ny, nx)), status: LevelStatus::NoSignal, trace: vec![], grad_check: None });
    }
    let mut trace = Vec::new();
    let mut grad_check = None;
    let pyramid = match opt.init {
        Init::Zero => 1,
        Init::Pyramid => opt.coarse_to_fine_levels,
    };
    // coarsest level must keep at least 8 cells per side
    let levels = (0..pyramid)
        .take_while(|&l| ny.div_ceil(1 << l) >= 8 && nx.div_ceil(1 << l) >= 8)
        .count()
        .max(1);
    let mut u: Option<Array3<f64>> = None;
    let mut status = LevelStatus::MaxIters;
    for l in (0..levels).rev() {
        let f = 1usize << l;
        let s = if f == 1 { series.clone() } else { series.pooled(f)? };
        let (ly, lx) = s.dim();
        let scales = usable_scales(&cfg.scales, ly, lx);
        if scales.is_empty() {
            return invalid(format!("no pooling scale fits a {ly}x{lx} grid"));
        }
        let obj = LevelObjective::new(&s, &scales, cfg.criterion, cfg.beta)?;
        let start = match u.take() {
            None => Array3::zeros((2, ly, lx)),
            Some(prev) => upsample(&prev, ly, lx),
        };
        if opt.grad_check && l == 0 {
            // jitter away from integer departure points, where bilinear warping has kinks
            let mut rng = ChaCha8Rng::seed_from_u64(z as u64);
            let probe = start.mapv(|v| v + rng.gen_range(0.1..0.4));
            let gc = check_gradient(&obj, &probe, Some(64), z as u64)?;
            if gc.max_rel_error >= GRAD_CHECK_TOL {
                return Err(Error::Precondition(format!(
                    "gradient check failed at level {z}: relative error {:.3e}",
                    gc.max_rel_error
                )));
            }
            grad_check = Some(gc.max_rel_error);
        }
        let (next, st) = match obj.eval(&start, false) {
            Err(Error::NoOverlap) => (start, LevelStatus::NoSignal),
            Err(e) => return Err(e),
            Ok(_) => descend(&obj, start, opt, z, l, &mut trace)?,
        };
        status = st;
        u = Some(next);
    }
    Ok(LevelResult { u: u.expect("at least one pyramid level"), status, trace, grad_check })
}

/// Estimates one motion field per altitude level from `inputs` (and, when
/// fitting, the `future` frames appended to the sequence). Levels are
/// optimized independently and in parallel.
pub fn estimate_variational(
    inputs: &[RainField],
    future: Option<&[RainField]>,
    cfg: &LossConfig,
    opt: &OptimizerConfig,
) -> Result<Estimate> {
    cfg.validate()?;
    opt.validate()?;
    if inputs.len() < 2 {
        return invalid("motion estimation needs at least two input frames");
    }
    let mut phi: Vec<RainField> = inputs.to_vec();
    if let Some(f) = future {
        phi.extend_from_slice(f);
    }
    let dim = phi[0].dim();
    let space = phi[0].space();
    if phi.iter().any(|f| f.dim() != dim || f.space() != space) {
        return shape("frames differ in shape or unit space");
    }
    let (z, _, _) = dim;
    let results: Vec<Result<LevelResult>> = (0..z)
        .into_par_iter()
        .map(|k| estimate_level(&Series::from_fields(&phi, k), k, cfg, opt))
        .collect();
    let mut levels = Vec::with_capacity(z);
    let mut status = Vec::with_capacity(z);
    let mut trace = Vec::new();
    let mut checks = Vec::new();
    for r in results {
        let r = r?;
        levels.push(r.u);
        status.push(r.status);
        trace.extend(r.trace);
        if let Some(c) = r.grad_check {
            checks.push(c);
        }
    }
    Ok(Estimate {
        field: MotionField::from_levels(&levels)?,
        status,
        trace,
        grad_check: opt.grad_check.then_some(checks),
    })
}

/// Frames `n` onward as future frames, the first `n` as inputs.
pub fn split_inputs(phi: &[RainField], n: usize) -> (&[RainField], &[RainField]) {
    let n = n.min(phi.len());
    phi.split_at(n)
}

/// Cells with precipitation in `frame` at level `z` (any value above the background).
pub fn precipitating(frame: &RainField, z: usize) -> Array2<bool> {
    let bg = frame.space().background();
    ndarray::Zip::from(frame.level(z))
        .and(frame.level_mask(z))
        .map_collect(|&v, &m| m && v > bg + 1e-9)
}
