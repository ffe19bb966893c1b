//! Synthetic volumetric scenes with exact ground-truth motion.
//!
//! Cells are isotropic Gaussians in dBZ, evaluated analytically at their
//! advected centers, so frames carry no interpolation error.

use std::f64::consts::FRAC_PI_2;

use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::grid::{MotionField, RadarVolume};
use crate::transform::NO_ECHO_DBZ;

/// A reflectivity cell; `(x, y)` is its center at the scenario's reference frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub x: f64,
    pub y: f64,
    /// Peak reflectivity, dBZ.
    pub amplitude: f64,
    /// Standard deviation in grid cells.
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Motion {
    /// Same displacement at every level.
    Uniform { u: (f64, f64) },
    /// One displacement per level.
    Shear { per_level: Vec<(f64, f64)> },
    /// Rigid rotation about `center` by `omega` radians per step.
    Rotation { center: (f64, f64), omega: f64 },
    /// Cell `c` at level `z` moves with `cos(angles[z])·a[c] + sin(angles[z])·b[c]`.
    CellShear { a: Vec<(f64, f64)>, b: Vec<(f64, f64)>, angles: Vec<f64> },
}

/// Stationary low-ρ_HV echo.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clutter {
    pub x: f64,
    pub y: f64,
    pub amplitude: f64,
    pub sigma: f64,
    pub rho_hv: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Noise {
    /// Per-cell probability of an isolated sub-40 dBZ speckle.
    pub speckle_prob: f64,
    pub clutter: Vec<Clutter>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScenario {
    pub frames: usize,
    pub ny: usize,
    pub nx: usize,
    /// Altitudes in meters, one per level.
    pub z_levels: Vec<f64>,
    pub dt: u32,
    pub cells: Vec<Cell>,
    /// Per-level multiplier on cell amplitudes.
    pub profile: Vec<f64>,
    pub motion: Motion,
    /// Breaks persistence: after this frame every cell moves with its
    /// level-averaged velocity. The ground truth describes the earlier motion.
    pub coherent_after: Option<usize>,
    /// Frame at which cell centers are given and per-cell truth is assigned to grid cells.
    pub reference_frame: usize,
    /// Reflectivity below this is reported as no echo.
    pub echo_floor_dbz: f64,
    pub noise: Noise,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Uniform,
    Rotation,
    Shear2,
    Shear8,
    Noisy,
    Split,
    /// 24 × 8 × 512 × 512 uniform scene.
    Crop,
}

impl Preset {
    pub const ALL: [Preset; 7] =
        [Preset::Uniform, Preset::Rotation, Preset::Shear2, Preset::Shear8, Preset::Noisy, Preset::Split, Preset::Crop];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Uniform => "uniform",
            Preset::Rotation => "rotation",
            Preset::Shear2 => "shear2",
            Preset::Shear8 => "shear8",
            Preset::Noisy => "noisy",
            Preset::Split => "split",
            Preset::Crop => "crop",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Preset> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| crate::error::Error::InvalidArgument(format!("unknown preset {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub volume: RadarVolume,
    pub truth: MotionField,
    /// Injected speckle positions `[t, z, y, x]`.
    pub speckles: Vec<[usize; 4]>,
    pub warnings: Vec<String>,
}

pub const UNIFORM_U: (f64, f64) = (3.0, -2.0);
pub const SHEAR2_LOW: (f64, f64) = (3.0, 0.0);
pub const SHEAR2_HIGH: (f64, f64) = (0.0, 3.0);
pub const SPLIT_LOW: (f64, f64) = (2.0, 0.0);
pub const SPLIT_HIGH: (f64, f64) = (1.0, 0.0);
/// RMS per-component speed of the per-cell velocity bases of the 8-level shear.
pub const SHEAR8_SPEED: f64 = 1.0;
pub const NOISY_SPECKLE_PROB: f64 = 0.001;
pub const NOISY_CLUTTER_RHO: f64 = 0.3;

fn altitudes(z: usize) -> Vec<f64> {
    (0..z).map(|k| 1000.0 + 1000.0 * k as f64).collect()
}

fn profile(z: usize) -> Vec<f64> {
    (0..z).map(|k| 1.0 - 0.03 * k as f64).collect()
}

/// Random cells with centers inside the grid margins.
fn random_cells(rng: &mut ChaCha8Rng, n: usize, ny: usize, nx: usize, sigma: (f64, f64), margin: f64) -> Vec<Cell> {
    (0..n)
        .map(|_| Cell {
            x: rng.gen_range(margin..nx as f64 - margin),
            y: rng.gen_range(margin..ny as f64 - margin),
            amplitude: rng.gen_range(38.0..55.0),
            sigma: rng.gen_range(sigma.0..sigma.1),
        })
        .collect()
}

/// Cells at least `min_dist` apart, by rejection sampling.
fn separated_cells(rng: &mut ChaCha8Rng, n: usize, ny: usize, nx: usize, sigma: (f64, f64), margin: f64, min_dist: f64) -> Vec<Cell> {
    let mut cells: Vec<Cell> = Vec::with_capacity(n);
    let mut tries = 0;
    while cells.len() < n && tries < 10_000 {
        tries += 1;
        let c = random_cells(rng, 1, ny, nx, sigma, margin)[0];
        if cells.iter().all(|o| (o.x - c.x).hypot(o.y - c.y) >= min_dist) {
            cells.push(c);
        }
    }
    cells
}

/// Canonical scenarios. Cells are placed at their reference-frame positions
/// and moved back so that the last input frame (index 7) is well populated.
pub fn preset(p: Preset, seed: u64) -> SyntheticScenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000 ^ p as u64);
    let reference = 7;
    let base = |frames, z: usize, n: usize, cells: Vec<Cell>, motion| SyntheticScenario {
        frames,
        ny: n,
        nx: n,
        z_levels: altitudes(z),
        dt: 300,
        cells,
        profile: profile(z),
        motion,
        coherent_after: None,
        reference_frame: reference,
        echo_floor_dbz: 1.0,
        noise: Noise::default(),
        seed,
    };
    match p {
        Preset::Uniform | Preset::Noisy => {
            let cells = random_cells(&mut rng, 5, 128, 128, (14.0, 20.0), 24.0);
            let mut s = base(8, 8, 128, cells, Motion::Uniform { u: UNIFORM_U });
            if p == Preset::Noisy {
                s.noise = Noise {
                    speckle_prob: NOISY_SPECKLE_PROB,
                    clutter: vec![Clutter {
                        x: rng.gen_range(20.0..108.0),
                        y: rng.gen_range(20.0..108.0),
                        amplitude: 35.0,
                        sigma: 3.0,
                        rho_hv: NOISY_CLUTTER_RHO,
                    }],
                };
            }
            s
        }
        Preset::Crop => {
            let cells = random_cells(&mut rng, 40, 512, 512, (14.0, 24.0), 32.0);
            base(24, 8, 512, cells, Motion::Uniform { u: UNIFORM_U })
        }
        Preset::Rotation => {
            let cells = (0..6)
                .map(|i| {
                    let a = i as f64 * std::f64::consts::TAU / 6.0 + rng.gen_range(-0.2..0.2);
                    let r = rng.gen_range(25.0..42.0);
                    Cell { x: 64.0 + r * a.cos(), y: 64.0 + r * a.sin(), amplitude: rng.gen_range(40.0..55.0), sigma: 10.0 }
                })
                .collect();
            base(8, 8, 128, cells, Motion::Rotation { center: (64.0, 64.0), omega: 2f64.to_radians() })
        }
        Preset::Shear2 => {
            // levels coincide at the reference frame and separate orthogonally
            let cells = random_cells(&mut rng, 4, 128, 128, (14.0, 20.0), 28.0);
            base(8, 2, 128, cells, Motion::Shear { per_level: vec![SHEAR2_LOW, SHEAR2_HIGH] })
        }
        Preset::Shear8 => {
            let n = 8;
            let cells = separated_cells(&mut rng, n, 128, 128, (7.0, 9.0), 18.0, 38.0);
            let n = cells.len();
            let (a, b) = orthogonal_velocities(&mut rng, n, SHEAR8_SPEED);
            let angles: Vec<f64> = (0..8).map(|k| FRAC_PI_2 * k as f64 / 7.0).collect();
            base(8, 8, 128, cells, Motion::CellShear { a, b, angles })
        }
        Preset::Split => {
            // the two levels of one cell converge at the reference frame, then move together;
            // a weak wide echo around the core carries the motion signal downstream
            let cells = vec![
                Cell { x: 48.0, y: 64.0, amplitude: 50.0, sigma: 4.0 },
                Cell { x: 48.0, y: 64.0, amplitude: 24.0, sigma: 28.0 },
            ];
            let mut s = base(8, 2, 128, cells, Motion::Shear { per_level: vec![SPLIT_LOW, SPLIT_HIGH] });
            s.coherent_after = Some(reference);
            s
        }
    }
}

/// Zero-mean, mutually uncorrelated, equal-norm per-cell velocity vectors
/// `a` and `b` (as concatenated `[u; v]` samples), with RMS speed `speed`.
fn orthogonal_velocities(rng: &mut ChaCha8Rng, n: usize, speed: f64) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let center = |v: &mut Vec<f64>| {
        // zero mean over the concatenated vector
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= m);
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut a = draw(rng);
    center(&mut a);
    let mut b = draw(rng);
    center(&mut b);
    let proj = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / norm(&a).powi(2);
    b.iter_mut().zip(&a).for_each(|(y, x)| *y -= proj * x);
    let scale = speed * ((2 * n) as f64).sqrt();
    let (na, nb) = (norm(&a), norm(&b));
    let pairs = |v: &[f64], s: f64| -> Vec<(f64, f64)> { (0..n).map(|c| (v[c] * s, v[n + c] * s)).collect() };
    (pairs(&a, scale / na), pairs(&b, scale / nb))
}

impl SyntheticScenario {
    pub fn levels(&self) -> usize {
        self.z_levels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let z = self.levels();
        if self.frames == 0 || self.ny == 0 || self.nx == 0 || z == 0 {
            return invalid("scenario dimensions must be positive");
        }
        if self.profile.len() != z {
            return invalid("profile needs one multiplier per level");
        }
        for c in &self.cells {
            let peak = self.profile.iter().fold(0.0f64, |m, &p| m.max(c.amplitude * p));
            if !(0.0..=70.0).contains(&c.amplitude) || !(0.0..=70.0).contains(&peak) {
                return invalid("cell amplitudes must lie in [0, 70] dBZ");
            }
            if !(c.sigma > 0.0) || !c.x.is_finite() || !c.y.is_finite() {
                return invalid("cells need a positive sigma and finite center");
            }
        }
        match &self.motion {
            Motion::Uniform { u } => finite(&[*u])?,
            Motion::Shear { per_level } => {
                if per_level.len() != z {
                    return invalid("shear motion needs one vector per level");
                }
                finite(per_level)?
            }
            Motion::Rotation { center, omega } => {
                finite(&[*center, (*omega, 0.0)])?;
                if self.coherent_after.is_some() {
                    return invalid("coherent_after applies to translating scenes only");
                }
            }
            Motion::CellShear { a, b, angles } => {
                if a.len() != self.cells.len() || b.len() != self.cells.len() || angles.len() != z {
                    return invalid("cell shear needs one vector pair per cell and one angle per level");
                }
                finite(a)?;
                finite(b)?;
                finite(&angles.iter().map(|&t| (t, 0.0)).collect::<Vec<_>>())?;
            }
        }
        if !(0.0..=1.0).contains(&self.noise.speckle_prob) {
            return invalid("speckle probability must lie in [0, 1]");
        }
        if self.noise.clutter.iter().any(|c| !(0.0..=1.0).contains(&c.rho_hv) || !(c.sigma > 0.0)) {
            return invalid("clutter needs rho_hv in [0, 1] and a positive sigma");
        }
        Ok(())
    }

    /// Velocity of cell `c` at level `z`.
    fn velocity(&self, z: usize, c: usize) -> (f64, f64) {
        match &self.motion {
            Motion::Uniform { u } => *u,
            Motion::Shear { per_level } => per_level[z],
            Motion::Rotation { .. } => (0.0, 0.0),
            Motion::CellShear { a, b, angles } => {
                let (s, co) = angles[z].sin_cos();
                (co * a[c].0 + s * b[c].0, co * a[c].1 + s * b[c].1)
            }
        }
    }

    /// Center of cell `c` at level `z`, frame `t`.
    pub fn center(&self, z: usize, c: usize, t: usize) -> (f64, f64) {
        let cell = self.cells[c];
        let r = self.reference_frame as f64;
        if let Motion::Rotation { center, omega } = self.motion {
            let (s, co) = (omega * (t as f64 - r)).sin_cos();
            let (dx, dy) = (cell.x - center.0, cell.y - center.1);
            return (center.0 + co * dx - s * dy, center.1 + s * dx + co * dy);
        }
        let v = self.velocity(z, c);
        match self.coherent_after {
            Some(t0) if t > t0 => {
                let z_all = self.levels();
                let mean = (0..z_all).map(|k| self.velocity(k, c)).fold((0.0, 0.0), |m, w| (m.0 + w.0, m.1 + w.1));
                let mean = (mean.0 / z_all as f64, mean.1 / z_all as f64);
                let (a, b) = (t0 as f64 - r, (t - t0) as f64);
                (cell.x + v.0 * a + mean.0 * b, cell.y + v.1 * a + mean.1 * b)
            }
            _ => (cell.x + v.0 * (t as f64 - r), cell.y + v.1 * (t as f64 - r)),
        }
    }

    /// Noise-free reflectivity at level `z`, frame `t`, cell `(y, x)`, before the echo floor.
    fn clean(&self, z: usize, t: usize, y: usize, x: usize) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for (c, cell) in self.cells.iter().enumerate() {
            let (cx, cy) = self.center(z, c, t);
            let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            best = best.max(cell.amplitude * self.profile[z] * (-r2 / (2.0 * cell.sigma * cell.sigma)).exp());
        }
        best
    }

    fn truth(&self) -> MotionField {
        let z = self.levels();
        let (ny, nx) = (self.ny, self.nx);
        let mut u = Array4::zeros((z, 2, ny, nx));
        for k in 0..z {
            for y in 0..ny {
                for x in 0..nx {
                    let (ux, uy) = match &self.motion {
                        Motion::Uniform { u } => *u,
                        Motion::Shear { per_level } => per_level[k],
                        Motion::Rotation { center, omega } => {
                            // backward: p − u = R(−ω)(p − c) + c
                            let (dx, dy) = (x as f64 - center.0, y as f64 - center.1);
                            let (s, co) = omega.sin_cos();
                            (dx - (co * dx + s * dy), dy - (-s * dx + co * dy))
                        }
                        Motion::CellShear { .. } => {
                            // velocity of the cell dominating this point at the reference frame
                            let mut best = (f64::NEG_INFINITY, 0);
                            for (c, cell) in self.cells.iter().enumerate() {
                                let (cx, cy) = self.center(k, c, self.reference_frame);
                                let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                                let score = (cell.amplitude * self.profile[k]).max(1e-9).ln() - r2 / (2.0 * cell.sigma * cell.sigma);
                                if score > best.0 {
                                    best = (score, c);
                                }
                            }
                            if self.cells.is_empty() {
                                (0.0, 0.0)
                            } else {
                                self.velocity(k, best.1)
                            }
                        }
                    };
                    u[[k, 0, y, x]] = ux;
                    u[[k, 1, y, x]] = uy;
                }
            }
        }
        MotionField::new(u).expect("finite truth")
    }
}

fn finite(v: &[(f64, f64)]) -> Result<()> {
    if v.iter().all(|(a, b)| a.is_finite() && b.is_finite()) {
        Ok(())
    } else {
        invalid("velocities must be finite")
    }
}

/// Renders the scenario. Same scenario and seed give bit-identical output.
pub fn generate(s: &SyntheticScenario) -> Result<Synthetic> {
    s.validate()?;
    let (t, z, ny, nx) = (s.frames, s.levels(), s.ny, s.nx);
    let mut warnings = Vec::new();
    for (c, cell) in s.cells.iter().enumerate() {
        let (cx, cy) = s.center(0, c, s.reference_frame.min(t - 1));
        if cx < 0.0 || cy < 0.0 || cx >= nx as f64 || cy >= ny as f64 {
            warnings.push(format!("cell {c} (amplitude {:.1} dBZ) is centered outside the grid; clipped", cell.amplitude));
        }
    }
    let frames: Vec<Array3<f64>> = (0..t)
        .into_par_iter()
        .map(|ti| {
            Array3::from_shape_fn((z, ny, nx), |(k, y, x)| {
                let v = s.clean(k, ti, y, x);
                if v >= s.echo_floor_dbz {
                    v
                } else {
                    NO_ECHO_DBZ
                }
            })
        })
        .collect();
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    let mut data = ndarray::stack(Axis(0), &views).expect("frames share a shape");

    let mut rho = Array4::from_elem((t, z, ny, nx), 0.98);
    for cl in &s.noise.clutter {
        for ti in 0..t {
            for k in 0..z {
                for y in 0..ny {
                    for x in 0..nx {
                        let r2 = (x as f64 - cl.x).powi(2) + (y as f64 - cl.y).powi(2);
                        let v = cl.amplitude * (-r2 / (2.0 * cl.sigma * cl.sigma)).exp();
                        if v >= s.echo_floor_dbz {
                            let d = &mut data[[ti, k, y, x]];
                            if v > *d {
                                *d = v;
                                rho[[ti, k, y, x]] = cl.rho_hv;
                            }
                        }
                    }
                }
            }
        }
    }

    let mut speckles = Vec::new();
    if s.noise.speckle_prob > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        let clear = |d: &Array3<f64>, y: usize, x: usize| {
            let r = 3usize;
            (y.saturating_sub(r)..(y + r + 1).min(ny))
                .all(|yy| (x.saturating_sub(r)..(x + r + 1).min(nx)).all(|xx| d[[0, yy, xx]] <= NO_ECHO_DBZ))
        };
        for ti in 0..t {
            for k in 0..z {
                let plane = data.slice(ndarray::s![ti, k..k + 1, .., ..]).to_owned();
                for y in 0..ny {
                    for x in 0..nx {
                        let hit = rng.gen_bool(s.noise.speckle_prob);
                        let value = rng.gen_range(10.0..35.0);
                        // speckles sit away from any echo, so they stay isolated
                        if hit && clear(&plane, y, x) {
                            data[[ti, k, y, x]] = value;
                            rho[[ti, k, y, x]] = 0.9;
                            speckles.push([ti, k, y, x]);
                        }
                    }
                }
            }
        }
    }

    let volume = RadarVolume::new(data, s.z_levels.clone(), s.dt)?.with_rho_hv(rho)?;
    Ok(Synthetic { volume, truth: s.truth(), speckles, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advect::advect_once;
    use crate::grid::{RainField, Space};

    fn single(u: (f64, f64), frames: usize) -> SyntheticScenario {
        SyntheticScenario {
            frames,
            ny: 40,
            nx: 40,
            z_levels: vec![1000.0],
            dt: 300,
            cells: vec![Cell { x: 15.0, y: 20.0, amplitude: 45.0, sigma: 5.0 }],
            profile: vec![1.0],
            motion: Motion::Uniform { u },
            coherent_after: None,
            reference_frame: 0,
            echo_floor_dbz: 1.0,
            noise: Noise::default(),
            seed: 1,
        }
    }

    #[test]
    fn zero_velocity_frames_are_identical() {
        let g = generate(&single((0.0, 0.0), 4)).unwrap();
        let d = g.volume.data();
        for t in 1..4 {
            assert_eq!(d.index_axis(Axis(0), t), d.index_axis(Axis(0), 0));
        }
    }

    #[test]
    fn unit_translation_is_an_exact_column_shift() {
        let g = generate(&single((1.0, 0.0), 5)).unwrap();
        let d = g.volume.data();
        for t in 1..5 {
            for y in 0..40 {
                for x in t..40 {
                    assert_eq!(d[[t, 0, y, x]], d[[0, 0, y, x - t]]);
                }
            }
        }
    }

    #[test]
    fn presets_have_documented_constants() {
        let u = preset(Preset::Uniform, 0);
        assert_eq!((u.frames, u.levels(), u.ny, u.nx), (8, 8, 128, 128));
        let g = generate(&u).unwrap();
        for k in 0..8 {
            let l = g.truth.level(k);
            assert!(l.index_axis(Axis(0), 0).iter().all(|&v| v == UNIFORM_U.0));
            assert!(l.index_axis(Axis(0), 1).iter().all(|&v| v == UNIFORM_U.1));
        }

        let s = preset(Preset::Shear2, 0);
        let Motion::Shear { per_level } = &s.motion else { panic!("shear2 must be a shear") };
        let (a, b) = (per_level[0], per_level[1]);
        assert_eq!(a.0 * b.0 + a.1 * b.1, 0.0);
        assert_eq!(a.0.hypot(a.1), 3.0);
        assert_eq!(b.0.hypot(b.1), 3.0);

        let n = preset(Preset::Noisy, 0);
        assert_eq!(n.noise.speckle_prob, 0.001);
        assert_eq!(n.noise.clutter.len(), 1);
        assert_eq!(n.noise.clutter[0].rho_hv, 0.3);

        let c = preset(Preset::Crop, 0);
        assert_eq!((c.frames, c.levels(), c.ny, c.nx), (24, 8, 512, 512));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate(&preset(Preset::Noisy, 42)).unwrap();
        let b = generate(&preset(Preset::Noisy, 42)).unwrap();
        assert_eq!(a.volume.data(), b.volume.data());
        assert_eq!(a.volume.rho_hv(), b.volume.rho_hv());
        assert_eq!(a.speckles, b.speckles);
        let c = generate(&preset(Preset::Noisy, 43)).unwrap();
        assert_ne!(a.volume.data(), c.volume.data());
    }

    #[test]
    fn shear_column_max_elongates_diagonally() {
        let mut s = preset(Preset::Shear2, 3);
        s.cells.truncate(1);
        s.cells[0] = Cell { x: 40.0, y: 40.0, amplitude: 50.0, sigma: 5.0 };
        s.reference_frame = 0;
        s.frames = 10;
        let g = generate(&s).unwrap();
        let c = g.volume.cmax();
        let spread = |t: usize| {
            let d = c.data();
            let pts: Vec<(f64, f64)> = (0..128)
                .flat_map(|y| (0..128).map(move |x| (y, x)))
                .filter(|&(y, x)| d[[t, 0, y, x]] > 20.0)
                .map(|(y, x)| (x as f64, y as f64))
                .collect();
            let n = pts.len() as f64;
            let along = |dx: f64, dy: f64| {
                let proj: Vec<f64> = pts.iter().map(|(x, y)| (x * dx + y * dy) / 2f64.sqrt()).collect();
                let m = proj.iter().sum::<f64>() / n;
                proj.iter().map(|p| (p - m).powi(2)).sum::<f64>() / n
            };
            (along(1.0, -1.0), along(1.0, 1.0))
        };
        let (anti0, diag0) = spread(0);
        let (anti9, diag9) = spread(9);
        assert!((anti0 - diag0).abs() < 1.0);
        assert!(anti9 > 4.0 * diag9);
    }

    #[test]
    fn truth_reproduces_next_frame() {
        let cases = [Preset::Uniform, Preset::Rotation, Preset::Shear2, Preset::Shear8, Preset::Split];
        for (p, seed) in cases.into_iter().flat_map(|p| (0..3).map(move |s| (p, s))) {
            let g = generate(&preset(p, seed)).unwrap();
            let vol = &g.volume;
            let peak = vol.data().iter().fold(0.0f64, |m, &v| m.max(v));
            for t in 0..vol.dim().0 - 1 {
                // dBZ offset so that no echo is 0, matching the zero inflow of the warp
                let f = RainField::from_data(vol.frame(t).mapv(|v| v - NO_ECHO_DBZ), Space::Mmh).unwrap();
                let next = vol.frame(t + 1);
                let moved = advect_once(&f, &g.truth).unwrap();
                let mut err = 0.0;
                let mut n = 0.0;
                for ((&a, &b), &m) in moved.data().iter().zip(next.iter()).zip(moved.mask().iter()) {
                    if m {
                        err += (a - (b - NO_ECHO_DBZ)).abs();
                        n += 1.0;
                    }
                }
                assert!(err / n < 0.02 * peak, "{p:?} t={t}: {} vs peak {peak}", err / n);
            }
        }
    }

    #[test]
    fn split_levels_coincide_then_move_together() {
        let s = preset(Preset::Split, 0);
        let at = |z, t| s.center(z, 0, t);
        assert_eq!(at(0, 7), at(1, 7));
        assert!((at(0, 0).0 - at(1, 0).0).abs() > 5.0);
        assert_eq!(at(0, 12), at(1, 12));
    }

    #[test]
    fn shear8_velocities_are_decorrelated() {
        let s = preset(Preset::Shear8, 1);
        let Motion::CellShear { a, b, .. } = &s.motion else { panic!() };
        let flat = |v: &[(f64, f64)]| v.iter().map(|p| p.0).chain(v.iter().map(|p| p.1)).collect::<Vec<_>>();
        let (fa, fb) = (flat(a), flat(b));
        let dot: f64 = fa.iter().zip(&fb).map(|(x, y)| x * y).sum();
        assert!(dot.abs() < 1e-9);
        assert!(fa.iter().sum::<f64>().abs() < 1e-9);
        assert!(fb.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn speckles_are_isolated() {
        let g = generate(&preset(Preset::Noisy, 2)).unwrap();
        assert!(!g.speckles.is_empty());
        let d = g.volume.data();
        for &[t, z, y, x] in &g.speckles {
            assert!(d[[t, z, y, x]] < 40.0);
            for (dy, dx) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && yy < 128 && xx < 128 {
                    assert!(d[[t, z, yy as usize, xx as usize]] <= NO_ECHO_DBZ);
                }
            }
        }
        let rho = g.volume.rho_hv().unwrap();
        assert!(rho.iter().any(|&r| r == 0.3));
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut s = single((1.0, 0.0), 2);
        s.cells[0].amplitude = 80.0;
        assert!(generate(&s).is_err());
        let mut s = single((f64::NAN, 0.0), 2);
        s.cells[0].amplitude = 40.0;
        assert!(generate(&s).is_err());
        let mut s = single((1.0, 0.0), 2);
        s.cells[0].x = -30.0;
        assert_eq!(generate(&s).unwrap().warnings.len(), 1);
    }

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("bogus".parse::<Preset>().is_err());
    }
}
