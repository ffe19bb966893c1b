//! Dataset and motion-field structure analyses.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDateTime};
use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{invalid, shape, Result};
use crate::grid::{MotionField, RadarVolume, RainField};
use crate::transform::{ZrRelation, NO_ECHO_DBZ};

/// Fraction of valid cells exceeding each dBZ threshold, per level: `Z × thresholds`.
pub fn rainy_ratio(vol: &RadarVolume, thresholds_dbz: &[f64]) -> Array2<f64> {
    let (t, z, _, _) = vol.dim();
    let data = vol.data();
    let mask = vol.mask();
    let mut out = Array2::zeros((z, thresholds_dbz.len()));
    for k in 0..z {
        let valid = mask.index_axis(Axis(0), k);
        let n_valid = valid.iter().filter(|&&v| v).count() * t;
        if n_valid == 0 {
            continue;
        }
        for (j, &thr) in thresholds_dbz.iter().enumerate() {
            let mut above = 0usize;
            for ti in 0..t {
                let plane = data.index_axis(Axis(0), ti);
                let plane = plane.index_axis(Axis(0), k);
                above += plane.iter().zip(valid.iter()).filter(|(&v, &m)| m && v > thr).count();
            }
            out[[k, j]] = above as f64 / n_valid as f64;
        }
    }
    out
}

/// Pearson correlation of two equally long samples. `None` when either has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Symmetric level-by-level correlation matrix with unit diagonal.
/// Off-diagonal entries with no contributing sample are NaN and have count 0.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrMatrix {
    pub values: Array2<f64>,
    pub counts: Array2<usize>,
}

impl CorrMatrix {
    fn from_samples(z: usize, per_sample: &[Vec<Option<f64>>]) -> CorrMatrix {
        let mut values = Array2::from_elem((z, z), f64::NAN);
        let mut counts = Array2::zeros((z, z));
        let mut idx = 0;
        for i in 0..z {
            values[[i, i]] = 1.0;
            for j in i + 1..z {
                let vals: Vec<f64> = per_sample.iter().filter_map(|s| s[idx]).collect();
                if !vals.is_empty() {
                    let m = vals.iter().sum::<f64>() / vals.len() as f64;
                    values[[i, j]] = m;
                    values[[j, i]] = m;
                }
                counts[[i, j]] = vals.len();
                counts[[j, i]] = vals.len();
                idx += 1;
            }
        }
        for i in 0..z {
            counts[[i, i]] = per_sample.len();
        }
        CorrMatrix { values, counts }
    }
}

fn level_pairs(z: usize) -> Vec<(usize, usize)> {
    (0..z).flat_map(|i| (i + 1..z).map(move |j| (i, j))).collect()
}

/// Mean pixel-wise correlation of reflectivity between level pairs over
/// volumes that carry echo at every level.
pub fn reflectivity_corr_matrix(vols: &[RadarVolume]) -> Result<CorrMatrix> {
    let z = match vols.first() {
        None => return invalid("empty dataset"),
        Some(v) => v.dim().1,
    };
    if vols.iter().any(|v| v.dim().1 != z) {
        return shape("volumes differ in level count");
    }
    let per: Vec<Vec<Option<f64>>> = vols
        .par_iter()
        .filter_map(|vol| {
            let (t, _, _, _) = vol.dim();
            let data = vol.data();
            let mask = vol.mask();
            let level = |k: usize| -> Vec<f64> {
                (0..t).flat_map(|ti| data.index_axis(Axis(0), ti).index_axis(Axis(0), k).to_owned().into_iter()).collect()
            };
            let levels: Vec<Vec<f64>> = (0..z).map(level).collect();
            let valid = |k: usize| -> Vec<bool> {
                let m = mask.index_axis(Axis(0), k);
                (0..t).flat_map(|_| m.iter().copied()).collect()
            };
            let valids: Vec<Vec<bool>> = (0..z).map(valid).collect();
            let has_echo = (0..z).all(|k| levels[k].iter().zip(&valids[k]).any(|(&v, &m)| m && v > NO_ECHO_DBZ));
            if !has_echo {
                return None;
            }
            Some(
                level_pairs(z)
                    .into_iter()
                    .map(|(i, j)| {
                        let (mut a, mut b) = (Vec::new(), Vec::new());
                        for c in 0..levels[i].len() {
                            if valids[i][c] && valids[j][c] {
                                a.push(levels[i][c]);
                                b.push(levels[j][c]);
                            }
                        }
                        pearson(&a, &b)
                    })
                    .collect(),
            )
        })
        .collect();
    Ok(CorrMatrix::from_samples(z, &per))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionCorr {
    /// Correlation of the concatenated `[u; v]` vectors.
    pub combined: CorrMatrix,
    pub u: CorrMatrix,
    pub v: CorrMatrix,
}

/// Cells where the summed rain rate of input levels `i` and `j` over all
/// frames exceeds `threshold_mmh`.
fn pair_mask(rain: &[Array2<f64>], i: usize, j: usize, threshold_mmh: f64) -> Array2<bool> {
    (&rain[i] + &rain[j]).mapv(|s| s > threshold_mmh)
}

/// Per-level rain rate summed over the frames of `vol`.
fn summed_rain(vol: &RadarVolume, zr: ZrRelation) -> Vec<Array2<f64>> {
    let (t, z, ny, nx) = vol.dim();
    let mask = vol.mask();
    (0..z)
        .map(|k| {
            let mut acc = Array2::zeros((ny, nx));
            let m = mask.index_axis(Axis(0), k);
            for ti in 0..t {
                let plane = vol.frame(ti);
                let plane = plane.index_axis(Axis(0), k);
                ndarray::Zip::from(&mut acc).and(plane).and(m).for_each(|a, &v, &ok| {
                    if ok {
                        *a += zr.rain_rate(v);
                    }
                });
            }
            acc
        })
        .collect()
}

fn masked(a: ArrayView2<f64>, m: &Array2<bool>) -> Vec<f64> {
    a.iter().zip(m.iter()).filter(|(_, &ok)| ok).map(|(&v, _)| v).collect()
}

/// Pairwise correlation of per-level motion fields, restricted to cells
/// where the corresponding input levels carry precipitation, averaged over samples.
pub fn motion_corr_matrix(mfs: &[MotionField], inputs: &[RadarVolume], threshold_mmh: f64) -> Result<MotionCorr> {
    if mfs.is_empty() {
        return invalid("empty dataset");
    }
    if mfs.len() != inputs.len() {
        return shape("one input volume per motion field is required");
    }
    let z = mfs[0].dim().0;
    for (mf, vol) in mfs.iter().zip(inputs) {
        let (_, vz, vy, vx) = vol.dim();
        if mf.dim() != (z, vy, vx) || vz != z {
            return shape("motion field and input volume disagree in shape");
        }
    }
    let zr = ZrRelation::default();
    let per: Vec<[Vec<Option<f64>>; 3]> = mfs
        .par_iter()
        .zip(inputs.par_iter())
        .map(|(mf, vol)| {
            let rain = summed_rain(vol, zr);
            let mut out: [Vec<Option<f64>>; 3] = [vec![], vec![], vec![]];
            for (i, j) in level_pairs(z) {
                let m = pair_mask(&rain, i, j, threshold_mmh);
                let (li, lj) = (mf.level(i), mf.level(j));
                let ui = masked(li.index_axis(Axis(0), 0), &m);
                let vi = masked(li.index_axis(Axis(0), 1), &m);
                let uj = masked(lj.index_axis(Axis(0), 0), &m);
                let vj = masked(lj.index_axis(Axis(0), 1), &m);
                let ci: Vec<f64> = ui.iter().chain(&vi).copied().collect();
                let cj: Vec<f64> = uj.iter().chain(&vj).copied().collect();
                out[0].push(pearson(&ci, &cj));
                out[1].push(pearson(&ui, &uj));
                out[2].push(pearson(&vi, &vj));
            }
            out
        })
        .collect();
    let pick = |c: usize| -> Vec<Vec<Option<f64>>> { per.iter().map(|s| s[c].clone()).collect() };
    Ok(MotionCorr {
        combined: CorrMatrix::from_samples(z, &pick(0)),
        u: CorrMatrix::from_samples(z, &pick(1)),
        v: CorrMatrix::from_samples(z, &pick(2)),
    })
}

/// Linear-interpolation quantile of sorted data, `p` in [0, 1].
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxStats {
    pub n: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// Most extreme data points within 1.5 IQR of the quartiles.
    pub lower_whisker: f64,
    pub upper_whisker: f64,
    pub outliers: Vec<f64>,
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = v.iter().copied().filter(|&x| x >= lo && x <= hi).collect();
    Some(BoxStats {
        n: v.len(),
        q1,
        median,
        q3,
        lower_whisker: inside.first().copied().unwrap_or(q1),
        upper_whisker: inside.last().copied().unwrap_or(q3),
        outliers: v.into_iter().filter(|&x| x < lo || x > hi).collect(),
    })
}

/// Box statistics per calendar month (1–12), pooling all years.
pub fn monthwise_boxstats(values: &[(NaiveDateTime, f64)]) -> BTreeMap<u32, BoxStats> {
    let mut by_month: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (t, v) in values {
        by_month.entry(t.month()).or_default().push(*v);
    }
    by_month.into_iter().filter_map(|(m, v)| box_stats(&v).map(|b| (m, b))).collect()
}

/// Per-sample scalars used by the histogram and outlier ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStats {
    pub id: String,
    pub time: NaiveDateTime,
    /// Fraction of column-maximum pixels above the coverage threshold.
    pub coverage: f64,
    /// Motion correlation between the configured level pair.
    pub correlation: f64,
}

/// Fraction of valid column-maximum cells strictly above `dbz` over all frames.
pub fn cmax_coverage(vol: &RadarVolume, dbz: f64) -> f64 {
    let c = vol.cmax();
    rainy_ratio(&c, &[dbz])[[0, 0]]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2d {
    /// `coverage bins × correlation bins`.
    pub counts: Array2<u64>,
    pub coverage_edges: Vec<f64>,
    pub corr_edges: Vec<f64>,
}

fn bin(edges: &[f64], v: f64) -> usize {
    let nb = edges.len() - 1;
    // values outside the edges land in the end bins
    edges[1..nb].iter().take_while(|&&e| v >= e).count()
}

/// 2-D counts over (coverage, correlation). Every sample is counted exactly once.
pub fn coverage_vs_corr_histogram(samples: &[SampleStats], coverage_edges: &[f64], corr_edges: &[f64]) -> Result<Histogram2d> {
    for edges in [coverage_edges, corr_edges] {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
            return invalid("bin edges must be at least two strictly increasing values");
        }
    }
    let mut counts = Array2::zeros((coverage_edges.len() - 1, corr_edges.len() - 1));
    for s in samples {
        counts[[bin(coverage_edges, s.coverage), bin(corr_edges, s.correlation)]] += 1;
    }
    Ok(Histogram2d { counts, coverage_edges: coverage_edges.to_vec(), corr_edges: corr_edges.to_vec() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outliers {
    pub ids: Vec<String>,
    pub rank_sums: Vec<usize>,
    /// Fewer than `k` samples survived deduplication.
    pub truncated: bool,
}

/// Ordinal ranks (1 = first) by the key ordering, ties going to the earlier timestamp.
fn ordinal_ranks(samples: &[SampleStats], cmp: impl Fn(&SampleStats, &SampleStats) -> std::cmp::Ordering) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.sort_by(|&a, &b| cmp(&samples[a], &samples[b]).then(samples[a].time.cmp(&samples[b].time)));
    let mut ranks = vec![0; samples.len()];
    for (r, &i) in idx.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

/// Samples with high coverage and low correlation: ranks coverage
/// descending and correlation ascending, sums them, and returns the `k`
/// lowest sums. A sample within `min_gap_minutes` of an already selected
/// one is skipped.
pub fn rank_outliers(samples: &[SampleStats], k: usize, min_gap_minutes: i64) -> Outliers {
    let by_cov = ordinal_ranks(samples, |a, b| b.coverage.total_cmp(&a.coverage));
    let by_corr = ordinal_ranks(samples, |a, b| a.correlation.total_cmp(&b.correlation));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        (by_cov[a] + by_corr[a]).cmp(&(by_cov[b] + by_corr[b])).then(samples[a].time.cmp(&samples[b].time))
    });
    let mut chosen: Vec<usize> = Vec::new();
    for i in order {
        if chosen.len() == k {
            break;
        }
        let close = chosen
            .iter()
            .any(|&c| (samples[c].time - samples[i].time).num_minutes().abs() < min_gap_minutes);
        if !close {
            chosen.push(i);
        }
    }
    Outliers {
        truncated: chosen.len() < k,
        rank_sums: chosen.iter().map(|&i| by_cov[i] + by_corr[i]).collect(),
        ids: chosen.into_iter().map(|i| samples[i].id.clone()).collect(),
    }
}

/// 4-connected component labels (0 = background, components numbered from 1 in scan order).
pub fn label_components(mask: ArrayView2<bool>) -> (Array2<usize>, usize) {
    let (ny, nx) = mask.dim();
    let mut labels = Array2::zeros((ny, nx));
    let mut next = 0;
    let mut stack = Vec::new();
    for y in 0..ny {
        for x in 0..nx {
            if !mask[[y, x]] || labels[[y, x]] != 0 {
                continue;
            }
            next += 1;
            labels[[y, x]] = next;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                let nbrs = [(cy.wrapping_sub(1), cx), (cy + 1, cx), (cy, cx.wrapping_sub(1)), (cy, cx + 1)];
                for (yy, xx) in nbrs {
                    if yy < ny && xx < nx && mask[[yy, xx]] && labels[[yy, xx]] == 0 {
                        labels[[yy, xx]] = next;
                        stack.push((yy, xx));
                    }
                }
            }
        }
    }
    (labels, next)
}

pub fn count_components(mask: ArrayView2<bool>) -> usize {
    label_components(mask).1
}

/// Valid cells at or above `threshold`.
pub fn rainy_pixels(field: &RainField, threshold: f64) -> usize {
    field.data().iter().zip(field.mask().iter()).filter(|(&v, &m)| m && v >= threshold).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDiagnostic {
    /// Components of the thresholded column maximum, per lead.
    pub cmax_counts: Vec<usize>,
    /// `lead × level` component counts.
    pub level_counts: Vec<Vec<usize>>,
    /// The column-maximum count rose above its first-lead value while every
    /// level kept its first-lead count.
    pub split_detected: bool,
}

fn thresholded(plane: ArrayView2<f64>, mask: ArrayView2<bool>, threshold: f64) -> Array2<bool> {
    ndarray::Zip::from(plane).and(mask).map_collect(|&v, &m| m && v >= threshold)
}

/// Component counts of the per-level and column-maximum fields of a volumetric nowcast.
pub fn cell_split_diagnostic(nowcast: &[RainField], threshold: f64) -> Result<SplitDiagnostic> {
    if nowcast.is_empty() {
        return invalid("empty nowcast");
    }
    let dim = nowcast[0].dim();
    if nowcast.iter().any(|f| f.dim() != dim) {
        return shape("nowcast leads differ in shape");
    }
    let mut cmax_counts = Vec::with_capacity(nowcast.len());
    let mut level_counts = Vec::with_capacity(nowcast.len());
    for f in nowcast {
        let c = f.cmax();
        cmax_counts.push(count_components(thresholded(c.level(0), c.level_mask(0), threshold).view()));
        level_counts.push(
            (0..dim.0)
                .map(|k| count_components(thresholded(f.level(k), f.level_mask(k), threshold).view()))
                .collect::<Vec<_>>(),
        );
    }
    let levels_stable = level_counts.iter().all(|l| l == &level_counts[0]);
    let split_detected = levels_stable && cmax_counts.iter().any(|&c| c > cmax_counts[0]);
    Ok(SplitDiagnostic { cmax_counts, level_counts, split_detected })
}
