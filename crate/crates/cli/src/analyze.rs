//! `voxflow analyze`: dataset-level reports over every `.rvol` file in a directory.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use chrono::{NaiveDate, NaiveDateTime, TimeDelta};
use clap::{Args, ValueEnum};
use rayon::prelude::*;

use voxflow_core::analysis::{
    box_stats, cell_split_diagnostic, cmax_coverage, coverage_vs_corr_histogram, monthwise_boxstats,
    motion_corr_matrix, rainy_ratio, rank_outliers, reflectivity_corr_matrix, CorrMatrix, SampleStats,
};
use voxflow_core::flow::estimate_variational;
use voxflow_core::io::load_rmf;
use voxflow_core::transform::{volume_frame_to_rain, ZrRelation};
use voxflow_core::{MotionField, RadarVolume};

use crate::{load, num, parse_list, svg, truth_path, Failure, OptArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    /// Rainy-pixel ratio per level and dBZ threshold.
    Ratios,
    /// Level-pair reflectivity correlation.
    ReflCorr,
    /// Level-pair motion correlation.
    MotionCorr,
    /// Coverage versus motion correlation, plus monthly box statistics.
    Histogram,
    /// Samples with high coverage and low motion correlation.
    Outliers,
    /// Component counts of forecast volumes, per level and column maximum.
    Split,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Directory holding `.rvol` volumes.
    dir: PathBuf,
    #[arg(long, value_enum)]
    which: Which,
    /// Report directory; defaults to the input directory.
    #[arg(short, long)]
    out_dir: Option<PathBuf>,
    /// Rain-rate threshold in mm/h (default 1 for motion masks, 5 for split components).
    #[arg(long)]
    threshold: Option<f64>,
    /// Comma-separated reflectivity thresholds for `ratios`.
    #[arg(long, default_value = "0,10,20,30,40")]
    dbz_thresholds: String,
    /// Column-maximum reflectivity above which a pixel counts as covered.
    #[arg(long, default_value_t = 10.0)]
    coverage_dbz: f64,
    /// Level pair `i,j` for per-sample motion correlation; defaults to lowest and highest.
    #[arg(long)]
    pair: Option<String>,
    #[arg(long, default_value_t = 5)]
    top: usize,
    /// Minimum time between two reported outliers.
    #[arg(long, default_value_t = 60)]
    gap_minutes: i64,
    /// Use `<stem>.truth.rmf` instead of `<stem>.rmf` or a fresh estimate.
    #[arg(long)]
    truth_motion: bool,
    #[command(flatten)]
    opt: OptArgs,
}

struct Sample {
    id: String,
    path: PathBuf,
    vol: RadarVolume,
}

fn volumes(dir: &Path) -> anyhow::Result<Vec<Sample>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "rvol"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(anyhow!("no volumes found in {}", dir.display()));
    }
    paths
        .into_par_iter()
        .map(|path| {
            let vol = load(&path)?;
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(Sample { id, path, vol })
        })
        .collect()
}

/// Timestamp from the first 12-digit run (`YYYYmmddHHMM`) in the sample id,
/// else consecutive samples spaced by their own duration from 2000-01-01.
fn timestamp(id: &str, index: usize, vol: &RadarVolume) -> NaiveDateTime {
    let digits: Vec<&str> = id.split(|c: char| !c.is_ascii_digit()).filter(|s| s.len() >= 12).collect();
    if let Some(t) = digits.first().and_then(|d| NaiveDateTime::parse_from_str(&d[..12], "%Y%m%d%H%M").ok()) {
        return t;
    }
    let base = NaiveDate::from_ymd_opt(2000, 1, 1).and_then(|d| d.and_hms_opt(0, 0, 0)).expect("valid date");
    base + TimeDelta::seconds((index * vol.dim().0) as i64 * vol.dt() as i64)
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_svg(path: &Path, doc: String) -> anyhow::Result<()> {
    std::fs::write(path, doc).with_context(|| format!("writing {}", path.display()))
}

fn motion_for(s: &Sample, a: &AnalyzeArgs) -> Result<MotionField, Failure> {
    if a.truth_motion {
        let p = truth_path(&s.path);
        return Ok(load_rmf(&p).with_context(|| format!("reading {}", p.display()))?);
    }
    let p = s.path.with_extension("rmf");
    if p.is_file() {
        return Ok(load_rmf(&p).with_context(|| format!("reading {}", p.display()))?);
    }
    let (loss, opt) = a.opt.configs()?;
    let phi = a.opt.input_frames(&s.vol)?;
    Ok(estimate_variational(&phi, None, &loss, &opt)?.field)
}

fn motions(samples: &[Sample], a: &AnalyzeArgs) -> Result<Vec<MotionField>, Failure> {
    samples.iter().map(|s| motion_for(s, a)).collect()
}

fn matrix_rows(m: &CorrMatrix) -> Vec<Vec<f64>> {
    m.values.outer_iter().map(|r| r.to_vec()).collect()
}

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

fn ratios(samples: &[Sample], a: &AnalyzeArgs, out: &Path) -> Result<(), Failure> {
    let thresholds = parse_list::<f64>(&a.dbz_thresholds, "dbz-thresholds")?;
    let per: Vec<_> = samples.par_iter().map(|s| rainy_ratio(&s.vol, &thresholds)).collect();
    let mut rows = Vec::new();
    for (s, r) in samples.iter().zip(&per) {
        for (k, alt) in s.vol.z_levels().iter().enumerate() {
            for (j, t) in thresholds.iter().enumerate() {
                rows.push(vec![s.id.clone(), k.to_string(), num(*alt), num(*t), num(r[[k, j]])]);
            }
        }
    }
    write_csv(&out.join("ratios.csv"), &["sample_id", "level", "altitude_m", "threshold_dbz", "ratio"], rows)?;
    let alts = samples[0].vol.z_levels().to_vec();
    if samples.iter().all(|s| s.vol.z_levels() == alts.as_slice()) {
        let series = thresholds
            .iter()
            .enumerate()
            .map(|(j, t)| {
                let pts = alts
                    .iter()
                    .enumerate()
                    .map(|(k, &alt)| (alt, per.iter().map(|r| r[[k, j]]).sum::<f64>() / per.len() as f64))
                    .collect();
                (format!("> {t} dBZ"), pts)
            })
            .collect::<Vec<_>>();
        write_svg(&out.join("ratios.svg"), svg::line_plot("Rainy-pixel ratio", "altitude (m)", "ratio", &series))?;
    }
    println!("ratios: {} samples x {} thresholds", samples.len(), thresholds.len());
    Ok(())
}

fn corr_rows(m: &CorrMatrix, extra: &[&CorrMatrix]) -> Vec<Vec<String>> {
    let z = m.values.nrows();
    let mut rows = Vec::new();
    for i in 0..z {
        for j in 0..z {
            let mut r = vec![i.to_string(), j.to_string(), num(m.values[[i, j]])];
            r.extend(extra.iter().map(|e| num(e.values[[i, j]])));
            r.push(m.counts[[i, j]].to_string());
            rows.push(r);
        }
    }
    rows
}

fn min_off_diagonal(m: &CorrMatrix) -> f64 {
    let z = m.values.nrows();
    (0..z).flat_map(|i| (0..z).filter(move |&j| j != i).map(move |j| (i, j))).map(|ij| m.values[ij]).fold(f64::NAN, f64::min)
}

fn refl_corr(samples: &[Sample], out: &Path) -> Result<(), Failure> {
    let vols: Vec<RadarVolume> = samples.iter().map(|s| s.vol.clone()).collect();
    let m = reflectivity_corr_matrix(&vols)?;
    write_csv(&out.join("refl_corr.csv"), &["level_i", "level_j", "correlation", "samples"], corr_rows(&m, &[]))?;
    let z = m.values.nrows();
    write_svg(
        &out.join("refl_corr.svg"),
        svg::heatmap("Reflectivity correlation", &labels(z), &labels(z), &matrix_rows(&m), 0.0, 1.0),
    )?;
    println!("refl-corr: {z} levels, min off-diagonal {}", num(min_off_diagonal(&m)));
    Ok(())
}

fn motion_corr(samples: &[Sample], a: &AnalyzeArgs, out: &Path) -> Result<(), Failure> {
    let mfs = motions(samples, a)?;
    let vols: Vec<RadarVolume> = samples.iter().map(|s| s.vol.clone()).collect();
    let m = motion_corr_matrix(&mfs, &vols, a.threshold.unwrap_or(1.0))?;
    write_csv(
        &out.join("motion_corr.csv"),
        &["level_i", "level_j", "combined", "u", "v", "samples"],
        corr_rows(&m.combined, &[&m.u, &m.v]),
    )?;
    let z = m.combined.values.nrows();
    write_svg(
        &out.join("motion_corr.svg"),
        svg::heatmap("Motion correlation", &labels(z), &labels(z), &matrix_rows(&m.combined), 0.0, 1.0),
    )?;
    println!("motion-corr: {z} levels, min off-diagonal {}", num(min_off_diagonal(&m.combined)));
    Ok(())
}

fn sample_stats(samples: &[Sample], a: &AnalyzeArgs) -> Result<Vec<SampleStats>, Failure> {
    let mfs = motions(samples, a)?;
    let threshold = a.threshold.unwrap_or(1.0);
    let mut out = Vec::new();
    for (idx, (s, mf)) in samples.iter().zip(&mfs).enumerate() {
        let z = mf.dim().0;
        let (i, j) = match &a.pair {
            Some(p) => match parse_list::<usize>(p, "pair")?.as_slice() {
                &[i, j] if i < z && j < z && i != j => (i, j),
                _ => return Err(Failure::Usage(format!("--pair {p:?} must name two distinct levels below {z}"))),
            },
            None if z >= 2 => (0, z - 1),
            None => return Err(anyhow!("{}: single-level volume has no level pair", s.id).into()),
        };
        let m = motion_corr_matrix(std::slice::from_ref(mf), std::slice::from_ref(&s.vol), threshold)?;
        let correlation = m.combined.values[[i, j]];
        if correlation.is_nan() {
            eprintln!("warning: {}: no precipitation under levels {i},{j}; skipped", s.id);
            continue;
        }
        out.push(SampleStats {
            id: s.id.clone(),
            time: timestamp(&s.id, idx, &s.vol),
            coverage: cmax_coverage(&s.vol, a.coverage_dbz),
            correlation,
        });
    }
    if out.is_empty() {
        return Err(anyhow!("no sample has a defined motion correlation").into());
    }
    Ok(out)
}

fn histogram(samples: &[Sample], a: &AnalyzeArgs, out: &Path) -> Result<(), Failure> {
    let stats = sample_stats(samples, a)?;
    let cov_edges: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let corr_edges: Vec<f64> = (0..=10).map(|i| -1.0 + i as f64 / 5.0).collect();
    let h = coverage_vs_corr_histogram(&stats, &cov_edges, &corr_edges)?;
    write_csv(
        &out.join("samples.csv"),
        &["sample_id", "time", "coverage", "correlation"],
        stats.iter().map(|s| vec![s.id.clone(), s.time.format("%Y-%m-%dT%H:%M").to_string(), num(s.coverage), num(s.correlation)]),
    )?;
    let mut rows = Vec::new();
    for (ci, w) in cov_edges.windows(2).enumerate() {
        for (ri, v) in corr_edges.windows(2).enumerate() {
            rows.push(vec![num(w[0]), num(w[1]), num(v[0]), num(v[1]), h.counts[[ci, ri]].to_string()]);
        }
    }
    write_csv(&out.join("histogram.csv"), &["coverage_lo", "coverage_hi", "corr_lo", "corr_hi", "count"], rows)?;
    let grid: Vec<Vec<f64>> = h.counts.outer_iter().map(|r| r.iter().map(|&c| c as f64).collect()).collect();
    let vmax = grid.iter().flatten().cloned().fold(1.0, f64::max);
    let row_l: Vec<String> = cov_edges.windows(2).map(|w| format!("{:.1}", w[0])).collect();
    let col_l: Vec<String> = corr_edges.windows(2).map(|w| format!("{:.1}", w[0])).collect();
    write_svg(
        &out.join("histogram.svg"),
        svg::heatmap("Samples by coverage (rows) and motion correlation (columns)", &row_l, &col_l, &grid, 0.0, vmax),
    )?;
    let monthly = monthwise_boxstats(&stats.iter().map(|s| (s.time, s.correlation)).collect::<Vec<_>>());
    let rows = monthly.iter().map(|(m, b)| {
        let outliers: Vec<String> = b.outliers.iter().map(|&v| num(v)).collect();
        vec![
            m.to_string(),
            b.n.to_string(),
            num(b.q1),
            num(b.median),
            num(b.q3),
            num(b.lower_whisker),
            num(b.upper_whisker),
            outliers.join(";"),
        ]
    });
    write_csv(
        &out.join("monthly.csv"),
        &["month", "n", "q1", "median", "q3", "lower_whisker", "upper_whisker", "outliers"],
        rows,
    )?;
    let boxes: Vec<(String, _)> = monthly.into_iter().map(|(m, b)| (m.to_string(), b)).collect();
    write_svg(&out.join("monthly.svg"), svg::box_plot("Motion correlation by month", "correlation", &boxes))?;
    if let Some(b) = box_stats(&stats.iter().map(|s| s.correlation).collect::<Vec<_>>()) {
        println!("histogram: {} samples, median correlation {}", b.n, num(b.median));
    }
    Ok(())
}

fn outliers(samples: &[Sample], a: &AnalyzeArgs, out: &Path) -> Result<(), Failure> {
    if a.top == 0 {
        return Err(Failure::Usage("--top must be >= 1".into()));
    }
    let stats = sample_stats(samples, a)?;
    let o = rank_outliers(&stats, a.top, a.gap_minutes);
    let by_id = |id: &str| stats.iter().find(|s| s.id == id).expect("selected from stats");
    let rows = o.ids.iter().zip(&o.rank_sums).enumerate().map(|(r, (id, sum))| {
        let s = by_id(id);
        vec![
            (r + 1).to_string(),
            id.clone(),
            s.time.format("%Y-%m-%dT%H:%M").to_string(),
            sum.to_string(),
            num(s.coverage),
            num(s.correlation),
        ]
    });
    write_csv(&out.join("outliers.csv"), &["rank", "sample_id", "time", "rank_sum", "coverage", "correlation"], rows)?;
    let series = vec![
        ("coverage".to_string(), o.ids.iter().enumerate().map(|(r, id)| ((r + 1) as f64, by_id(id).coverage)).collect()),
        ("correlation".to_string(), o.ids.iter().enumerate().map(|(r, id)| ((r + 1) as f64, by_id(id).correlation)).collect()),
    ];
    write_svg(&out.join("outliers.svg"), svg::line_plot("Selected outliers", "rank", "value", &series))?;
    if o.truncated {
        eprintln!("warning: only {} samples survived the {}-minute gap", o.ids.len(), a.gap_minutes);
    }
    println!("outliers: {}", o.ids.join(", "));
    Ok(())
}

fn split(samples: &[Sample], a: &AnalyzeArgs, out: &Path) -> Result<(), Failure> {
    let threshold = a.threshold.unwrap_or(5.0);
    let diags = samples
        .par_iter()
        .map(|s| {
            let leads = (0..s.vol.dim().0)
                .map(|l| volume_frame_to_rain(&s.vol, l, ZrRelation::default()))
                .collect::<voxflow_core::Result<Vec<_>>>()?;
            cell_split_diagnostic(&leads, threshold)
        })
        .collect::<voxflow_core::Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for (s, d) in samples.iter().zip(&diags) {
        for (l, (&c, levels)) in d.cmax_counts.iter().zip(&d.level_counts).enumerate() {
            let lead = (l + 1).to_string();
            rows.push(vec![s.id.clone(), lead.clone(), "cmax".into(), c.to_string()]);
            for (k, n) in levels.iter().enumerate() {
                rows.push(vec![s.id.clone(), lead.clone(), format!("level_{k}"), n.to_string()]);
            }
        }
        series.push((s.id.clone(), d.cmax_counts.iter().enumerate().map(|(l, &c)| ((l + 1) as f64, c as f64)).collect()));
        let first = d.cmax_counts.iter().position(|&c| c > d.cmax_counts[0]);
        match (d.split_detected, first) {
            (true, Some(l)) => println!("{}: column maximum splits at lead {} while levels stay intact", s.id, l + 1),
            _ => println!("{}: no split", s.id),
        }
    }
    write_csv(&out.join("split.csv"), &["sample_id", "lead_steps", "field", "components"], rows)?;
    write_svg(&out.join("split.svg"), svg::line_plot("Column-maximum components", "lead (steps)", "components", &series))?;
    Ok(())
}

pub fn run(a: &AnalyzeArgs) -> Result<(), Failure> {
    let samples = volumes(&a.dir)?;
    let out = a.out_dir.clone().unwrap_or_else(|| a.dir.clone());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    match a.which {
        Which::Ratios => ratios(&samples, a, &out),
        Which::ReflCorr => refl_corr(&samples, &out),
        Which::MotionCorr => motion_corr(&samples, a, &out),
        Which::Histogram => histogram(&samples, a, &out),
        Which::Outliers => outliers(&samples, a, &out),
        Which::Split => split(&samples, a, &out),
    }
}
