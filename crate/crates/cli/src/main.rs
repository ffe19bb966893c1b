//! `voxflow`: synthetic radar volumes, motion estimation, nowcasting,
//! verification and dataset analyses from the command line.

mod analyze;
mod config;
mod svg;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use voxflow_core::advect::extrapolate_volume;
use voxflow_core::denoise::{denoise, CleanConfig};
use voxflow_core::flow::{
    estimate_lucas_kanade, estimate_variational, Criterion, Estimate, Init, LossConfig, OptimizerConfig,
};
use voxflow_core::io::{load_rmf, load_rvol, save_rmf, save_rvol, Dtype};
use voxflow_core::synth::{generate, preset, Motion, Preset};
use voxflow_core::transform::{volume_frame_to_rain, volume_to_dbr, ZrRelation};
use voxflow_core::verify::{verify_nowcast, NowcastSample, VerifyOptions};
use voxflow_core::{MotionField, RadarVolume, RainField};

#[derive(Debug, Parser)]
#[command(name = "voxflow", version, about = "Altitude-resolved radar motion estimation and nowcasting")]
pub struct Cli {
    /// Flat `key = value` file of flag defaults; command-line flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a synthetic volume and its ground-truth motion.
    #[command(args_override_self = true)]
    Synth(SynthArgs),
    /// Estimate motion from the input frames of a volume.
    #[command(args_override_self = true)]
    Estimate(EstimateArgs),
    /// Extrapolate the last input frame along a motion field.
    #[command(args_override_self = true)]
    Nowcast(NowcastArgs),
    /// Score a forecast volume against observations.
    #[command(args_override_self = true)]
    Verify(VerifyArgs),
    /// Dataset analyses over every volume in a directory.
    #[command(args_override_self = true)]
    Analyze(analyze::AnalyzeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    U8,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Dtype {
        match d {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::U8 => Dtype::U8,
        }
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// uniform, rotation, shear2, shear8, noisy, split or crop.
    #[arg(long, value_parser = parse_preset)]
    preset: Preset,
    /// Output volume; the truth goes to `<stem>.truth.rmf` next to it.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Override the preset's frame count.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
    dtype: DtypeArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Column maximum first, one field.
    #[value(name = "2d-cmax")]
    Cmax2d,
    /// One field per altitude level.
    #[value(name = "3d")]
    Volumetric,
    /// Lucas-Kanade baseline on the last two input frames, per level.
    Lk,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CriterionArg {
    Mae,
    Mse,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InitArg {
    Zero,
    Pyramid,
}

/// Loss and optimizer flags shared by `estimate` and `analyze`.
#[derive(Debug, Args)]
pub struct OptArgs {
    /// Leading frames of the volume used as inputs.
    #[arg(long, default_value_t = 8)]
    inputs: usize,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    /// Comma-separated pooling factors.
    #[arg(long, default_value = "1,2,4,8")]
    scales: String,
    #[arg(long, value_enum, default_value_t = CriterionArg::Mae)]
    criterion: CriterionArg,
    #[arg(long, default_value_t = 150)]
    iters: usize,
    #[arg(long, default_value_t = 0.25)]
    step: f64,
    #[arg(long, default_value_t = 0.8)]
    momentum: f64,
    /// Gradient box-blur radius in cells.
    #[arg(long, default_value_t = 16)]
    smoothing: usize,
    /// Coarse-to-fine pyramid levels.
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, value_enum, default_value_t = InitArg::Pyramid)]
    init: InitArg,
    /// Check analytic gradients against finite differences first.
    #[arg(long)]
    grad_check: bool,
    /// Remove low-ρ_HV clutter and speckle before estimating.
    #[arg(long)]
    denoise: bool,
    #[arg(long, default_value_t = 0.6)]
    rho_min: f64,
}

impl OptArgs {
    fn configs(&self) -> Result<(LossConfig, OptimizerConfig), Failure> {
        let loss = LossConfig {
            beta: self.beta,
            scales: parse_list::<usize>(&self.scales, "scales")?,
            criterion: match self.criterion {
                CriterionArg::Mae => Criterion::MaeDbr,
                CriterionArg::Mse => Criterion::MseDbr,
            },
            n_inputs: self.inputs,
            ..LossConfig::default()
        };
        let opt = OptimizerConfig {
            max_iters: self.iters,
            step_size: self.step,
            momentum: self.momentum,
            smoothing: self.smoothing,
            coarse_to_fine_levels: self.levels,
            init: match self.init {
                InitArg::Zero => Init::Zero,
                InitArg::Pyramid => Init::Pyramid,
            },
            grad_check: self.grad_check,
        };
        loss.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        opt.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        if self.inputs < 2 {
            return Err(Failure::Usage("--inputs must be >= 2".into()));
        }
        Ok((loss, opt))
    }

    /// dBR input frames of `vol`, optionally denoised.
    fn input_frames(&self, vol: &RadarVolume) -> anyhow::Result<Vec<RainField>> {
        let t = vol.dim().0;
        if self.inputs > t {
            return Err(anyhow!("volume has {t} frames, --inputs asks for {}", self.inputs));
        }
        let mut inp = vol.slice_time(0, self.inputs)?;
        if self.denoise {
            inp = denoise(&inp, self.rho_min, &CleanConfig::default())?;
        }
        Ok(volume_to_dbr(&inp, ZrRelation::default())?)
    }
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[arg(short, long)]
    input: PathBuf,
    /// Output motion file.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Volumetric)]
    mode: Mode,
    /// Loss trace CSV; defaults to `<output stem>.trace.csv`.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Lucas-Kanade window (odd).
    #[arg(long, default_value_t = 9)]
    window: usize,
    #[command(flatten)]
    opt: OptArgs,
}

#[derive(Debug, Args)]
struct NowcastArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    motion: PathBuf,
    #[arg(long, default_value_t = 16)]
    leads: usize,
    /// Leading frames treated as inputs; the last of them is extrapolated.
    #[arg(long, default_value_t = 8)]
    inputs: usize,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
    dtype: DtypeArg,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(short, long)]
    forecast: PathBuf,
    /// Observed volume; frame `--start` matches lead 1.
    #[arg(short, long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 0)]
    start: usize,
    /// Comma-separated rain-rate thresholds in mm/h.
    #[arg(long, default_value = "1,5,10")]
    threshold: String,
    /// Continuous metrics in dBR instead of mm/h.
    #[arg(long)]
    dbr: bool,
    /// Sample identifier written to every row; defaults to the forecast file stem.
    #[arg(long)]
    id: Option<String>,
    /// Metrics CSV; stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug)]
pub enum Failure {
    Clap(clap::Error),
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<voxflow_core::Error> for Failure {
    fn from(e: voxflow_core::Error) -> Self {
        Failure::Data(e.into())
    }
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: voxflow_core::Error| e.to_string())
}

pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .map(|v| v.trim().parse::<T>().map_err(|_| Failure::Usage(format!("--{what}: cannot parse {v:?}"))))
        .collect()
}

/// Deterministic text for CSV values; undefined values are `NaN`.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn truth_path(out: &Path) -> PathBuf {
    out.with_extension("truth.rmf")
}

fn load(path: &Path) -> anyhow::Result<RadarVolume> {
    load_rvol(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_synth(a: &SynthArgs) -> Result<(), Failure> {
    let mut s = preset(a.preset, a.seed);
    if let Some(f) = a.frames {
        s.frames = f;
    }
    s.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let syn = generate(&s)?;
    save_rvol(&a.output, &syn.volume, a.dtype.into()).with_context(|| format!("writing {}", a.output.display()))?;
    let truth = truth_path(&a.output);
    save_rmf(&truth, &syn.truth).with_context(|| format!("writing {}", truth.display()))?;
    for w in &syn.warnings {
        eprintln!("warning: {w}");
    }
    let (t, z, y, x) = syn.volume.dim();
    let motion = match &s.motion {
        Motion::Uniform { u } => format!("uniform u = ({}, {})", u.0, u.1),
        Motion::Shear { per_level } => {
            let v: Vec<String> = per_level.iter().map(|u| format!("({}, {})", u.0, u.1)).collect();
            format!("per-level {}", v.join(" "))
        }
        Motion::Rotation { center, omega } => {
            format!("rotation about ({}, {}) at {:.2} deg/step", center.0, center.1, omega.to_degrees())
        }
        Motion::CellShear { a, .. } => format!("per-cell velocities veering with altitude, {} cells", a.len()),
    };
    println!("{}: {t}x{z}x{y}x{x} (TxZxYxX), dt {} s, {} cells, {motion}", a.output.display(), s.dt, s.cells.len());
    if !syn.speckles.is_empty() {
        println!("{} speckles, {} clutter blobs", syn.speckles.len(), s.noise.clutter.len());
    }
    println!("truth: {}", truth.display());
    Ok(())
}

fn write_trace(path: &Path, est: Option<&Estimate>) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["level", "pyramid_level", "iter", "loss_total", "loss_multiscale", "loss_pi"])?;
    for r in est.map(|e| e.trace.as_slice()).unwrap_or_default() {
        w.write_record([
            r.level.to_string(),
            r.pyramid_level.to_string(),
            r.iter.to_string(),
            num(r.loss.total),
            num(r.loss.multiscale),
            num(r.loss.pi),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Motion for `vol` in the requested mode.
fn estimate(vol: &RadarVolume, mode: Mode, window: usize, opt: &OptArgs) -> Result<(MotionField, Option<Estimate>), Failure> {
    let (loss, ocfg) = opt.configs()?;
    if mode == Mode::Lk && (window < 3 || window % 2 == 0) {
        return Err(Failure::Usage("--window must be odd and >= 3".into()));
    }
    let phi = opt.input_frames(vol)?;
    match mode {
        Mode::Volumetric => {
            let e = estimate_variational(&phi, None, &loss, &ocfg)?;
            Ok((e.field.clone(), Some(e)))
        }
        Mode::Cmax2d => {
            let cmax: Vec<RainField> = phi.iter().map(RainField::cmax).collect();
            let e = estimate_variational(&cmax, None, &loss, &ocfg)?;
            Ok((e.field.clone(), Some(e)))
        }
        Mode::Lk => {
            let (a, b) = (&phi[phi.len() - 2], &phi[phi.len() - 1]);
            let levels = (0..a.dim().0)
                .map(|k| {
                    let r = estimate_lucas_kanade(a.level(k), b.level(k), window)?;
                    if r.all_rejected {
                        eprintln!("warning: level {k}: no textured window, zero field");
                    }
                    Ok(r.field.level(0).to_owned())
                })
                .collect::<voxflow_core::Result<Vec<_>>>()?;
            Ok((MotionField::from_levels(&levels)?, None))
        }
    }
}

fn cmd_estimate(a: &EstimateArgs) -> Result<(), Failure> {
    a.opt.configs()?;
    let vol = load(&a.input)?;
    let (field, est) = estimate(&vol, a.mode, a.window, &a.opt)?;
    save_rmf(&a.output, &field).with_context(|| format!("writing {}", a.output.display()))?;
    let trace = a.trace.clone().unwrap_or_else(|| a.output.with_extension("trace.csv"));
    write_trace(&trace, est.as_ref())?;
    let (z, y, x) = field.dim();
    println!("{}: {z}x{y}x{x} motion field", a.output.display());
    if let Some(e) = &est {
        for (k, st) in e.status.iter().enumerate() {
            let last = e.trace.iter().filter(|r| r.level == k).last();
            match last {
                Some(r) => println!(
                    "level {k}: {st:?}, loss_total {:.6} (multiscale {:.6}, pi {:.6})",
                    r.loss.total, r.loss.multiscale, r.loss.pi
                ),
                None => println!("level {k}: {st:?}"),
            }
        }
        if let Some(g) = &e.grad_check {
            println!("gradient check max relative error per level: {g:?}");
        }
    }
    println!("trace: {}", trace.display());
    Ok(())
}

fn cmd_nowcast(a: &NowcastArgs) -> Result<(), Failure> {
    if a.leads == 0 {
        return Err(Failure::Usage("--leads must be >= 1".into()));
    }
    if a.inputs == 0 {
        return Err(Failure::Usage("--inputs must be >= 1".into()));
    }
    let vol = load(&a.input)?;
    let mf = load_rmf(&a.motion).with_context(|| format!("reading {}", a.motion.display()))?;
    let origin = a.inputs.min(vol.dim().0) - 1;
    let fc = extrapolate_volume(&vol, &mf, origin, a.leads)?;
    save_rvol(&a.output, &fc, a.dtype.into()).with_context(|| format!("writing {}", a.output.display()))?;
    let (t, z, y, x) = fc.dim();
    println!("{}: {t}x{z}x{y}x{x} forecast from frame {origin}", a.output.display());
    Ok(())
}

fn cmd_verify(a: &VerifyArgs) -> Result<(), Failure> {
    let thresholds = parse_list::<f64>(&a.threshold, "threshold")?;
    let fc = load(&a.forecast)?;
    let obs = load(&a.truth)?;
    let ((lt, _, fy, fx), (ot, _, oy, ox)) = (fc.dim(), obs.dim());
    if (fy, fx) != (oy, ox) {
        return Err(anyhow!("shape mismatch: forecast grid {fy}x{fx}, truth grid {oy}x{ox}").into());
    }
    if a.start + lt > ot {
        return Err(anyhow!("truth has {ot} frames; leads 1..{lt} from frame {} need {}", a.start, a.start + lt).into());
    }
    let zr = ZrRelation::default();
    let sample = NowcastSample {
        id: a.id.clone().unwrap_or_else(|| stem(&a.forecast)),
        forecasts: (0..lt).map(|l| volume_frame_to_rain(&fc, l, zr)).collect::<Result<_, _>>()?,
        observations: (0..lt).map(|l| volume_frame_to_rain(&obs, a.start + l, zr)).collect::<Result<_, _>>()?,
    };
    let opts = VerifyOptions { thresholds, continuous_in_dbr: a.dbr };
    let report = verify_nowcast(std::slice::from_ref(&sample), &opts)?;
    let sink: Box<dyn std::io::Write> = match &a.output {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("writing {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["sample_id", "lead_steps", "metric", "threshold_mmh", "value"]).map_err(anyhow::Error::from)?;
    for s in &report.per_sample {
        for l in &s.leads {
            let lead = l.lead.to_string();
            let c = l.continuous;
            for (name, v) in [
                ("me", c.map_or(f64::NAN, |c| c.me)),
                ("mae", c.map_or(f64::NAN, |c| c.mae)),
                ("mse", c.map_or(f64::NAN, |c| c.mse)),
            ] {
                w.write_record([s.id.as_str(), &lead, name, "", &num(v)]).map_err(anyhow::Error::from)?;
            }
            for (t, sc) in l.tables.iter().zip(&l.scores) {
                let thr = num(t.threshold);
                let k = t.counts;
                let rows = [
                    ("hits", k.hits as f64),
                    ("misses", k.misses as f64),
                    ("false_alarms", k.false_alarms as f64),
                    ("correct_negatives", k.correct_negatives as f64),
                    ("precision", sc.precision.unwrap_or(f64::NAN)),
                    ("recall", sc.recall.unwrap_or(f64::NAN)),
                    ("ets", sc.ets.unwrap_or(f64::NAN)),
                ];
                for (name, v) in rows {
                    w.write_record([s.id.as_str(), &lead, name, &thr, &num(v)]).map_err(anyhow::Error::from)?;
                }
            }
        }
    }
    w.flush().map_err(anyhow::Error::from)?;
    if let Some(p) = &a.output {
        println!("{}: {} leads x {} thresholds", p.display(), lt, opts.thresholds.len());
    }
    Ok(())
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("VOXFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("VOXFLOW_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Data(e.into()))
}

fn run() -> Result<(), Failure> {
    let mut args: Vec<OsString> = std::env::args_os().collect();
    if let Some(path) = config_path(&args) {
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(|e| Failure::Usage(format!("{e:#}")))?;
        let entries = config::parse(&text).map_err(Failure::Usage)?;
        args = config::merge(args, &entries).map_err(Failure::Usage)?;
    }
    let cli = Cli::try_parse_from(args).map_err(Failure::Clap)?;
    init_threads()?;
    match &cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Estimate(a) => cmd_estimate(a),
        Cmd::Nowcast(a) => cmd_nowcast(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Analyze(a) => analyze::run(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Clap(e)) => {
            let _ = e.print();
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
