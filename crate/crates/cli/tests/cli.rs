use std::path::Path;
use std::process::{Command, Output};

use ndarray::Array4;
use voxflow_core::io::{load_rmf, load_rvol, save_rmf, save_rvol, Dtype};
use voxflow_core::synth::UNIFORM_U;
use voxflow_core::transform::ZrRelation;
use voxflow_core::{MotionField, RadarVolume};

fn voxflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxflow")).args(args).current_dir(dir).output().expect("spawn voxflow")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = voxflow(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn constant_rain(mmh: f64, t: usize, n: usize) -> RadarVolume {
    let dbz = ZrRelation::default().reflectivity(mmh);
    RadarVolume::new(Array4::from_elem((t, 1, n, n), dbz), vec![1000.0], 300).unwrap()
}

fn metric(csv: &str, lead: &str, name: &str, thr: &str) -> f64 {
    csv.lines()
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|c| c[1] == lead && c[2] == name && c[3] == thr)
        .unwrap_or_else(|| panic!("no row {lead} {name} {thr}"))[4]
        .parse()
        .unwrap()
}

#[test]
fn synth_default_header_and_determinism() {
    let d = tempfile::tempdir().unwrap();
    let summary = ok(d.path(), &["synth", "--preset", "uniform", "-o", "a.rvol"]);
    assert!(summary.contains("8x8x128x128"));
    let b = std::fs::read(d.path().join("a.rvol")).unwrap();
    let dims: Vec<u32> = (0..4).map(|i| u32::from_le_bytes(b[5 + 4 * i..9 + 4 * i].try_into().unwrap())).collect();
    assert_eq!(dims, [8, 8, 128, 128]);
    assert!(d.path().join("a.truth.rmf").is_file());

    ok(d.path(), &["synth", "--preset", "shear2", "--seed", "42", "-o", "s1.rvol"]);
    ok(d.path(), &["synth", "--preset", "shear2", "--seed", "42", "-o", "s2.rvol"]);
    for (x, y) in [("s1.rvol", "s2.rvol"), ("s1.truth.rmf", "s2.truth.rmf")] {
        assert_eq!(std::fs::read(d.path().join(x)).unwrap(), std::fs::read(d.path().join(y)).unwrap());
    }
}

#[test]
fn usage_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&voxflow(d.path(), &["synth", "--preset", "uniform"])), 2);
    assert_eq!(code(&voxflow(d.path(), &["synth", "--preset", "tornado", "-o", "x.rvol"])), 2);
    assert_eq!(code(&voxflow(d.path(), &["estimate", "-i", "x", "-o", "y", "--beta", "1.5"])), 2);
    save_rvol(d.path().join("v.rvol"), &constant_rain(2.0, 3, 8), Dtype::F32).unwrap();
    save_rmf(d.path().join("z.rmf"), &MotionField::zeros(1, 8, 8)).unwrap();
    let out = voxflow(d.path(), &["nowcast", "-i", "v.rvol", "-m", "z.rmf", "--leads", "0", "-o", "f.rvol"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--leads"));
    let out = Command::new(env!("CARGO_BIN_EXE_voxflow"))
        .args(["synth", "--preset", "uniform", "-o", "t.rvol"])
        .env("VOXFLOW_THREADS", "many")
        .current_dir(d.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn corrupt_volume_names_the_field() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.rvol"), b"RVOX\x01\x00\x00").unwrap();
    let out = voxflow(d.path(), &["estimate", "-i", "bad.rvol", "-o", "m.rmf"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("magic"), "{}", stderr(&out));
    let mut b = Vec::new();
    voxflow_core::io::write_rvol(&mut b, &constant_rain(1.0, 2, 4), Dtype::U8).unwrap();
    b[4] = 9;
    std::fs::write(d.path().join("ver.rvol"), &b).unwrap();
    let out = voxflow(d.path(), &["estimate", "-i", "ver.rvol", "-o", "m.rmf"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("version"));
}

#[test]
fn zero_motion_nowcast_repeats_last_frame() {
    let d = tempfile::tempdir().unwrap();
    let data = Array4::from_shape_fn((4, 2, 6, 6), |(t, z, y, x)| (t * 10 + z * 3 + y + x) as f64);
    save_rvol(d.path().join("v.rvol"), &RadarVolume::new(data, vec![500.0, 1500.0], 300).unwrap(), Dtype::F32).unwrap();
    save_rmf(d.path().join("z.rmf"), &MotionField::zeros(2, 6, 6)).unwrap();
    ok(d.path(), &["nowcast", "-i", "v.rvol", "-m", "z.rmf", "--inputs", "4", "--leads", "3", "-o", "f.rvol"]);
    let v = load_rvol(d.path().join("v.rvol")).unwrap();
    let f = load_rvol(d.path().join("f.rvol")).unwrap();
    assert_eq!(f.dim(), (3, 2, 6, 6));
    for l in 0..3 {
        assert_eq!(f.frame(l), v.frame(3));
    }
}

#[test]
fn uniform_nowcast_with_true_motion_matches_continuation() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth", "--preset", "uniform", "--frames", "12", "-o", "u.rvol"]);
    let truth = load_rmf(d.path().join("u.truth.rmf")).unwrap();
    assert!(truth.data().iter().step_by(128 * 128).all(|&v| v == UNIFORM_U.0 || v == UNIFORM_U.1));
    ok(d.path(), &["nowcast", "-i", "u.rvol", "-m", "u.truth.rmf", "--inputs", "8", "--leads", "4", "-o", "f.rvol"]);
    let csv = ok(d.path(), &["verify", "-f", "f.rvol", "-t", "u.rvol", "--start", "8"]);
    let obs = load_rvol(d.path().join("u.rvol")).unwrap();
    let zr = ZrRelation::default();
    for lead in 1..=4 {
        let frame = obs.frame(7 + lead).map(|&v| zr.rain_rate(v));
        let cmax_mean = (0..128 * 128)
            .map(|i| (0..8).map(|z| frame[[z, i / 128, i % 128]]).fold(0.0f64, f64::max))
            .sum::<f64>()
            / (128.0 * 128.0);
        let mae = metric(&csv, &lead.to_string(), "mae", "");
        assert!(mae < 0.05 * cmax_mean, "lead {lead}: MAE {mae} vs mean {cmax_mean}");
    }
}

#[test]
fn verify_identity_offset_and_shape_errors() {
    let d = tempfile::tempdir().unwrap();
    let obs = RadarVolume::new(
        Array4::from_shape_fn((3, 2, 10, 10), |(t, z, y, x)| if (x + y + t) % 3 == 0 { 40.0 - z as f64 } else { 10.0 }),
        vec![500.0, 1500.0],
        300,
    )
    .unwrap();
    save_rvol(d.path().join("obs.rvol"), &obs, Dtype::F32).unwrap();
    let csv = ok(d.path(), &["verify", "-f", "obs.rvol", "-t", "obs.rvol", "--threshold", "1,5"]);
    assert!(csv.starts_with("sample_id,lead_steps,metric,threshold_mmh,value\n"));
    for lead in ["1", "2", "3"] {
        for m in ["me", "mae", "mse"] {
            assert_eq!(metric(&csv, lead, m, ""), 0.0);
        }
        assert_eq!(metric(&csv, lead, "ets", "5"), 1.0);
    }
    save_rvol(d.path().join("two.rvol"), &constant_rain(2.0, 2, 8), Dtype::F32).unwrap();
    save_rvol(d.path().join("three.rvol"), &constant_rain(3.0, 2, 8), Dtype::F32).unwrap();
    ok(d.path(), &["verify", "-f", "three.rvol", "-t", "two.rvol", "-o", "m.csv"]);
    let csv = std::fs::read_to_string(d.path().join("m.csv")).unwrap();
    // dBZ is stored as f32
    assert!((metric(&csv, "1", "me", "") - 1.0).abs() < 1e-5);
    assert!((metric(&csv, "2", "mae", "") - 1.0).abs() < 1e-5);

    save_rvol(d.path().join("small.rvol"), &constant_rain(2.0, 2, 6), Dtype::F32).unwrap();
    let out = voxflow(d.path(), &["verify", "-f", "small.rvol", "-t", "two.rvol"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("shape"));
}

#[test]
fn config_file_applies_and_command_line_wins() {
    let d = tempfile::tempdir().unwrap();
    save_rvol(d.path().join("v.rvol"), &constant_rain(2.0, 3, 8), Dtype::F32).unwrap();
    save_rmf(d.path().join("z.rmf"), &MotionField::zeros(1, 8, 8)).unwrap();
    std::fs::write(d.path().join("c.cfg"), "# defaults\nleads = 0\ninputs = 3\nbeta = 0.2\n").unwrap();
    let base = ["--config", "c.cfg", "nowcast", "-i", "v.rvol", "-m", "z.rmf", "-o", "f.rvol"];
    assert_eq!(code(&voxflow(d.path(), &base)), 2);
    let mut args = base.to_vec();
    args.extend(["--leads", "2"]);
    ok(d.path(), &args);
    assert_eq!(load_rvol(d.path().join("f.rvol")).unwrap().dim().0, 2);
    std::fs::write(d.path().join("bad.cfg"), "warp_speed = 9\n").unwrap();
    assert_eq!(code(&voxflow(d.path(), &["--config", "bad.cfg", "nowcast", "-i", "v.rvol", "-m", "z.rmf", "-o", "f.rvol"])), 2);
}

#[test]
fn estimate_modes_and_monotone_trace() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth", "--preset", "shear2", "--frames", "3", "-o", "s.rvol"]);
    ok(d.path(), &["estimate", "-i", "s.rvol", "--mode", "3d", "--inputs", "3", "--iters", "25", "-o", "m3.rmf"]);
    assert_eq!(load_rmf(d.path().join("m3.rmf")).unwrap().dim(), (2, 128, 128));
    let trace = std::fs::read_to_string(d.path().join("m3.trace.csv")).unwrap();
    let rows: Vec<Vec<f64>> =
        trace.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert!(!rows.is_empty());
    for w in rows.windows(2) {
        if w[0][0] == w[1][0] && w[0][1] == w[1][1] {
            assert!(w[1][3] <= w[0][3], "loss increased: {:?} -> {:?}", w[0], w[1]);
        }
    }
    ok(d.path(), &["estimate", "-i", "s.rvol", "--mode", "2d-cmax", "--inputs", "3", "--iters", "10", "-o", "m2.rmf"]);
    assert_eq!(load_rmf(d.path().join("m2.rmf")).unwrap().dim(), (1, 128, 128));
    ok(d.path(), &["estimate", "-i", "s.rvol", "--mode", "lk", "--inputs", "3", "-o", "lk.rmf", "--trace", "lk.csv"]);
    assert_eq!(std::fs::read_to_string(d.path().join("lk.csv")).unwrap().lines().count(), 1);
    let out = voxflow(d.path(), &["estimate", "-i", "s.rvol", "--inputs", "9", "-o", "x.rmf"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn analyze_reports() {
    let d = tempfile::tempdir().unwrap();
    let empty = d.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = voxflow(d.path(), &["analyze", "empty", "--which", "ratios"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("no volumes found"));

    let uni = d.path().join("uni");
    std::fs::create_dir(&uni).unwrap();
    for seed in ["1", "2"] {
        ok(&uni, &["synth", "--preset", "uniform", "--seed", seed, "-o", &format!("u{seed}.rvol")]);
    }
    let msg = ok(d.path(), &["analyze", "uni", "--which", "motion-corr", "--truth-motion", "-o", "rep"]);
    assert!(msg.contains("min off-diagonal"));
    let csv = std::fs::read_to_string(d.path().join("rep/motion_corr.csv")).unwrap();
    for l in csv.lines().skip(1) {
        let c: Vec<&str> = l.split(',').collect();
        assert!(c[2].parse::<f64>().unwrap() >= 0.999, "{l}");
    }
    assert!(d.path().join("rep/motion_corr.svg").is_file());
    for which in ["ratios", "refl-corr", "histogram", "outliers"] {
        ok(d.path(), &["analyze", "uni", "--which", which, "--truth-motion", "--top", "1", "-o", "rep"]);
    }
    for f in ["ratios.csv", "ratios.svg", "refl_corr.csv", "histogram.csv", "monthly.svg", "outliers.csv", "samples.csv"] {
        assert!(d.path().join("rep").join(f).is_file(), "{f}");
    }

    let sp = d.path().join("split");
    std::fs::create_dir(&sp).unwrap();
    ok(d.path(), &["synth", "--preset", "split", "-o", "sp.rvol"]);
    ok(d.path(), &["nowcast", "-i", "sp.rvol", "-m", "sp.truth.rmf", "--leads", "16", "-o", "split/fc.rvol"]);
    let msg = ok(d.path(), &["analyze", "split", "--which", "split"]);
    let lead: usize = msg.split("splits at lead ").nth(1).expect(&msg).split_whitespace().next().unwrap().parse().unwrap();
    assert!(lead <= 8, "{msg}");
}
