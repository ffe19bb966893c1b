//! Binary volume (`RVOL`) and motion (`RMF1`) files, little-endian.
//!
//! ```text
//! RVOL: "RVOL" u8 version=1 | u32 T Z Y X | u8 dtype | u32 dt_seconds
//!       | Z × f32 altitude_m | payload [t][z][y][x] | chunks*
//!   dtype 0: f32 dBZ, NaN = invalid
//!   dtype 1: u8, dBZ = v/2 − 32, 255 = invalid
//!   chunk "RHOH": T·Z·Y·X × u8, ρ_HV = v/200
//!   chunk "MASK": Z·Y·X × u8, 0 = invalid
//! RMF1: "RMF1" | u32 Z Y X | f32 payload [z][component][y][x]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::grid::{MotionField, RadarVolume};
use crate::transform::NO_ECHO_DBZ;

pub const RVOL_MAGIC: &[u8; 4] = b"RVOL";
pub const RVOL_VERSION: u8 = 0x01;
pub const RMF_MAGIC: &[u8; 4] = b"RMF1";
const INVALID_U8: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F32,
    /// 0.5 dBZ steps from −32 dBZ.
    U8,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::U8 => 1,
        }
    }
}

fn format_err<T>(field: &'static str, reason: impl Into<String>) -> Result<T> {
    Err(Error::Format { field, reason: reason.into() })
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], field: &'static str) -> Result<()> {
    r.read_exact(buf).or_else(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err(field, "unexpected end of file"),
        _ => Err(Error::Io(e)),
    })
}

fn read_u8<R: Read>(r: &mut R, field: &'static str) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b, field)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R, field: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, field)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s<R: Read>(r: &mut R, n: usize, field: &'static str) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    read_exact(r, &mut buf, field)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn read_dim<R: Read>(r: &mut R, field: &'static str) -> Result<usize> {
    match read_u32(r, field)? {
        0 => format_err(field, "must be positive"),
        v => Ok(v as usize),
    }
}

fn quantize(dbz: f64) -> u8 {
    ((dbz - NO_ECHO_DBZ) * 2.0).round().clamp(0.0, 254.0) as u8
}

fn dequantize(v: u8) -> f64 {
    v as f64 / 2.0 + NO_ECHO_DBZ
}

/// Writes `vol` as RVOL. Cells outside the mask are stored as invalid and a
/// MASK chunk is appended; ρ_HV, when present, goes into a RHOH chunk.
pub fn write_rvol<W: Write>(w: &mut W, vol: &RadarVolume, dtype: Dtype) -> Result<()> {
    let (t, z, y, x) = vol.dim();
    w.write_all(RVOL_MAGIC)?;
    w.write_all(&[RVOL_VERSION])?;
    for d in [t, z, y, x] {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument("dimension exceeds u32".into()))?;
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&[dtype.code()])?;
    w.write_all(&vol.dt().to_le_bytes())?;
    for &a in vol.z_levels() {
        w.write_all(&(a as f32).to_le_bytes())?;
    }
    let mask = vol.mask();
    let data = vol.data();
    let mut buf = Vec::with_capacity(t * z * y * x * if dtype == Dtype::U8 { 1 } else { 4 });
    for ((ti, zi, yi, xi), &v) in data.indexed_iter() {
        let _ = ti;
        let valid = mask[[zi, yi, xi]] && !v.is_nan();
        match dtype {
            Dtype::F32 => buf.extend_from_slice(&(if valid { v as f32 } else { f32::NAN }).to_le_bytes()),
            Dtype::U8 => buf.push(if valid { quantize(v) } else { INVALID_U8 }),
        }
    }
    w.write_all(&buf)?;
    if let Some(rho) = vol.rho_hv() {
        w.write_all(b"RHOH")?;
        let bytes: Vec<u8> = rho.iter().map(|&r| (r * 200.0).round().clamp(0.0, 255.0) as u8).collect();
        w.write_all(&bytes)?;
    }
    if mask.iter().any(|&m| !m) {
        w.write_all(b"MASK")?;
        let bytes: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

/// Reads an RVOL stream. A cell is masked out when the MASK chunk says so or
/// when it is invalid in every frame; invalid values read as no echo.
pub fn read_rvol<R: Read>(r: &mut R) -> Result<RadarVolume> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != RVOL_MAGIC {
        return format_err("magic", format!("expected \"RVOL\", found {:?}", String::from_utf8_lossy(&magic)));
    }
    let version = read_u8(r, "version")?;
    if version != RVOL_VERSION {
        return format_err("version", format!("unsupported version {version}"));
    }
    let t = read_dim(r, "T")?;
    let z = read_dim(r, "Z")?;
    let y = read_dim(r, "Y")?;
    let x = read_dim(r, "X")?;
    let n = t
        .checked_mul(z)
        .and_then(|v| v.checked_mul(y))
        .and_then(|v| v.checked_mul(x))
        .filter(|&v| v <= 1 << 34)
        .ok_or(Error::Format { field: "X", reason: "volume too large".into() })?;
    let dtype = match read_u8(r, "dtype")? {
        0 => Dtype::F32,
        1 => Dtype::U8,
        d => return format_err("dtype", format!("unknown dtype {d}")),
    };
    let dt = read_u32(r, "dt_seconds")?;
    let alts: Vec<f64> = read_f32s(r, z, "altitudes")?.into_iter().map(f64::from).collect();
    if alts.iter().any(|a| !a.is_finite()) || alts.windows(2).any(|w| w[1] <= w[0]) {
        return format_err("altitudes", "must be finite and strictly increasing");
    }
    let values: Vec<Option<f64>> = match dtype {
        Dtype::F32 => read_f32s(r, n, "payload")?
            .into_iter()
            .map(|v| if v.is_nan() { None } else { Some(f64::from(v)) })
            .collect(),
        Dtype::U8 => {
            let mut buf = vec![0u8; n];
            read_exact(r, &mut buf, "payload")?;
            buf.into_iter().map(|v| if v == INVALID_U8 { None } else { Some(dequantize(v)) }).collect()
        }
    };
    if values.iter().flatten().any(|v| !v.is_finite()) {
        return format_err("payload", "non-finite reflectivity");
    }
    let mut rho = None;
    let mut file_mask = None;
    loop {
        let mut tag = [0u8; 4];
        match r.read(&mut tag[..1])? {
            0 => break,
            _ => read_exact(r, &mut tag[1..], "chunk")?,
        }
        match &tag {
            b"RHOH" => {
                let mut buf = vec![0u8; n];
                read_exact(r, &mut buf, "RHOH")?;
                rho = Some(Array4::from_shape_vec((t, z, y, x), buf.into_iter().map(|v| v as f64 / 200.0).collect()).expect("sized"));
            }
            b"MASK" => {
                let mut buf = vec![0u8; z * y * x];
                read_exact(r, &mut buf, "MASK")?;
                file_mask = Some(Array3::from_shape_vec((z, y, x), buf.into_iter().map(|v| v != 0).collect()).expect("sized"));
            }
            other => return format_err("chunk", format!("unknown chunk tag {:?}", String::from_utf8_lossy(other))),
        }
    }
    let plane = z * y * x;
    let mask = Array3::from_shape_fn((z, y, x), |(zi, yi, xi)| {
        let i = (zi * y + yi) * x + xi;
        let any_valid = (0..t).any(|ti| values[ti * plane + i].is_some());
        any_valid && file_mask.as_ref().map_or(true, |m| m[[zi, yi, xi]])
    });
    let data = Array4::from_shape_vec((t, z, y, x), values.into_iter().map(|v| v.unwrap_or(NO_ECHO_DBZ)).collect())
        .expect("sized");
    let mut vol = RadarVolume::new(data, alts, dt)
        .map_err(|e| Error::Format { field: "header", reason: e.to_string() })?
        .with_mask(mask)?;
    if let Some(rho) = rho {
        vol = vol.with_rho_hv(rho)?;
    }
    Ok(vol)
}

pub fn write_rmf<W: Write>(w: &mut W, mf: &MotionField) -> Result<()> {
    let (z, y, x) = mf.dim();
    w.write_all(RMF_MAGIC)?;
    for d in [z, y, x] {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument("dimension exceeds u32".into()))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(z * 2 * y * x * 4);
    for &v in mf.data().iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_rmf<R: Read>(r: &mut R) -> Result<MotionField> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != RMF_MAGIC {
        return format_err("magic", format!("expected \"RMF1\", found {:?}", String::from_utf8_lossy(&magic)));
    }
    let z = read_dim(r, "Z")?;
    let y = read_dim(r, "Y")?;
    let x = read_dim(r, "X")?;
    let n = z
        .checked_mul(2 * y)
        .and_then(|v| v.checked_mul(x))
        .filter(|&v| v <= 1 << 32)
        .ok_or(Error::Format { field: "X", reason: "field too large".into() })?;
    let vals = read_f32s(r, n, "payload")?;
    if vals.iter().any(|v| !v.is_finite()) {
        return format_err("payload", "non-finite motion component");
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return format_err("payload", "trailing bytes after motion payload");
    }
    let u = Array4::from_shape_vec((z, 2, y, x), vals.into_iter().map(f64::from).collect()).expect("sized");
    MotionField::new(u)
}

pub fn save_rvol(path: impl AsRef<Path>, vol: &RadarVolume, dtype: Dtype) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_rvol(&mut w, vol, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn load_rvol(path: impl AsRef<Path>) -> Result<RadarVolume> {
    read_rvol(&mut BufReader::new(File::open(path)?))
}

pub fn save_rmf(path: impl AsRef<Path>, mf: &MotionField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_rmf(&mut w, mf)?;
    w.flush()?;
    Ok(())
}

pub fn load_rmf(path: impl AsRef<Path>) -> Result<MotionField> {
    read_rmf(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> RadarVolume {
        let data = Array4::from_shape_fn((2, 2, 3, 4), |(t, z, y, x)| (t * 7 + z * 5 + y * 3 + x) as f64 * 1.5 - 10.0);
        let mut mask = Array3::from_elem((2, 3, 4), true);
        mask[[1, 2, 3]] = false;
        let rho = Array4::from_shape_fn((2, 2, 3, 4), |(_, _, y, x)| if y == x { 0.3 } else { 0.985 });
        RadarVolume::new(data, vec![500.0, 1500.0], 300).unwrap().with_mask(mask).unwrap().with_rho_hv(rho).unwrap()
    }

    fn bytes(vol: &RadarVolume, dtype: Dtype) -> Vec<u8> {
        let mut out = Vec::new();
        write_rvol(&mut out, vol, dtype).unwrap();
        out
    }

    #[test]
    fn header_layout() {
        let b = bytes(&sample(), Dtype::U8);
        assert_eq!(&b[..4], b"RVOL");
        assert_eq!(b[4], 1);
        assert_eq!(u32::from_le_bytes(b[5..9].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[17..21].try_into().unwrap()), 4);
        assert_eq!(b[21], 1);
        assert_eq!(u32::from_le_bytes(b[22..26].try_into().unwrap()), 300);
        assert_eq!(f32::from_le_bytes(b[26..30].try_into().unwrap()), 500.0);
        // payload starts after the two altitudes
        let first = b[34];
        assert_eq!(dequantize(first), -10.0);
    }

    #[test]
    fn quantization_examples() {
        assert_eq!(quantize(-32.0), 0);
        assert_eq!(quantize(0.0), 64);
        assert_eq!(quantize(95.0), 254);
        assert_eq!(quantize(200.0), 254);
        assert_eq!(dequantize(64), 0.0);
    }

    #[test]
    fn f32_round_trip_is_exact_for_f32_values() {
        let vol = sample();
        let back = read_rvol(&mut bytes(&vol, Dtype::F32).as_slice()).unwrap();
        assert_eq!(back.mask(), vol.mask());
        assert_eq!(back.z_levels(), vol.z_levels());
        assert_eq!(back.dt(), 300);
        for ((i, &a), &b) in vol.data().indexed_iter().zip(back.data().iter()) {
            if vol.mask()[[i.1, i.2, i.3]] {
                assert_eq!(a, b);
            } else {
                assert_eq!(b, NO_ECHO_DBZ);
            }
        }
        let rho = back.rho_hv().unwrap();
        assert_eq!(rho[[0, 0, 1, 1]], 0.3);
        assert_eq!(rho[[0, 0, 0, 1]], 197.0 / 200.0);
    }

    #[test]
    fn u8_round_trip_within_half_step() {
        let vol = sample();
        let back = read_rvol(&mut bytes(&vol, Dtype::U8).as_slice()).unwrap();
        assert_eq!(back.mask(), vol.mask());
        for ((i, &a), &b) in vol.data().indexed_iter().zip(back.data().iter()) {
            if vol.mask()[[i.1, i.2, i.3]] {
                assert!((a - b).abs() <= 0.25);
            }
        }
    }

    #[test]
    fn corrupt_headers_name_the_field() {
        let good = bytes(&sample(), Dtype::U8);
        let field = |b: Vec<u8>| match read_rvol(&mut b.as_slice()) {
            Err(Error::Format { field, .. }) => field,
            other => panic!("expected format error, got {other:?}"),
        };
        let mut b = good.clone();
        b[0] = b'X';
        assert_eq!(field(b), "magic");
        let mut b = good.clone();
        b[4] = 2;
        assert_eq!(field(b), "version");
        let mut b = good.clone();
        b[9..13].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(field(b), "Z");
        let mut b = good.clone();
        b[21] = 7;
        assert_eq!(field(b), "dtype");
        let mut b = good.clone();
        b[30..34].copy_from_slice(&100f32.to_le_bytes());
        assert_eq!(field(b), "altitudes");
        assert_eq!(field(good[..40].to_vec()), "payload");
        assert_eq!(field(good[..3].to_vec()), "magic");
        let mut b = good.clone();
        b.extend_from_slice(b"JUNK");
        assert_eq!(field(b), "chunk");
        let mut b = good;
        b.truncate(b.len() - 2);
        assert_eq!(field(b), "MASK");
    }

    #[test]
    fn motion_round_trip() {
        let u = Array4::from_shape_fn((2, 2, 3, 5), |(z, c, y, x)| (z as f64 - c as f64) * 0.25 + y as f64 - x as f64 * 0.5);
        let mf = MotionField::new(u).unwrap();
        let mut b = Vec::new();
        write_rmf(&mut b, &mf).unwrap();
        assert_eq!(&b[..4], b"RMF1");
        assert_eq!(b.len(), 16 + 2 * 2 * 3 * 5 * 4);
        let back = read_rmf(&mut b.as_slice()).unwrap();
        assert_eq!(back.data(), mf.data());
        b[0] = b'Q';
        assert!(matches!(read_rmf(&mut b.as_slice()), Err(Error::Format { field: "magic", .. })));
    }

    proptest! {
        #[test]
        fn quantize_round_trip_bound(d in -32.0f64..95.0) {
            prop_assert!((dequantize(quantize(d)) - d).abs() <= 0.25 + 1e-12);
        }
    }
}
