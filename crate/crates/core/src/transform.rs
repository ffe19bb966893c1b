//! Conversions between reflectivity (dBZ), rain rate (mm h⁻¹) and
//! logarithmic rain rate (dBR).

use ndarray::{Array3, ArrayView3, Zip};

use crate::error::{invalid, Result};
use crate::grid::{RadarVolume, RainField, Space};

/// Lower bound of the dBR space; everything at or below the rain threshold maps here.
pub const DBR_FLOOR: f64 = -15.0;

/// Reflectivity written for "no echo" (the bottom of the 8-bit storage range).
pub const NO_ECHO_DBZ: f64 = -32.0;

/// Rain rate whose dBR equals [`DBR_FLOOR`], so the floor mapping is continuous.
pub const DEFAULT_DBR_THRESHOLD: f64 = 0.031_622_776_601_683_79;

/// Z = a·R^b reflectivity/rain-rate relationship.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZrRelation {
    pub a: f64,
    pub b: f64,
}

impl Default for ZrRelation {
    /// Marshall–Palmer.
    fn default() -> Self {
        ZrRelation { a: 200.0, b: 1.6 }
    }
}

impl ZrRelation {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0) {
            return invalid(format!("Z-R coefficients must be positive (a={a}, b={b})"));
        }
        Ok(ZrRelation { a, b })
    }

    /// Rain rate for a single reflectivity value. No-echo maps to zero.
    #[inline]
    pub fn rain_rate(&self, dbz: f64) -> f64 {
        if dbz <= NO_ECHO_DBZ || dbz.is_nan() {
            return 0.0;
        }
        (10f64.powf(dbz / 10.0) / self.a).powf(1.0 / self.b)
    }

    /// Inverse of [`Self::rain_rate`]; zero rain maps to [`NO_ECHO_DBZ`].
    #[inline]
    pub fn reflectivity(&self, rain: f64) -> f64 {
        if rain <= 0.0 {
            return NO_ECHO_DBZ;
        }
        (10.0 * (self.a * rain.powf(self.b)).log10()).max(NO_ECHO_DBZ)
    }
}

/// Converts a `Z × Y × X` reflectivity array to rain rate. Invalid cells
/// become 0 and stay invalid.
pub fn dbz_to_rain(dbz: ArrayView3<f64>, mask: ArrayView3<bool>, zr: ZrRelation) -> Result<RainField> {
    ZrRelation::new(zr.a, zr.b)?;
    let mut data = Array3::zeros(dbz.dim());
    Zip::from(&mut data).and(&dbz).and(&mask).for_each(|r, &d, &m| {
        if m {
            *r = zr.rain_rate(d);
        }
    });
    RainField::new(data, Space::Mmh, mask.to_owned())
}

/// Rain rate of frame `t` of a volume.
pub fn volume_frame_to_rain(vol: &RadarVolume, t: usize, zr: ZrRelation) -> Result<RainField> {
    dbz_to_rain(vol.frame(t), vol.mask(), zr)
}

/// Logarithmic normalization: `10·log10(R)` above `threshold`, [`DBR_FLOOR`] otherwise.
pub fn rain_to_dbr(r: &RainField, threshold: f64) -> Result<RainField> {
    if r.space() != Space::Mmh {
        return invalid("rain_to_dbr expects a mm/h field");
    }
    if !(threshold > 0.0) {
        return invalid("dBR threshold must be positive");
    }
    let data = r.data().mapv(|v| if v > threshold { 10.0 * v.log10() } else { DBR_FLOOR });
    // values between the threshold and 10^-1.5 would land below the floor
    let data = data.mapv(|v| v.max(DBR_FLOOR));
    RainField::new(data, Space::Dbr, r.mask().to_owned())
}

/// Inverse of [`rain_to_dbr`]; the floor maps to 0 mm h⁻¹.
pub fn dbr_to_rain(d: &RainField) -> Result<RainField> {
    if d.space() != Space::Dbr {
        return invalid("dbr_to_rain expects a dBR field");
    }
    let below = Zip::from(d.data()).and(d.mask()).fold(false, |acc, &v, &m| acc || (m && v < DBR_FLOOR));
    if below {
        return invalid(format!("dBR values below {DBR_FLOOR}"));
    }
    let data = d.data().mapv(|v| if v <= DBR_FLOOR { 0.0 } else { 10f64.powf(v / 10.0) });
    RainField::new(data, Space::Mmh, d.mask().to_owned())
}

/// dBZ straight to dBR with default thresholds.
pub fn dbz_to_dbr(dbz: ArrayView3<f64>, mask: ArrayView3<bool>, zr: ZrRelation) -> Result<RainField> {
    rain_to_dbr(&dbz_to_rain(dbz, mask, zr)?, DEFAULT_DBR_THRESHOLD)
}

/// All frames of a volume in dBR space.
pub fn volume_to_dbr(vol: &RadarVolume, zr: ZrRelation) -> Result<Vec<RainField>> {
    (0..vol.dim().0).map(|t| dbz_to_dbr(vol.frame(t), vol.mask(), zr)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(v: f64) -> Array3<f64> {
        Array3::from_elem((1, 1, 1), v)
    }

    fn all_valid() -> Array3<bool> {
        Array3::from_elem((1, 1, 1), true)
    }

    #[test]
    fn marshall_palmer_closed_form() {
        let zr = ZrRelation::default();
        // Z = a R^b  =>  R = 1 at 10 log10(200)
        let one = 10.0 * 200f64.log10();
        let r = dbz_to_rain(single(one).view(), all_valid().view(), zr).unwrap();
        assert!((r.data()[[0, 0, 0]] - 1.0).abs() < 1e-12);
        // one decade of R adds 10 b = 16 dB
        let r = dbz_to_rain(single(one + 16.0).view(), all_valid().view(), zr).unwrap();
        assert!((r.data()[[0, 0, 0]] - 10.0).abs() < 1e-9);
        let r = dbz_to_rain(single(f64::NEG_INFINITY).view(), all_valid().view(), zr).unwrap();
        assert_eq!(r.data()[[0, 0, 0]], 0.0);
    }

    #[test]
    fn invalid_cells_become_zero() {
        let mask = Array3::from_elem((1, 1, 1), false);
        let r = dbz_to_rain(single(50.0).view(), mask.view(), ZrRelation::default()).unwrap();
        assert_eq!(r.data()[[0, 0, 0]], 0.0);
        assert!(!r.mask()[[0, 0, 0]]);
    }

    #[test]
    fn rejects_bad_coefficients() {
        assert!(ZrRelation::new(0.0, 1.6).is_err());
        assert!(ZrRelation::new(200.0, -1.0).is_err());
        let zr = ZrRelation { a: -1.0, b: 1.0 };
        assert!(dbz_to_rain(single(20.0).view(), all_valid().view(), zr).is_err());
    }

    #[test]
    fn dbr_values() {
        let r = RainField::from_data(Array3::from_shape_vec((1, 1, 3), vec![1.0, 10.0, 0.0]).unwrap(), Space::Mmh).unwrap();
        let d = rain_to_dbr(&r, DEFAULT_DBR_THRESHOLD).unwrap();
        assert_eq!(d.data().as_slice().unwrap(), &[0.0, 10.0, -15.0]);
        let back = dbr_to_rain(&d).unwrap();
        assert_eq!(back.data().as_slice().unwrap(), &[1.0, 10.0, 0.0]);
        assert!((10.0 * DEFAULT_DBR_THRESHOLD.log10() - DBR_FLOOR).abs() < 1e-12);
    }

    #[test]
    fn dbr_rejects_below_floor() {
        let d = RainField::new(single(-20.0), Space::Dbr, Array3::from_elem((1, 1, 1), false)).unwrap();
        // masked-out values are ignored
        assert!(dbr_to_rain(&d).is_ok());
        assert!(RainField::from_data(single(-20.0), Space::Dbr).is_err());
    }

    #[test]
    fn reflectivity_inverts_rain_rate() {
        let zr = ZrRelation::default();
        for r in [0.05, 0.7, 3.0, 42.0] {
            assert!((zr.rain_rate(zr.reflectivity(r)) - r).abs() < 1e-9 * r.max(1.0));
        }
        assert_eq!(zr.reflectivity(0.0), NO_ECHO_DBZ);
    }

    proptest! {
        #[test]
        fn round_trip_above_floor(vals in proptest::collection::vec(0.032f64..300.0, 1..50)) {
            let n = vals.len();
            let r = RainField::from_data(Array3::from_shape_vec((1, 1, n), vals.clone()).unwrap(), Space::Mmh).unwrap();
            let back = dbr_to_rain(&rain_to_dbr(&r, DEFAULT_DBR_THRESHOLD).unwrap()).unwrap();
            for (a, b) in back.data().iter().zip(&vals) {
                prop_assert!(((a - b) / b).abs() < 1e-6);
            }
        }

        #[test]
        fn monotone_above_floor(a in -0.5f64..70.0, d in 0.01f64..10.0) {
            let zr = ZrRelation::default();
            prop_assert!(zr.rain_rate(a + d) > zr.rain_rate(a));
            let (ra, rb) = (zr.rain_rate(a + 30.0), zr.rain_rate(a + 30.0 + d));
            let f = |r: f64| if r > DEFAULT_DBR_THRESHOLD { 10.0 * r.log10() } else { DBR_FLOOR };
            prop_assert!(f(rb) > f(ra));
        }
    }
}
