//! Continuous and categorical verification of nowcasts per lead time.

use rayon::prelude::*;

use crate::error::{invalid, shape, Error, Result};
use crate::grid::{RainField, Space};
use crate::transform::{rain_to_dbr, DEFAULT_DBR_THRESHOLD};

/// Rain-rate thresholds (mm/h) used when none are given.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [1.0, 5.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }

    fn add(&mut self, o: &Counts) {
        self.hits += o.hits;
        self.misses += o.misses;
        self.false_alarms += o.false_alarms;
        self.correct_negatives += o.correct_negatives;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContingencyTable {
    pub counts: Counts,
    /// mm/h.
    pub threshold: f64,
    /// Lead time in steps.
    pub lead: usize,
}

/// Precision, recall and equitable threat score. `None` marks a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub ets: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Continuous {
    pub me: f64,
    pub mae: f64,
    pub mse: f64,
}

fn check_pair(pred: &RainField, obs: &RainField) -> Result<()> {
    if pred.dim() != obs.dim() {
        return shape(format!("forecast {:?} vs observation {:?}", pred.dim(), obs.dim()));
    }
    if pred.space() != obs.space() {
        return invalid("forecast and observation are in different unit spaces");
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
struct ErrSums {
    sum: f64,
    abs: f64,
    sq: f64,
    n: u64,
}

impl ErrSums {
    fn add(&mut self, o: &ErrSums) {
        self.sum += o.sum;
        self.abs += o.abs;
        self.sq += o.sq;
        self.n += o.n;
    }

    fn finish(&self) -> Option<Continuous> {
        (self.n > 0).then(|| {
            let n = self.n as f64;
            Continuous { me: self.sum / n, mae: self.abs / n, mse: self.sq / n }
        })
    }
}

fn err_sums(pred: &RainField, obs: &RainField) -> ErrSums {
    let mut s = ErrSums::default();
    for (((&p, &o), &mp), &mo) in pred.data().iter().zip(obs.data().iter()).zip(pred.mask().iter()).zip(obs.mask().iter()) {
        if mp && mo {
            let e = p - o;
            s.sum += e;
            s.abs += e.abs();
            s.sq += e * e;
            s.n += 1;
        }
    }
    s
}

/// Mean error, mean absolute error and mean squared error over jointly valid cells.
pub fn continuous_metrics(pred: &RainField, obs: &RainField) -> Result<Continuous> {
    check_pair(pred, obs)?;
    err_sums(pred, obs).finish().ok_or(Error::NoOverlap)
}

fn count(pred: &RainField, obs: &RainField, threshold: f64) -> Counts {
    let mut c = Counts::default();
    for (((&p, &o), &mp), &mo) in pred.data().iter().zip(obs.data().iter()).zip(pred.mask().iter()).zip(obs.mask().iter()) {
        if !(mp && mo) {
            continue;
        }
        match (p >= threshold, o >= threshold) {
            (true, true) => c.hits += 1,
            (false, true) => c.misses += 1,
            (true, false) => c.false_alarms += 1,
            (false, false) => c.correct_negatives += 1,
        }
    }
    c
}

/// Binarizes both fields at `value >= threshold` and counts the four
/// outcomes over jointly valid cells.
pub fn contingency(pred: &RainField, obs: &RainField, threshold: f64) -> Result<ContingencyTable> {
    check_pair(pred, obs)?;
    if !threshold.is_finite() {
        return invalid("threshold must be finite");
    }
    Ok(ContingencyTable { counts: count(pred, obs, threshold), threshold, lead: 0 })
}

pub fn precision_recall_ets(t: &Counts) -> Scores {
    let (h, m, fa) = (t.hits as f64, t.misses as f64, t.false_alarms as f64);
    let n = t.total() as f64;
    let ratio = |num: f64, den: f64| (den > 0.0).then(|| num / den);
    let ets = if n > 0.0 {
        let rand = (h + fa) * (h + m) / n;
        ratio(h - rand, h + m + fa - rand)
    } else {
        None
    };
    Scores { precision: ratio(h, h + fa), recall: ratio(h, h + m), ets }
}

/// Forecasts and matching observations for one sample, one entry per lead
/// (index 0 is lead 1). Fields with more than one level are scored on their
/// column maximum.
#[derive(Debug, Clone)]
pub struct NowcastSample {
    pub id: String,
    pub forecasts: Vec<RainField>,
    pub observations: Vec<RainField>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub thresholds: Vec<f64>,
    /// Compute continuous metrics on dBR instead of mm/h.
    pub continuous_in_dbr: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { thresholds: DEFAULT_THRESHOLDS.to_vec(), continuous_in_dbr: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeadReport {
    pub lead: usize,
    pub continuous: Option<Continuous>,
    pub tables: Vec<ContingencyTable>,
    pub scores: Vec<Scores>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleReport {
    pub id: String,
    pub leads: Vec<LeadReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub thresholds: Vec<f64>,
    pub samples: usize,
    /// Micro-averaged over samples: counts and error sums are pooled before scoring.
    pub leads: Vec<LeadReport>,
    pub per_sample: Vec<SampleReport>,
}

struct LeadAcc {
    err: ErrSums,
    counts: Vec<Counts>,
}

fn prepare(f: &RainField) -> Result<RainField> {
    if f.space() != Space::Mmh {
        return invalid("verification expects rain rates in mm/h");
    }
    Ok(if f.dim().0 > 1 { f.cmax() } else { f.clone() })
}

fn lead_report(lead: usize, acc: &LeadAcc, thresholds: &[f64]) -> LeadReport {
    LeadReport {
        lead,
        continuous: acc.err.finish(),
        tables: acc
            .counts
            .iter()
            .zip(thresholds)
            .map(|(c, &t)| ContingencyTable { counts: *c, threshold: t, lead })
            .collect(),
        scores: acc.counts.iter().map(precision_recall_ets).collect(),
    }
}

fn score_sample(s: &NowcastSample, opts: &VerifyOptions) -> Result<Vec<LeadAcc>> {
    if s.forecasts.len() != s.observations.len() {
        return shape(format!(
            "sample {}: {} forecast leads vs {} observations",
            s.id,
            s.forecasts.len(),
            s.observations.len()
        ));
    }
    s.forecasts
        .iter()
        .zip(&s.observations)
        .map(|(f, o)| {
            let (f, o) = (prepare(f)?, prepare(o)?);
            check_pair(&f, &o)?;
            let err = if opts.continuous_in_dbr {
                err_sums(&rain_to_dbr(&f, DEFAULT_DBR_THRESHOLD)?, &rain_to_dbr(&o, DEFAULT_DBR_THRESHOLD)?)
            } else {
                err_sums(&f, &o)
            };
            let counts = opts.thresholds.iter().map(|&t| count(&f, &o, t)).collect();
            Ok(LeadAcc { err, counts })
        })
        .collect()
}

/// Scores every sample at every lead and pools the results per lead.
pub fn verify_nowcast(samples: &[NowcastSample], opts: &VerifyOptions) -> Result<VerificationReport> {
    if samples.is_empty() {
        return invalid("no samples to verify");
    }
    if opts.thresholds.iter().any(|t| !t.is_finite()) {
        return invalid("thresholds must be finite");
    }
    let per: Vec<Vec<LeadAcc>> = samples.par_iter().map(|s| score_sample(s, opts)).collect::<Result<_>>()?;
    let max_leads = per.iter().map(Vec::len).max().unwrap_or(0);
    let mut pooled: Vec<LeadAcc> = (0..max_leads)
        .map(|_| LeadAcc { err: ErrSums::default(), counts: vec![Counts::default(); opts.thresholds.len()] })
        .collect();
    for sample in &per {
        for (acc, l) in pooled.iter_mut().zip(sample) {
            acc.err.add(&l.err);
            for (a, c) in acc.counts.iter_mut().zip(&l.counts) {
                a.add(c);
            }
        }
    }
    let per_sample = samples
        .iter()
        .zip(&per)
        .map(|(s, leads)| SampleReport {
            id: s.id.clone(),
            leads: leads.iter().enumerate().map(|(i, a)| lead_report(i + 1, a, &opts.thresholds)).collect(),
        })
        .collect();
    Ok(VerificationReport {
        thresholds: opts.thresholds.clone(),
        samples: samples.len(),
        leads: pooled.iter().enumerate().map(|(i, a)| lead_report(i + 1, a, &opts.thresholds)).collect(),
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;

    fn mmh(plane: Array2<f64>) -> RainField {
        RainField::from_plane(plane, Space::Mmh, None).unwrap()
    }

    #[test]
    fn continuous_examples() {
        let obs = mmh(Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f64));
        assert_eq!(continuous_metrics(&obs, &obs).unwrap(), Continuous { me: 0.0, mae: 0.0, mse: 0.0 });
        let shifted = mmh(obs.level(0).mapv(|v| v + 2.0));
        let c = continuous_metrics(&shifted, &obs).unwrap();
        assert_eq!((c.me, c.mae, c.mse), (2.0, 2.0, 4.0));
    }

    #[test]
    fn sign_flip_cancels_in_mean_only() {
        let obs = Array2::from_shape_fn((4, 4), |(y, x)| if (x + y) % 2 == 0 { 1.0 } else { -1.0 });
        let pred = obs.mapv(|v| -v);
        let d = |a: Array2<f64>| RainField::from_plane(a.mapv(|v| v + 1.0), Space::Mmh, None).unwrap();
        // shift both by one so the values are admissible rain rates
        let c = continuous_metrics(&d(pred), &d(obs)).unwrap();
        assert_eq!((c.me, c.mae, c.mse), (0.0, 2.0, 4.0));
    }

    #[test]
    fn empty_joint_mask_is_no_overlap() {
        let a = RainField::new(Array3::zeros((1, 2, 2)), Space::Mmh, Array3::from_elem((1, 2, 2), false)).unwrap();
        assert!(matches!(continuous_metrics(&a, &a), Err(Error::NoOverlap)));
    }

    #[test]
    fn all_yes_forecast_counts() {
        let obs = mmh(Array2::from_shape_fn((10, 100), |(y, x)| if y * 100 + x < 60 { 3.0 } else { 0.0 }));
        let pred = mmh(Array2::from_elem((10, 100), 3.0));
        let t = contingency(&pred, &obs, 1.0).unwrap();
        assert_eq!(t.counts, Counts { hits: 60, misses: 0, false_alarms: 940, correct_negatives: 0 });
        assert_eq!(precision_recall_ets(&t.counts).ets, Some(0.0));
        let high = contingency(&pred, &obs, 100.0).unwrap();
        assert_eq!(high.counts.correct_negatives, 1000);
    }

    #[test]
    fn hand_computed_scores() {
        let c = Counts { hits: 50, misses: 10, false_alarms: 10, correct_negatives: 930 };
        let s = precision_recall_ets(&c);
        // hits by chance: 60 * 60 / 1000
        let rand = 3.6;
        assert!((s.precision.unwrap() - 50.0 / 60.0).abs() < 1e-12);
        assert!((s.recall.unwrap() - 50.0 / 60.0).abs() < 1e-12);
        assert!((s.ets.unwrap() - (50.0 - rand) / (70.0 - rand)).abs() < 1e-12);
        assert!((s.ets.unwrap() - 0.6988).abs() < 1e-4);
    }

    #[test]
    fn degenerate_denominators_are_none() {
        let s = precision_recall_ets(&Counts { correct_negatives: 10, ..Default::default() });
        assert_eq!(s, Scores { precision: None, recall: None, ets: None });
        let perfect = precision_recall_ets(&Counts { hits: 5, correct_negatives: 5, ..Default::default() });
        assert_eq!(perfect, Scores { precision: Some(1.0), recall: Some(1.0), ets: Some(1.0) });
    }

    #[test]
    fn threshold_ties_count_as_yes() {
        let a = mmh(Array2::from_elem((1, 1), 1.0));
        assert_eq!(contingency(&a, &a, 1.0).unwrap().counts.hits, 1);
    }

    #[test]
    fn persistence_of_stationary_scene_is_perfect() {
        let f = mmh(Array2::from_shape_fn((8, 8), |(y, x)| if x > 3 && y > 2 { 12.0 } else { 0.0 }));
        let sample = NowcastSample { id: "s".into(), forecasts: vec![f.clone(); 4], observations: vec![f; 4] };
        let rep = verify_nowcast(&[sample], &VerifyOptions::default()).unwrap();
        assert_eq!(rep.leads.len(), 4);
        for l in &rep.leads {
            assert!(l.scores.iter().all(|s| s.ets == Some(1.0)));
            assert_eq!(l.continuous.unwrap().mae, 0.0);
        }
    }

    #[test]
    fn micro_average_pools_counts() {
        let obs = mmh(Array2::from_shape_fn((4, 4), |(y, _)| if y < 2 { 6.0 } else { 0.0 }));
        let p1 = mmh(Array2::from_elem((4, 4), 6.0));
        let p2 = mmh(Array2::zeros((4, 4)));
        let s = |id: &str, p: &RainField| NowcastSample { id: id.into(), forecasts: vec![p.clone()], observations: vec![obs.clone()] };
        let rep = verify_nowcast(&[s("a", &p1), s("b", &p2)], &VerifyOptions::default()).unwrap();
        let pooled = rep.leads[0].tables[0].counts;
        let a = rep.per_sample[0].leads[0].tables[0].counts;
        let b = rep.per_sample[1].leads[0].tables[0].counts;
        assert_eq!(pooled.hits, a.hits + b.hits);
        assert_eq!(pooled.misses, a.misses + b.misses);
        assert_eq!(pooled.false_alarms, a.false_alarms + b.false_alarms);
        assert_eq!(pooled.total(), 32);
    }

    #[test]
    fn volumetric_forecasts_are_column_max_pooled() {
        let mut d = Array3::zeros((2, 3, 3));
        d[[1, 1, 1]] = 7.0;
        let vol = RainField::from_data(d, Space::Mmh).unwrap();
        let flat = mmh(Array2::from_shape_fn((3, 3), |(y, x)| if (y, x) == (1, 1) { 7.0 } else { 0.0 }));
        let sample = NowcastSample { id: "v".into(), forecasts: vec![vol], observations: vec![flat] };
        let rep = verify_nowcast(&[sample], &VerifyOptions::default()).unwrap();
        assert_eq!(rep.leads[0].continuous.unwrap().mae, 0.0);
    }

    fn arb_counts() -> impl Strategy<Value = Counts> {
        (0u64..500, 0u64..500, 0u64..500, 0u64..500).prop_map(|(h, m, f, c)| Counts {
            hits: h,
            misses: m,
            false_alarms: f,
            correct_negatives: c,
        })
    }

    proptest! {
        #[test]
        fn ets_bounded_by_recall(c in arb_counts()) {
            let s = precision_recall_ets(&c);
            if let (Some(e), Some(r)) = (s.ets, s.recall) {
                prop_assert!(e <= r + 1e-12);
                prop_assert!(e <= 1.0 + 1e-12);
                prop_assert!(e > -1.0 / 3.0 - 1e-12);
            }
            if let Some(p) = s.precision {
                prop_assert!((0.0..=1.0).contains(&p));
            }
        }

        #[test]
        fn constant_forecasts_have_no_skill(yes in 0u64..300, no in 1u64..300, all_yes in any::<bool>()) {
            let c = if all_yes {
                Counts { hits: yes, false_alarms: no, ..Default::default() }
            } else {
                Counts { misses: yes, correct_negatives: no, ..Default::default() }
            };
            if let Some(e) = precision_recall_ets(&c).ets {
                prop_assert!(e.abs() < 1e-12);
            }
        }

        #[test]
        fn identical_masking_keeps_metrics(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Array3::from_shape_fn((1, 6, 6), |_| rng.gen_range(0.0..20.0));
            let b = Array3::from_shape_fn((1, 6, 6), |_| rng.gen_range(0.0..20.0));
            let mask = Array3::from_shape_fn((1, 6, 6), |_| rng.gen_bool(0.7));
            let full_mask = Array3::from_elem((1, 6, 6), true);
            let ma = RainField::new(a.clone(), Space::Mmh, mask.clone()).unwrap();
            let mb = RainField::new(b.clone(), Space::Mmh, mask.clone()).unwrap();
            let mb_full = RainField::new(b, Space::Mmh, full_mask).unwrap();
            // masking one side is equivalent to masking both
            let one = contingency(&ma, &mb_full, 5.0).unwrap();
            let both = contingency(&ma, &mb, 5.0).unwrap();
            prop_assert_eq!(one.counts, both.counts);
        }
    }
}
