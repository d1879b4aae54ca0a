//! Coordinate quantization and per-bin dwell time ("DelayTime").
//!
//! Every gaze sample counts exactly `1 / gaze_rate` seconds towards the bin
//! of its rounded coordinate. Dwell is cumulative over the session, so the
//! result does not depend on sample order.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::{self, Write};

use thiserror::Error;

use crate::geometry::Vec3;
use crate::session::GazeSample;

pub const DEFAULT_STEP: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DwellError {
    #[error("quantization step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("cannot quantize non-finite point {0}")]
    NonFinite(Vec3),
    #[error("gaze rate must be positive, got {0}")]
    BadRate(f64),
    #[error("bins built with different steps cannot be merged")]
    StepMismatch,
}

/// A positive quantization step. Compared and hashed by bit pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step(f64);

impl Step {
    pub fn new(step: f64) -> Result<Self, DwellError> {
        if step.is_finite() && step > 0.0 {
            Ok(Step(step))
        } else {
            Err(DwellError::BadStep(step))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// Decimal places needed to print a multiple of this step exactly.
    pub fn decimals(self) -> usize {
        (0..=12)
            .find(|&d| {
                let scaled = self.0 * 10f64.powi(d as i32);
                (scaled - scaled.round()).abs() < 1e-9 * scaled.max(1.0)
            })
            .unwrap_or(12)
    }
}

impl Default for Step {
    fn default() -> Self {
        Step(DEFAULT_STEP)
    }
}

impl Eq for Step {}

impl Hash for Step {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state);
    }
}

impl Ord for Step {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl PartialOrd for Step {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A quantized coordinate, stored as integer multiples of the step.
///
/// Ordering is lexicographic on `(qx, qy, qz)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BinKey {
    pub ix: i64,
    pub iy: i64,
    pub iz: i64,
    pub step: Step,
}

impl BinKey {
    pub fn qx(&self) -> f64 {
        self.ix as f64 * self.step.0
    }
    pub fn qy(&self) -> f64 {
        self.iy as f64 * self.step.0
    }
    pub fn qz(&self) -> f64 {
        self.iz as f64 * self.step.0
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(self.qx(), self.qy(), self.qz())
    }

    /// Rebuilds a key from already-quantized components, e.g. read back from
    /// a CSV. Fails if a component is not a multiple of `step`.
    pub fn from_quantized(q: Vec3, step: Step) -> Result<Self, DwellError> {
        let key = quantize(q, step)?;
        let c = key.center();
        let tol = 1e-6 * step.0.max(1.0);
        if (c.x - q.x).abs() > tol || (c.y - q.y).abs() > tol || (c.z - q.z).abs() > tol {
            return Err(DwellError::StepMismatch);
        }
        Ok(key)
    }
}

impl fmt::Display for BinKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.step.decimals();
        write!(f, "{:.d$},{:.d$},{:.d$}", self.qx(), self.qy(), self.qz())
    }
}

/// Rounds each component to the nearest multiple of `step`, ties away from
/// zero.
pub fn quantize(point: Vec3, step: Step) -> Result<BinKey, DwellError> {
    if !point.is_finite() {
        return Err(DwellError::NonFinite(point));
    }
    let q = |v: f64| (v / step.0).round() as i64;
    Ok(BinKey {
        ix: q(point.x),
        iy: q(point.y),
        iz: q(point.z),
        step,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DwellRecord {
    pub key: BinKey,
    pub sample_count: u64,
    /// `sample_count / gaze_rate` seconds.
    pub delay_time: f64,
    /// Mean of the member points.
    pub representative_point: Vec3,
    point_sum: Vec3,
}

/// Dwell per bin for one session.
#[derive(Debug, Clone, PartialEq)]
pub struct DwellMap {
    step: Step,
    gaze_rate: f64,
    bins: BTreeMap<BinKey, DwellRecord>,
}

impl DwellMap {
    pub fn new(step: Step, gaze_rate: f64) -> Result<Self, DwellError> {
        if !(gaze_rate.is_finite() && gaze_rate > 0.0) {
            return Err(DwellError::BadRate(gaze_rate));
        }
        Ok(DwellMap {
            step,
            gaze_rate,
            bins: BTreeMap::new(),
        })
    }

    pub fn step(&self) -> Step {
        self.step
    }

    pub fn gaze_rate(&self) -> f64 {
        self.gaze_rate
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn get(&self, key: &BinKey) -> Option<&DwellRecord> {
        self.bins.get(key)
    }

    /// Records in ascending key order.
    pub fn iter(&self) -> impl Iterator<Item = &DwellRecord> {
        self.bins.values()
    }

    pub fn add(&mut self, point: Vec3) -> Result<BinKey, DwellError> {
        let key = quantize(point, self.step)?;
        self.add_counts(key, 1, point);
        Ok(key)
    }

    fn add_counts(&mut self, key: BinKey, count: u64, point_sum: Vec3) {
        let rate = self.gaze_rate;
        let rec = self.bins.entry(key).or_insert(DwellRecord {
            key,
            sample_count: 0,
            delay_time: 0.0,
            representative_point: Vec3::ZERO,
            point_sum: Vec3::ZERO,
        });
        rec.sample_count += count;
        rec.point_sum += point_sum;
        rec.delay_time = rec.sample_count as f64 / rate;
        rec.representative_point = rec.point_sum / rec.sample_count as f64;
    }

    /// Folds another map (e.g. from a parallel chunk) into this one. Bins are
    /// visited in ascending key order.
    pub fn merge(&mut self, other: &DwellMap) -> Result<(), DwellError> {
        if other.step != self.step || other.gaze_rate != self.gaze_rate {
            return Err(DwellError::StepMismatch);
        }
        for rec in other.bins.values() {
            self.add_counts(rec.key, rec.sample_count, rec.point_sum);
        }
        Ok(())
    }

    /// Total number of samples over all bins.
    pub fn total_samples(&self) -> u64 {
        self.bins.values().map(|r| r.sample_count).sum()
    }

    /// Total dwell, computed from the integer sample total so that it equals
    /// `N / gaze_rate` exactly.
    pub fn total_delay_time(&self) -> f64 {
        self.total_samples() as f64 / self.gaze_rate
    }

    /// CSV dump `qx,qy,qz,count,delay_s` in ascending key order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "qx,qy,qz,count,delay_s")?;
        for rec in self.bins.values() {
            writeln!(w, "{},{},{}", rec.key, rec.sample_count, rec.delay_time)?;
        }
        w.flush()
    }
}

/// Accumulates dwell per quantized bin. An empty slice yields an empty map.
pub fn accumulate_dwell(gazes: &[GazeSample], gaze_rate: f64, step: Step) -> Result<DwellMap, DwellError> {
    let mut map = DwellMap::new(step, gaze_rate)?;
    for g in gazes {
        map.add(g.point)?;
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn step(s: f64) -> Step {
        Step::new(s).unwrap()
    }

    fn g(point: Vec3) -> GazeSample {
        GazeSample { t: 0.0, point }
    }

    #[test]
    fn quantize_examples() {
        let k = quantize(Vec3::new(-35.444, -16.605, 95.001), step(0.01)).unwrap();
        assert_eq!((k.ix, k.iy, k.iz), (-3544, -1661, 9500));
        assert_eq!(k.to_string(), "-35.44,-16.61,95.00");

        let k = quantize(Vec3::new(0.005, 0.0, 0.0), step(0.01)).unwrap();
        assert_eq!(k.ix, 1);

        // Oracle: round(x / step) · step, evaluated independently.
        let p = Vec3::new(16.437, 17.012, 100.049);
        let k = quantize(p, step(0.5)).unwrap();
        let oracle = |v: f64| (v / 0.5).round() * 0.5;
        assert_eq!(k.center(), Vec3::new(oracle(p.x), oracle(p.y), oracle(p.z)));
        assert_eq!(k.center(), Vec3::new(16.5, 17.0, 100.0));
    }

    #[test]
    fn quantize_errors() {
        assert!(Step::new(0.0).is_err());
        assert!(Step::new(f64::NAN).is_err());
        assert!(quantize(Vec3::new(f64::INFINITY, 0.0, 0.0), step(0.01)).is_err());
    }

    #[test]
    fn step_decimals() {
        assert_eq!(step(0.01).decimals(), 2);
        assert_eq!(step(0.5).decimals(), 1);
        assert_eq!(step(2.0).decimals(), 0);
    }

    #[test]
    fn five_samples_in_one_bin() {
        let gazes = vec![g(Vec3::new(1.0, 2.0, 3.0)); 5];
        let map = accumulate_dwell(&gazes, 50.0, step(0.01)).unwrap();
        assert_eq!(map.len(), 1);
        let rec = map.iter().next().unwrap();
        assert_eq!(rec.sample_count, 5);
        assert_eq!(rec.delay_time, 5.0 / 50.0);
        assert!((rec.delay_time - 0.10).abs() < 1e-15);
    }

    #[test]
    fn empty_input_gives_empty_map() {
        let map = accumulate_dwell(&[], 50.0, step(0.01)).unwrap();
        assert!(map.is_empty());
        assert_eq!(map.total_delay_time(), 0.0);
    }

    #[test]
    fn alternating_bins() {
        let a = Vec3::new(1.0, 0.0, 0.0);
        let b = Vec3::new(0.0, 1.0, 0.0);
        let gazes: Vec<_> = [a, b, a, b, a].into_iter().map(g).collect();
        let map = accumulate_dwell(&gazes, 50.0, step(0.01)).unwrap();
        let ka = quantize(a, step(0.01)).unwrap();
        let kb = quantize(b, step(0.01)).unwrap();
        // Brute-force count per key.
        let count = |p: Vec3| gazes.iter().filter(|s| s.point == p).count() as f64;
        assert_eq!(map.get(&ka).unwrap().delay_time, count(a) / 50.0);
        assert_eq!(map.get(&kb).unwrap().delay_time, count(b) / 50.0);
        assert!((map.get(&ka).unwrap().delay_time - 0.06).abs() < 1e-15);
        assert!((map.get(&kb).unwrap().delay_time - 0.04).abs() < 1e-15);
    }

    #[test]
    fn representative_point_is_member_mean() {
        let gazes = vec![g(Vec3::new(1.001, 0.0, 0.0)), g(Vec3::new(0.999, 0.0, 0.0))];
        let map = accumulate_dwell(&gazes, 50.0, step(0.01)).unwrap();
        let rec = map.iter().next().unwrap();
        assert!((rec.representative_point.x - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_dump_is_sorted() {
        let gazes: Vec<_> = [Vec3::new(2.0, 0.0, 0.0), Vec3::new(-1.0, 5.0, 0.0), Vec3::new(2.0, 0.0, 0.0)]
            .into_iter()
            .map(g)
            .collect();
        let map = accumulate_dwell(&gazes, 50.0, step(0.01)).unwrap();
        let mut buf = Vec::new();
        map.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "qx,qy,qz,count,delay_s\n-1.00,5.00,0.00,1,0.02\n2.00,0.00,0.00,2,0.04\n"
        );
    }

    #[test]
    fn from_quantized_checks_step() {
        let k = BinKey::from_quantized(Vec3::new(-35.44, 1.0, 95.0), step(0.01)).unwrap();
        assert_eq!(k.ix, -3544);
        assert!(BinKey::from_quantized(Vec3::new(0.25, 0.0, 0.0), step(0.5)).is_err());
    }

    fn points() -> impl Strategy<Value = Vec<Vec3>> {
        proptest::collection::vec(
            (-3i32..3, -3i32..3, -3i32..3, -0.004f64..0.004)
                .prop_map(|(x, y, z, j)| Vec3::new(x as f64 * 0.1 + j, y as f64 * 0.1, z as f64 * 0.1 - j)),
            0..200,
        )
    }

    proptest! {
        #[test]
        fn conservation_and_order_independence(pts in points(), seed in any::<u64>()) {
            let gazes: Vec<_> = pts.iter().copied().map(g).collect();
            let map = accumulate_dwell(&gazes, 50.0, step(0.01)).unwrap();
            prop_assert_eq!(map.total_samples(), gazes.len() as u64);
            prop_assert_eq!(map.total_delay_time(), gazes.len() as f64 / 50.0);
            let float_sum: f64 = map.iter().map(|r| r.delay_time).sum();
            prop_assert!((float_sum - gazes.len() as f64 / 50.0).abs() <= 1e-9 * gazes.len().max(1) as f64);

            let mut shuffled = gazes.clone();
            use rand::{seq::SliceRandom, SeedableRng};
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let other = accumulate_dwell(&shuffled, 50.0, step(0.01)).unwrap();
            let a: HashMap<_, _> = map.iter().map(|r| (r.key, r.delay_time.to_bits())).collect();
            let b: HashMap<_, _> = other.iter().map(|r| (r.key, r.delay_time.to_bits())).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn quantize_is_idempotent(x in -200.0f64..200.0, y in -200.0f64..200.0, z in -200.0f64..200.0, s in prop::sample::select(vec![0.01, 0.05, 0.5, 1.0])) {
            let k = quantize(Vec3::new(x, y, z), step(s)).unwrap();
            prop_assert_eq!(quantize(k.center(), step(s)).unwrap(), k);
            for c in [k.qx(), k.qy(), k.qz()] {
                prop_assert!((c / s - (c / s).round()).abs() < 1e-9);
            }
        }

        #[test]
        fn chunked_merge_matches_sequential(pts in points(), split in 0usize..200) {
            let gazes: Vec<_> = pts.iter().copied().map(g).collect();
            let split = split.min(gazes.len());
            let whole = accumulate_dwell(&gazes, 50.0, step(0.01)).unwrap();
            let mut left = accumulate_dwell(&gazes[..split], 50.0, step(0.01)).unwrap();
            let right = accumulate_dwell(&gazes[split..], 50.0, step(0.01)).unwrap();
            left.merge(&right).unwrap();
            prop_assert_eq!(left.len(), whole.len());
            for (a, b) in left.iter().zip(whole.iter()) {
                prop_assert_eq!(a.key, b.key);
                prop_assert_eq!(a.sample_count, b.sample_count);
                prop_assert_eq!(a.delay_time, b.delay_time);
            }
        }
    }
}
