//! Feature dataset, sigmoid preference model and top/bottom extraction.
//!
//! Each aligned gaze sample becomes a record with three per-session min-max
//! normalized features: interest, stress and `log1p(dwell)`. A composite
//! target `s* = (f_interest + (1 - f_stress) + f_dwell) / 3` is regressed by a
//! single sigmoid unit trained with per-sample SGD on squared error. The
//! trained scores are then deduplicated by bin and the extremes extracted.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dwell::{quantize, BinKey, DwellError, DwellMap};
use crate::geometry::Vec3;
use crate::session::AlignedSample;

pub const DEFAULT_LEARNING_RATE: f64 = 0.1;
pub const DEFAULT_EPOCHS: usize = 200;
pub const DEFAULT_K: usize = 30;
pub const DEFAULT_SEED: u64 = 42;

pub const RANKED_HEADER: &str = "rank,score,preference,x,y,z,t";

#[derive(Debug, Error)]
pub enum RankingError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("gaze point {0} has no dwell bin; aligned stream and dwell map come from different sessions")]
    MissingBin(Vec3),
    #[error(transparent)]
    Dwell(#[from] DwellError),
    #[error("all {0} targets are equal; nothing to learn (score with the oracle directly instead)")]
    Degenerate(usize),
    #[error("need at least 2 training records, got {0}")]
    TooFewRecords(usize),
    #[error("{features} feature vectors but {targets} targets")]
    LengthMismatch { features: usize, targets: usize },
    #[error("not enough distinct bins: need {required}, have {available}")]
    TooFewBins { required: usize, available: usize },
    #[error("invalid hyperparameter: {0}")]
    BadHyperparameter(String),
    #[error("ranked CSV line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One gaze sample with its time-aligned emotion state and bin dwell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedRecord {
    pub t: f64,
    pub point: Vec3,
    pub key: BinKey,
    pub interest: f64,
    pub stress: f64,
    /// Cumulative dwell of `key` in seconds.
    pub dwell: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureVector {
    pub f_interest: f64,
    pub f_stress: f64,
    pub f_dwell: f64,
}

impl FeatureVector {
    pub fn new(f_interest: f64, f_stress: f64, f_dwell: f64) -> Self {
        FeatureVector {
            f_interest,
            f_stress,
            f_dwell,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.f_interest, self.f_stress, self.f_dwell]
    }
}

/// Min-max bounds of one feature over a session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    fn fit(values: impl Iterator<Item = f64>) -> Option<Self> {
        values.fold(None, |acc, v| match acc {
            None => Some(MinMax { min: v, max: v }),
            Some(m) => Some(MinMax {
                min: m.min.min(v),
                max: m.max.max(v),
            }),
        })
    }

    /// Maps into `[0, 1]`; a constant feature maps to 0.5.
    pub fn apply(&self, v: f64) -> f64 {
        if self.max > self.min {
            ((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
        } else {
            0.5
        }
    }
}

/// Normalization constants recorded with a dataset. `log_dwell` bounds are
/// over `ln(1 + dwell)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub interest: MinMax,
    pub stress: MinMax,
    pub log_dwell: MinMax,
}

impl Normalization {
    pub fn features(&self, interest: f64, stress: f64, dwell: f64) -> FeatureVector {
        FeatureVector {
            f_interest: self.interest.apply(interest),
            f_stress: self.stress.apply(stress),
            f_dwell: self.log_dwell.apply(dwell.ln_1p()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<FusedRecord>,
    pub features: Vec<FeatureVector>,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Builds a dataset from already-fused records.
    pub fn from_records(records: Vec<FusedRecord>) -> Result<Self, RankingError> {
        let normalization = Normalization {
            interest: MinMax::fit(records.iter().map(|r| r.interest)).ok_or(RankingError::Empty("records"))?,
            stress: MinMax::fit(records.iter().map(|r| r.stress)).ok_or(RankingError::Empty("records"))?,
            log_dwell: MinMax::fit(records.iter().map(|r| r.dwell.ln_1p())).ok_or(RankingError::Empty("records"))?,
        };
        let features = records
            .iter()
            .map(|r| normalization.features(r.interest, r.stress, r.dwell))
            .collect();
        Ok(Dataset {
            records,
            features,
            normalization,
        })
    }
}

/// Joins the aligned stream with per-bin dwell and normalizes features.
pub fn build_dataset(aligned: &[AlignedSample], dwell: &DwellMap) -> Result<Dataset, RankingError> {
    if aligned.is_empty() {
        return Err(RankingError::Empty("aligned stream"));
    }
    let records = aligned
        .iter()
        .map(|a| {
            let key = quantize(a.point, dwell.step())?;
            let rec = dwell.get(&key).ok_or(RankingError::MissingBin(a.point))?;
            Ok(FusedRecord {
                t: a.t,
                point: a.point,
                key,
                interest: a.interest,
                stress: a.stress,
                dwell: rec.delay_time,
            })
        })
        .collect::<Result<Vec<_>, RankingError>>()?;
    Dataset::from_records(records)
}

/// Relative weights of the composite target. The score is
/// `(wi·f_interest + ws·(1 − f_stress) + wd·f_dwell) / (wi + ws + wd)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleWeights {
    pub interest: f64,
    pub stress: f64,
    pub dwell: f64,
}

impl Default for OracleWeights {
    fn default() -> Self {
        OracleWeights {
            interest: 1.0,
            stress: 1.0,
            dwell: 1.0,
        }
    }
}

impl OracleWeights {
    pub fn validate(&self) -> Result<(), RankingError> {
        let w = [self.interest, self.stress, self.dwell];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(RankingError::BadHyperparameter(format!(
                "oracle weights must be non-negative with a positive sum, got {w:?}"
            )));
        }
        Ok(())
    }

    pub fn score(&self, fv: &FeatureVector) -> f64 {
        let total = self.interest + self.stress + self.dwell;
        (self.interest * fv.f_interest + self.stress * (1.0 - fv.f_stress) + self.dwell * fv.f_dwell) / total
    }
}

/// Composite preference target with equal weights.
pub fn oracle_score(fv: &FeatureVector) -> f64 {
    (fv.f_interest + (1.0 - fv.f_stress) + fv.f_dwell) / 3.0
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: DEFAULT_EPOCHS,
            seed: DEFAULT_SEED,
        }
    }
}

/// Single sigmoid unit `σ(w·x + b)` over the three features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingModel {
    pub w: [f64; 3],
    pub b: f64,
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Mean squared error over the dataset after each epoch.
    pub loss_trace: Vec<f64>,
}

impl RankingModel {
    /// An untrained model with the given parameters.
    pub fn with_params(w: [f64; 3], b: f64) -> Self {
        RankingModel {
            w,
            b,
            seed: 0,
            epochs: 0,
            learning_rate: 0.0,
            loss_trace: Vec::new(),
        }
    }

    fn logit(&self, x: &[f64; 3]) -> f64 {
        self.w[0] * x[0] + self.w[1] * x[1] + self.w[2] * x[2] + self.b
    }
}

pub fn predict(model: &RankingModel, fv: &FeatureVector) -> f64 {
    sigmoid(model.logit(&fv.as_array()))
}

fn mean_squared_error(model: &RankingModel, features: &[[f64; 3]], targets: &[f64]) -> f64 {
    let sum: f64 = features
        .iter()
        .zip(targets)
        .map(|(x, y)| {
            let e = sigmoid(model.logit(x)) - y;
            e * e
        })
        .sum();
    sum / features.len() as f64
}

/// Fits the sigmoid unit by per-sample SGD on `½(σ(w·x + b) − y)²`, starting
/// from zero parameters. The visiting order is reshuffled every epoch from a
/// ChaCha8 stream seeded with `cfg.seed`, so training is bit-reproducible.
pub fn train(features: &[FeatureVector], targets: &[f64], cfg: &TrainConfig) -> Result<RankingModel, RankingError> {
    if features.len() != targets.len() {
        return Err(RankingError::LengthMismatch {
            features: features.len(),
            targets: targets.len(),
        });
    }
    if features.len() < 2 {
        return Err(RankingError::TooFewRecords(features.len()));
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return Err(RankingError::BadHyperparameter(format!(
            "learning_rate must be positive, got {}",
            cfg.learning_rate
        )));
    }
    if targets.iter().all(|&y| y == targets[0]) {
        return Err(RankingError::Degenerate(targets.len()));
    }

    let xs: Vec<[f64; 3]> = features.iter().map(FeatureVector::as_array).collect();
    let mut model = RankingModel {
        w: [0.0; 3],
        b: 0.0,
        seed: cfg.seed,
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        loss_trace: Vec::with_capacity(cfg.epochs),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let lr = cfg.learning_rate;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let x = &xs[i];
            let p = sigmoid(model.logit(x));
            let g = (p - targets[i]) * p * (1.0 - p);
            for (w, xi) in model.w.iter_mut().zip(x) {
                *w -= lr * g * xi;
            }
            model.b -= lr * g;
        }
        model.loss_trace.push(mean_squared_error(&model, &xs, targets));
    }
    Ok(model)
}

/// A scored gaze sample ready for ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredRecord {
    pub t: f64,
    pub point: Vec3,
    pub key: BinKey,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedPoint {
    pub rank: usize,
    pub point: Vec3,
    pub score: f64,
    /// `200·score − 100`, in `[-100, 100]`.
    pub preference: f64,
    pub t: f64,
}

pub fn preference_from_score(score: f64) -> f64 {
    200.0 * score - 100.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extremes {
    pub top: Vec<RankedPoint>,
    pub bottom: Vec<RankedPoint>,
}

impl Extremes {
    pub fn all_points(&self) -> impl Iterator<Item = &RankedPoint> {
        self.top.iter().chain(self.bottom.iter())
    }
}

fn tie_break(a: &ScoredRecord, b: &ScoredRecord) -> Ordering {
    a.t.total_cmp(&b.t).then_with(|| a.key.cmp(&b.key))
}

/// Keeps each bin's highest-scoring record (earliest on equal score), in
/// ascending key order.
pub fn dedup_by_bin(records: &[ScoredRecord]) -> Vec<ScoredRecord> {
    let mut best: HashMap<BinKey, ScoredRecord> = HashMap::with_capacity(records.len() / 4 + 1);
    for r in records {
        best.entry(r.key)
            .and_modify(|cur| {
                let better = r.score.total_cmp(&cur.score).then_with(|| tie_break(cur, r));
                if better == Ordering::Greater {
                    *cur = *r;
                }
            })
            .or_insert(*r);
    }
    let mut out: Vec<_> = best.into_values().collect();
    out.sort_by_key(|r| r.key);
    out
}

/// Top-k by descending score and bottom-k by ascending score over distinct
/// bins. Ties go to the earlier sample, then the lexicographically smaller bin.
pub fn rank_extremes(records: &[ScoredRecord], k_top: usize, k_bottom: usize) -> Result<Extremes, RankingError> {
    let distinct = dedup_by_bin(records);
    let required = k_top + k_bottom;
    if distinct.len() < required {
        return Err(RankingError::TooFewBins {
            required,
            available: distinct.len(),
        });
    }
    let mut by_desc = distinct.clone();
    by_desc.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| tie_break(a, b)));
    let mut by_asc = distinct;
    by_asc.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| tie_break(a, b)));

    let to_ranked = |list: &[ScoredRecord], k: usize| {
        list.iter()
            .take(k)
            .enumerate()
            .map(|(i, r)| RankedPoint {
                rank: i + 1,
                point: r.point,
                score: r.score,
                preference: preference_from_score(r.score),
                t: r.t,
            })
            .collect::<Vec<_>>()
    };
    Ok(Extremes {
        top: to_ranked(&by_desc, k_top),
        bottom: to_ranked(&by_asc, k_bottom),
    })
}

pub fn write_ranked<W: Write>(mut w: W, points: &[RankedPoint]) -> io::Result<()> {
    writeln!(w, "{RANKED_HEADER}")?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            p.rank, p.score, p.preference, p.point.x, p.point.y, p.point.z, p.t
        )?;
    }
    w.flush()
}

pub fn read_ranked<R: Read>(reader: R) -> Result<Vec<RankedPoint>, RankingError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| RankingError::Parse { line: 1, reason: e.to_string() })?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != RANKED_HEADER {
        return Err(RankingError::Parse {
            line: 1,
            reason: format!("expected header `{RANKED_HEADER}`, found `{header}`"),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| RankingError::Parse { line: 0, reason: e.to_string() })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |reason: String| RankingError::Parse { line, reason };
        let num = |i: usize| -> Result<f64, RankingError> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("column {} is not a finite real", i + 1)))
        };
        let rank = rec
            .get(0)
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| bad("rank is not a positive integer".into()))?;
        let preference = num(2)?;
        if !(-100.0..=100.0).contains(&preference) {
            return Err(bad(format!("preference {preference} outside [-100, 100]")));
        }
        out.push(RankedPoint {
            rank,
            score: num(1)?,
            preference,
            point: Vec3::new(num(3)?, num(4)?, num(5)?),
            t: num(6)?,
        });
    }
    Ok(out)
}
