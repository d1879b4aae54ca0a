//! Ground-truth session generator.
//!
//! A preference field made of unnormalized von Mises–Fisher lobes drives
//! both streams: fixation targets are drawn from a Fibonacci-sphere candidate
//! set with probability `∝ exp(λ · field)`, fixations on liked regions last
//! longer, and emotion indices follow the field at the fixated direction.

use std::f64::consts::PI;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Vec3, DEFAULT_RADIUS};
use crate::session::{
    write_session, EmotionSample, GazeSample, SessionError, SessionLog, SessionManifest, DEFAULT_EMOTION_RATE,
    DEFAULT_GAZE_RATE,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error("invalid lobe: {0}")]
    Lobe(String),
    #[error("bad scenario file: {0}")]
    Scenario(String),
    #[error(transparent)]
    Session(#[from] SessionError),
}

/// One bump of the preference field: `amplitude · exp(kappa · (mu·d − 1))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceLobe {
    pub mu: Vec3,
    pub kappa: f64,
    pub amplitude: f64,
}

impl PreferenceLobe {
    /// Normalizes `mu`; rejects non-positive `kappa` or `|amplitude| > 1`.
    pub fn new(mu: Vec3, kappa: f64, amplitude: f64) -> Result<Self, SimError> {
        let mu = mu.normalized().map_err(|e| SimError::Lobe(format!("mu: {e}")))?;
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(SimError::Lobe(format!("kappa must be positive, got {kappa}")));
        }
        if !(-1.0..=1.0).contains(&amplitude) {
            return Err(SimError::Lobe(format!("amplitude {amplitude} outside [-1, 1]")));
        }
        Ok(PreferenceLobe { mu, kappa, amplitude })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PreferenceField {
    pub lobes: Vec<PreferenceLobe>,
}

impl PreferenceField {
    pub fn new(lobes: Vec<PreferenceLobe>) -> Self {
        PreferenceField { lobes }
    }

    pub fn positive_centers(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.lobes.iter().filter(|l| l.amplitude > 0.0).map(|l| l.mu)
    }

    pub fn negative_centers(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.lobes.iter().filter(|l| l.amplitude < 0.0).map(|l| l.mu)
    }
}

/// `clamp(Σ amplitude · exp(kappa · (mu·d − 1)), −1, 1)` for a unit direction.
pub fn field_value(field: &PreferenceField, direction: Vec3) -> f64 {
    field
        .lobes
        .iter()
        .map(|l| l.amplitude * (l.kappa * (l.mu.dot(direction) - 1.0)).exp())
        .sum::<f64>()
        .clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub session_id: String,
    pub location_id: String,
    pub duration_s: f64,
    pub gaze_rate_hz: f64,
    pub emotion_rate_hz: f64,
    /// Fixation length on a neutral or disliked target.
    pub fixation_min_s: f64,
    /// Fixation length on a target where the field is +1.
    pub fixation_max_s: f64,
    /// λ in the target weight `exp(λ · field)`.
    pub attraction: f64,
    pub emotion_gain: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Angular std-dev (radians) of per-sample gaze jitter within a fixation.
    pub jitter_std: f64,
    pub candidate_count: usize,
    pub cap_half_angle_deg: f64,
    /// Delay between fixating a direction and the emotion indices reflecting it.
    pub emotion_lag_s: f64,
    pub sphere_radius: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            session_id: "sim".into(),
            location_id: "sim-location".into(),
            duration_s: 600.0,
            gaze_rate_hz: DEFAULT_GAZE_RATE,
            emotion_rate_hz: DEFAULT_EMOTION_RATE,
            fixation_min_s: 0.2,
            fixation_max_s: 1.0,
            attraction: 5.0,
            emotion_gain: 0.4,
            noise_std: 0.05,
            seed: 42,
            jitter_std: 0.0,
            candidate_count: 1024,
            cap_half_angle_deg: 120.0,
            emotion_lag_s: 0.0,
            sphere_radius: DEFAULT_RADIUS,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if !positive(self.duration_s) || !positive(self.gaze_rate_hz) || !positive(self.emotion_rate_hz) {
            return bad("duration and rates must be positive".into());
        }
        if !positive(self.fixation_min_s) || self.fixation_max_s.partial_cmp(&self.fixation_min_s).is_none_or(|o| o.is_lt()) {
            return bad(format!(
                "fixation range must satisfy 0 < min <= max, got [{}, {}]",
                self.fixation_min_s, self.fixation_max_s
            ));
        }
        if !self.attraction.is_finite() || !non_negative(self.emotion_gain) || !non_negative(self.noise_std) {
            return bad("attraction, emotion_gain and noise_std must be finite (gain and noise non-negative)".into());
        }
        if !non_negative(self.jitter_std) || !non_negative(self.emotion_lag_s) {
            return bad("jitter_std and emotion_lag_s must be non-negative".into());
        }
        if self.candidate_count == 0 || !(self.cap_half_angle_deg > 0.0 && self.cap_half_angle_deg <= 180.0) {
            return bad("candidate_count must be positive and the cap half-angle in (0, 180]".into());
        }
        if !positive(self.sphere_radius) {
            return bad(format!("sphere_radius must be positive, got {}", self.sphere_radius));
        }
        Ok(())
    }

    pub fn gaze_count(&self) -> usize {
        (self.duration_s * self.gaze_rate_hz).round() as usize
    }

    pub fn emotion_count(&self) -> usize {
        (self.duration_s * self.emotion_rate_hz).round() as usize
    }

    pub fn manifest(&self) -> SessionManifest {
        SessionManifest {
            emotion_rate_hz: self.emotion_rate_hz,
            gaze_rate_hz: self.gaze_rate_hz,
            sphere_radius: self.sphere_radius,
            ..SessionManifest::new(self.session_id.clone(), self.location_id.clone(), self.duration_s)
        }
    }
}

/// Scenario file: lobes plus any [`SimConfig`] field at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub lobes: Vec<PreferenceLobe>,
    #[serde(flatten)]
    pub config: SimConfig,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let raw: Scenario = serde_json::from_str(text).map_err(|e| SimError::Scenario(e.to_string()))?;
        let lobes = raw
            .lobes
            .iter()
            .map(|l| PreferenceLobe::new(l.mu, l.kappa, l.amplitude))
            .collect::<Result<_, _>>()?;
        raw.config.validate()?;
        Ok(Scenario {
            lobes,
            config: raw.config,
        })
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Scenario(format!("{}: {e}", path.display())))?;
        Scenario::from_json(&text)
    }

    pub fn field(&self) -> PreferenceField {
        PreferenceField::new(self.lobes.clone())
    }
}

/// `n` quasi-uniform directions on the unit sphere (golden-angle spiral).
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), y, r * phi.sin())
        })
        .collect()
}

/// Fibonacci directions within `half_angle_deg` of the forward (+z) axis.
pub fn candidate_directions(count: usize, half_angle_deg: f64) -> Vec<Vec3> {
    let min_z = half_angle_deg.to_radians().cos();
    fibonacci_sphere(count)
        .into_iter()
        .filter(|d| d.z >= min_z - 1e-12)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fixation {
    /// Index of the first gaze sample.
    pub start: usize,
    pub len: usize,
    pub candidate: usize,
    pub direction: Vec3,
    pub field_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scanpath {
    pub samples: Vec<GazeSample>,
    pub fixations: Vec<Fixation>,
    pub candidates: Vec<Vec3>,
}

fn jittered(d: Vec3, std: f64, rng: &mut ChaCha8Rng) -> Vec3 {
    let n = Vec3::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    );
    let tangent = n - d * n.dot(d);
    (d + tangent * std).normalized().unwrap_or(d)
}

/// Fixation/saccade scanpath over the whole session. Saccades are
/// instantaneous; every sample belongs to some fixation.
pub fn simulate_scanpath(field: &PreferenceField, cfg: &SimConfig) -> Result<Scanpath, SimError> {
    cfg.validate()?;
    let candidates = candidate_directions(cfg.candidate_count, cfg.cap_half_angle_deg);
    if candidates.is_empty() {
        return Err(SimError::Config("no candidate directions inside the cap".into()));
    }
    let values: Vec<f64> = candidates.iter().map(|&c| field_value(field, c)).collect();
    // Shift by the max exponent so weights stay finite for any λ.
    let top = values.iter().map(|v| cfg.attraction * v).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = values.iter().map(|v| (cfg.attraction * v - top).exp()).collect();
    let picker = WeightedIndex::new(&weights).map_err(|e| SimError::Config(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.gaze_count();
    let mut samples = Vec::with_capacity(total);
    let mut fixations = Vec::new();
    let span = cfg.fixation_max_s - cfg.fixation_min_s;

    while samples.len() < total {
        let j = picker.sample(&mut rng);
        let v = values[j];
        let seconds = cfg.fixation_min_s + span * v.max(0.0);
        let len = ((seconds * cfg.gaze_rate_hz).round() as usize).clamp(1, total - samples.len());
        let start = samples.len();
        for i in start..start + len {
            let dir = if cfg.jitter_std > 0.0 {
                jittered(candidates[j], cfg.jitter_std, &mut rng)
            } else {
                candidates[j]
            };
            samples.push(GazeSample {
                t: i as f64 / cfg.gaze_rate_hz,
                point: dir * cfg.sphere_radius,
            });
        }
        fixations.push(Fixation {
            start,
            len,
            candidate: j,
            direction: candidates[j],
            field_value: v,
        });
    }
    Ok(Scanpath {
        samples,
        fixations,
        candidates,
    })
}

/// Emotion stream driven by the field value at the fixated direction.
///
/// Uses its own ChaCha8 stream (stream id 1 under the same seed), so changing
/// the noise does not perturb the scanpath.
pub fn simulate_emotions(
    field: &PreferenceField,
    scanpath: &Scanpath,
    cfg: &SimConfig,
) -> Result<Vec<EmotionSample>, SimError> {
    cfg.validate()?;
    let gazes = &scanpath.samples;
    if gazes.is_empty() {
        return Err(SimError::Config("scanpath is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut noise = || -> f64 {
        if cfg.noise_std > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * cfg.noise_std
        } else {
            0.0
        }
    };
    let g = cfg.emotion_gain;
    let n = cfg.emotion_count();
    let mut out = Vec::with_capacity(n);
    let mut cursor = 0usize;
    for k in 0..n {
        let t = k as f64 / cfg.emotion_rate_hz;
        let seen = t - cfg.emotion_lag_s;
        while cursor + 1 < gazes.len() && gazes[cursor + 1].t <= seen {
            cursor += 1;
        }
        let dir = gazes[cursor].point.normalized().map_err(|e| SimError::Config(e.to_string()))?;
        let v = field_value(field, dir);
        let stress = (0.5 - g * v + noise()).clamp(0.0, 1.0);
        let engagement = (0.5 + noise()).clamp(0.0, 1.0);
        let interest = (0.5 + g * v + noise()).clamp(0.0, 1.0);
        let excitement = (0.5 + noise()).clamp(0.0, 1.0);
        let focus = (0.5 + noise()).clamp(0.0, 1.0);
        let relaxation = (0.5 + noise()).clamp(0.0, 1.0);
        out.push(EmotionSample {
            t,
            stress,
            engagement,
            interest,
            excitement,
            focus,
            relaxation,
        });
    }
    Ok(out)
}

/// A complete simulated session.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSession {
    pub scanpath: Scanpath,
    pub log: SessionLog,
    pub manifest: SessionManifest,
}

pub fn simulate_session(field: &PreferenceField, cfg: &SimConfig) -> Result<SimulatedSession, SimError> {
    let scanpath = simulate_scanpath(field, cfg)?;
    let emotions = simulate_emotions(field, &scanpath, cfg)?;
    let manifest = cfg.manifest();
    let log = SessionLog {
        session_id: cfg.session_id.clone(),
        location_id: cfg.location_id.clone(),
        duration: cfg.duration_s,
        emotion_rate: cfg.emotion_rate_hz,
        gaze_rate: cfg.gaze_rate_hz,
        sphere: manifest.sphere()?,
        emotions,
        gazes: scanpath.samples.clone(),
    };
    Ok(SimulatedSession { scanpath, log, manifest })
}

/// Writes the session in the session I/O formats: `emotions.csv`,
/// `gaze.csv` and `session.json` under `out_dir`.
pub fn emit_session(session: &SimulatedSession, out_dir: &Path) -> Result<(), SimError> {
    write_session(&session.log, &session.manifest, out_dir)?;
    Ok(())
}
