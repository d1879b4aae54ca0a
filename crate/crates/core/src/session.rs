//! Per-session sensor streams: parsing, validation, canonical serialization
//! and time alignment.
//!
//! Two CSV files make up a session, described by a JSON manifest:
//!
//! - emotion log: `t,stress,engagement,interest,excitement,focus,relaxation`
//! - gaze log: `t,x,y,z`
//!
//! Writers emit a canonical form (shortest round-trip decimal for every
//! real, LF endings), so parsing a written file and writing it again is
//! byte-identical.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{SphereConfig, Vec3, DEFAULT_RADIUS};

pub const EMOTION_HEADER: [&str; 7] = [
    "t",
    "stress",
    "engagement",
    "interest",
    "excitement",
    "focus",
    "relaxation",
];
pub const GAZE_HEADER: [&str; 4] = ["t", "x", "y", "z"];

pub const DEFAULT_EMOTION_RATE: f64 = 60.0;
pub const DEFAULT_GAZE_RATE: f64 = 50.0;

/// Allowed distance between a gaze point and the sphere surface.
pub const ON_SPHERE_TOLERANCE: f64 = 0.5;

/// One classifier record of the six scaled emotion indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmotionSample {
    pub t: f64,
    pub stress: f64,
    pub engagement: f64,
    pub interest: f64,
    pub excitement: f64,
    pub focus: f64,
    pub relaxation: f64,
}

impl EmotionSample {
    /// All indices set to the same value.
    pub fn uniform(t: f64, value: f64) -> Self {
        EmotionSample {
            t,
            stress: value,
            engagement: value,
            interest: value,
            excitement: value,
            focus: value,
            relaxation: value,
        }
    }

    fn indices(&self) -> [(&'static str, f64); 6] {
        [
            ("stress", self.stress),
            ("engagement", self.engagement),
            ("interest", self.interest),
            ("excitement", self.excitement),
            ("focus", self.focus),
            ("relaxation", self.relaxation),
        ]
    }
}

/// A gaze intersection with the environment sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeSample {
    pub t: f64,
    pub point: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub session_id: String,
    pub location_id: String,
    pub duration_s: f64,
    #[serde(default = "default_emotion_rate")]
    pub emotion_rate_hz: f64,
    #[serde(default = "default_gaze_rate")]
    pub gaze_rate_hz: f64,
    #[serde(default = "default_radius")]
    pub sphere_radius: f64,
    /// Emotion CSV, relative to the manifest's directory.
    #[serde(default = "default_emotion_path")]
    pub emotion_path: String,
    /// Gaze CSV, relative to the manifest's directory.
    #[serde(default = "default_gaze_path")]
    pub gaze_path: String,
}

fn default_emotion_rate() -> f64 {
    DEFAULT_EMOTION_RATE
}
fn default_gaze_rate() -> f64 {
    DEFAULT_GAZE_RATE
}
fn default_radius() -> f64 {
    DEFAULT_RADIUS
}
fn default_emotion_path() -> String {
    "emotions.csv".into()
}
fn default_gaze_path() -> String {
    "gaze.csv".into()
}

impl SessionManifest {
    pub fn new(session_id: impl Into<String>, location_id: impl Into<String>, duration_s: f64) -> Self {
        SessionManifest {
            session_id: session_id.into(),
            location_id: location_id.into(),
            duration_s,
            emotion_rate_hz: DEFAULT_EMOTION_RATE,
            gaze_rate_hz: DEFAULT_GAZE_RATE,
            sphere_radius: DEFAULT_RADIUS,
            emotion_path: default_emotion_path(),
            gaze_path: default_gaze_path(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, SessionError> {
        let text = std::fs::read_to_string(path).map_err(|e| SessionError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| SessionError::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SessionError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| SessionError::io(path, e))
    }

    pub fn sphere(&self) -> Result<SphereConfig, SessionError> {
        SphereConfig::with_radius(self.sphere_radius).map_err(|e| SessionError::Manifest {
            path: PathBuf::new(),
            reason: e.to_string(),
        })
    }

    fn check(&self) -> Result<(), String> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.duration_s) {
            return Err(format!("duration_s must be positive, got {}", self.duration_s));
        }
        if !positive(self.emotion_rate_hz) || !positive(self.gaze_rate_hz) {
            return Err("nominal rates must be positive".into());
        }
        if !positive(self.sphere_radius) {
            return Err(format!("sphere_radius must be positive, got {}", self.sphere_radius));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub session_id: String,
    pub location_id: String,
    pub duration: f64,
    pub emotion_rate: f64,
    pub gaze_rate: f64,
    pub sphere: SphereConfig,
    pub emotions: Vec<EmotionSample>,
    pub gazes: Vec<GazeSample>,
}

/// Which stream a diagnostic refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Emotion,
    Gaze,
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stream::Emotion => "emotion",
            Stream::Gaze => "gaze",
        })
    }
}

/// A rejected row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowDiagnostic {
    pub stream: Stream,
    /// 1-based line number in the file (the header is line 1).
    pub line: u64,
    pub field: String,
    pub reason: String,
}

impl fmt::Display for RowDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} log line {}: field `{}`: {}",
            self.stream, self.line, self.field, self.reason
        )
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{stream} log: {reason}")]
    Format { stream: Stream, reason: String },
    #[error("{} invalid row(s); first: {}", .0.len(), .0[0])]
    Validation(Vec<RowDiagnostic>),
    #[error("{stream} log has {actual} samples, expected about {expected} (duration × rate)")]
    CountMismatch {
        stream: Stream,
        expected: f64,
        actual: usize,
    },
    #[error("bad manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("gaze sample at t={gaze_t} precedes every emotion sample")]
    Alignment { gaze_t: f64 },
}

impl SessionError {
    fn io(path: &Path, source: io::Error) -> Self {
        SessionError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Row diagnostics carried by a validation error.
    pub fn diagnostics(&self) -> &[RowDiagnostic] {
        match self {
            SessionError::Validation(d) => d,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParseOptions {
    /// Drop invalid rows (reporting them) instead of failing.
    pub skip_invalid: bool,
    pub radius: f64,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            skip_invalid: false,
            radius: DEFAULT_RADIUS,
        }
    }
}

/// Rows that parsed, plus diagnostics for the ones that did not.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub rows: Vec<T>,
    pub diagnostics: Vec<RowDiagnostic>,
}

impl<T> Parsed<T> {
    fn finish(self, opts: &ParseOptions) -> Result<Self, SessionError> {
        if !opts.skip_invalid && !self.diagnostics.is_empty() {
            return Err(SessionError::Validation(self.diagnostics));
        }
        Ok(self)
    }
}

fn open_csv<R: Read>(
    reader: R,
    stream: Stream,
    expected: &[&str],
) -> Result<csv::Reader<R>, SessionError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| SessionError::Format {
        stream,
        reason: e.to_string(),
    })?;
    if headers.iter().ne(expected.iter().copied()) {
        return Err(SessionError::Format {
            stream,
            reason: format!(
                "missing or wrong header: expected `{}`, found `{}`",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    Ok(rdr)
}

fn parse_fields(
    record: &csv::StringRecord,
    names: &[&str],
    stream: Stream,
    line: u64,
) -> Result<Vec<f64>, RowDiagnostic> {
    if record.len() != names.len() {
        return Err(RowDiagnostic {
            stream,
            line,
            field: "*".into(),
            reason: format!("expected {} fields, found {}", names.len(), record.len()),
        });
    }
    names
        .iter()
        .zip(record.iter())
        .map(|(name, raw)| {
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| RowDiagnostic {
                    stream,
                    line,
                    field: (*name).into(),
                    reason: format!("not a finite real: `{raw}`"),
                })
        })
        .collect()
}

fn check_time(t: f64, last: Option<f64>, stream: Stream, line: u64) -> Result<(), RowDiagnostic> {
    if t < 0.0 {
        return Err(RowDiagnostic {
            stream,
            line,
            field: "t".into(),
            reason: format!("negative timestamp {t}"),
        });
    }
    if let Some(prev) = last {
        if t <= prev {
            return Err(RowDiagnostic {
                stream,
                line,
                field: "t".into(),
                reason: format!("timestamp {t} does not increase (previous {prev})"),
            });
        }
    }
    Ok(())
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

/// Parses an emotion log.
pub fn read_emotions<R: Read>(reader: R, opts: &ParseOptions) -> Result<Parsed<EmotionSample>, SessionError> {
    let stream = Stream::Emotion;
    let mut rdr = open_csv(reader, stream, &EMOTION_HEADER)?;
    let mut out = Parsed {
        rows: Vec::new(),
        diagnostics: Vec::new(),
    };
    for record in rdr.records() {
        let record = record.map_err(|e| SessionError::Format {
            stream,
            reason: e.to_string(),
        })?;
        let line = record_line(&record);
        let row = parse_fields(&record, &EMOTION_HEADER, stream, line).and_then(|v| {
            let sample = EmotionSample {
                t: v[0],
                stress: v[1],
                engagement: v[2],
                interest: v[3],
                excitement: v[4],
                focus: v[5],
                relaxation: v[6],
            };
            check_time(sample.t, out.rows.last().map(|s: &EmotionSample| s.t), stream, line)?;
            for (name, value) in sample.indices() {
                if !(0.0..=1.0).contains(&value) {
                    return Err(RowDiagnostic {
                        stream,
                        line,
                        field: name.into(),
                        reason: format!("index {value} outside [0,1]"),
                    });
                }
            }
            Ok(sample)
        });
        match row {
            Ok(s) => out.rows.push(s),
            Err(d) => out.diagnostics.push(d),
        }
    }
    out.finish(opts)
}

/// Parses a gaze log, checking each point lies on the sphere of `opts.radius`.
pub fn read_gazes<R: Read>(reader: R, opts: &ParseOptions) -> Result<Parsed<GazeSample>, SessionError> {
    let stream = Stream::Gaze;
    let mut rdr = open_csv(reader, stream, &GAZE_HEADER)?;
    let mut out = Parsed {
        rows: Vec::new(),
        diagnostics: Vec::new(),
    };
    for record in rdr.records() {
        let record = record.map_err(|e| SessionError::Format {
            stream,
            reason: e.to_string(),
        })?;
        let line = record_line(&record);
        let row = parse_fields(&record, &GAZE_HEADER, stream, line).and_then(|v| {
            let sample = GazeSample {
                t: v[0],
                point: Vec3::new(v[1], v[2], v[3]),
            };
            check_time(sample.t, out.rows.last().map(|s: &GazeSample| s.t), stream, line)?;
            let norm = sample.point.norm();
            if (norm - opts.radius).abs() > ON_SPHERE_TOLERANCE {
                return Err(RowDiagnostic {
                    stream,
                    line,
                    field: "x,y,z".into(),
                    reason: format!(
                        "point norm {norm:.4} is off the sphere (radius {} ± {ON_SPHERE_TOLERANCE})",
                        opts.radius
                    ),
                });
            }
            Ok(sample)
        });
        match row {
            Ok(s) => out.rows.push(s),
            Err(d) => out.diagnostics.push(d),
        }
    }
    out.finish(opts)
}

pub fn write_emotions<W: Write>(mut w: W, rows: &[EmotionSample]) -> io::Result<()> {
    writeln!(w, "{}", EMOTION_HEADER.join(","))?;
    for s in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            s.t, s.stress, s.engagement, s.interest, s.excitement, s.focus, s.relaxation
        )?;
    }
    w.flush()
}

pub fn write_gazes<W: Write>(mut w: W, rows: &[GazeSample]) -> io::Result<()> {
    writeln!(w, "{}", GAZE_HEADER.join(","))?;
    for s in rows {
        writeln!(w, "{},{},{},{}", s.t, s.point.x, s.point.y, s.point.z)?;
    }
    w.flush()
}

/// Result of [`parse_session`]: the log and any rows skipped under
/// `skip_invalid`.
#[derive(Debug, Clone)]
pub struct ParsedSession {
    pub log: SessionLog,
    pub diagnostics: Vec<RowDiagnostic>,
}

fn check_count(stream: Stream, actual: usize, duration: f64, rate: f64) -> Result<(), SessionError> {
    let expected = duration * rate;
    let slack = (0.01 * expected).max(1.0);
    if (actual as f64 - expected).abs() > slack {
        return Err(SessionError::CountMismatch {
            stream,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Reads and validates both streams of a session.
pub fn parse_session(
    emotion_path: &Path,
    gaze_path: &Path,
    manifest: &SessionManifest,
    skip_invalid: bool,
) -> Result<ParsedSession, SessionError> {
    manifest.check().map_err(|reason| SessionError::Manifest {
        path: PathBuf::new(),
        reason,
    })?;
    let opts = ParseOptions {
        skip_invalid,
        radius: manifest.sphere_radius,
    };
    let open = |p: &Path| File::open(p).map(BufReader::new).map_err(|e| SessionError::io(p, e));

    // Collect both files' diagnostics before failing so one run reports everything.
    let lenient = ParseOptions {
        skip_invalid: true,
        ..opts
    };
    let emotions = read_emotions(open(emotion_path)?, &lenient)?;
    let gazes = read_gazes(open(gaze_path)?, &lenient)?;
    let mut diagnostics = emotions.diagnostics;
    diagnostics.extend(gazes.diagnostics);
    if !opts.skip_invalid && !diagnostics.is_empty() {
        return Err(SessionError::Validation(diagnostics));
    }

    check_count(Stream::Emotion, emotions.rows.len(), manifest.duration_s, manifest.emotion_rate_hz)?;
    check_count(Stream::Gaze, gazes.rows.len(), manifest.duration_s, manifest.gaze_rate_hz)?;

    Ok(ParsedSession {
        log: SessionLog {
            session_id: manifest.session_id.clone(),
            location_id: manifest.location_id.clone(),
            duration: manifest.duration_s,
            emotion_rate: manifest.emotion_rate_hz,
            gaze_rate: manifest.gaze_rate_hz,
            sphere: SphereConfig {
                radius: manifest.sphere_radius,
                viewer_origin: Vec3::ZERO,
            },
            emotions: emotions.rows,
            gazes: gazes.rows,
        },
        diagnostics,
    })
}

/// Loads a session from its manifest; data paths resolve against the
/// manifest's directory.
pub fn load_session(manifest_path: &Path, skip_invalid: bool) -> Result<ParsedSession, SessionError> {
    let manifest = SessionManifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    parse_session(
        &dir.join(&manifest.emotion_path),
        &dir.join(&manifest.gaze_path),
        &manifest,
        skip_invalid,
    )
}

/// Writes both CSV files and the manifest into `dir`.
pub fn write_session(log: &SessionLog, manifest: &SessionManifest, dir: &Path) -> Result<(), SessionError> {
    std::fs::create_dir_all(dir).map_err(|e| SessionError::io(dir, e))?;
    let create = |p: &Path| File::create(p).map(BufWriter::new).map_err(|e| SessionError::io(p, e));
    let ep = dir.join(&manifest.emotion_path);
    write_emotions(create(&ep)?, &log.emotions).map_err(|e| SessionError::io(&ep, e))?;
    let gp = dir.join(&manifest.gaze_path);
    write_gazes(create(&gp)?, &log.gazes).map_err(|e| SessionError::io(&gp, e))?;
    manifest.save(&dir.join("session.json"))
}

/// A gaze sample paired with the emotion state in effect at its timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignedSample {
    pub t: f64,
    pub point: Vec3,
    pub interest: f64,
    pub stress: f64,
}

/// One record per gaze sample carrying the most recent emotion sample at or
/// before it (zero-order hold).
pub fn align_streams(log: &SessionLog) -> Result<Vec<AlignedSample>, SessionError> {
    let emotions = &log.emotions;
    let mut out = Vec::with_capacity(log.gazes.len());
    let mut next = 0usize;
    for g in &log.gazes {
        while next < emotions.len() && emotions[next].t <= g.t {
            next += 1;
        }
        let held = next
            .checked_sub(1)
            .map(|i| &emotions[i])
            .ok_or(SessionError::Alignment { gaze_t: g.t })?;
        out.push(AlignedSample {
            t: g.t,
            point: g.point,
            interest: held.interest,
            stress: held.stress,
        });
    }
    Ok(out)
}
