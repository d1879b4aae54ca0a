//! Stage orchestration: file handoffs between stages, run manifests and
//! machine-readable stage reports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dwell::{accumulate_dwell, BinKey, DwellError, Step, DEFAULT_STEP};
use crate::geometry::{SphereConfig, Vec3, DEFAULT_LAT_CLAMP};
use crate::heatmap::{
    colorize, composite, splat, unfold_mercator, ColorRamp, GridParams, HeatmapError, SphericalHeatmap,
    DEFAULT_HEIGHT, DEFAULT_OPACITY, DEFAULT_SIGMA, DEFAULT_WIDTH,
};
use crate::image::{read_ppm, write_image, ImageError, ImageFormat, Mask, RgbImage};
use crate::ranking::{
    predict, rank_extremes, read_ranked, train, write_ranked, Dataset, Extremes, FusedRecord, OracleWeights,
    RankedPoint, RankingError, RankingModel, ScoredRecord, TrainConfig, DEFAULT_EPOCHS, DEFAULT_K,
    DEFAULT_LEARNING_RATE, DEFAULT_SEED,
};
use crate::session::{align_streams, load_session, ParsedSession, RowDiagnostic, SessionError, SessionLog};
use crate::simulator::{emit_session, simulate_session, Scenario, SimError, SimulatedSession};
use crate::stats::spearman;

pub const SEED_ENV: &str = "GAZE_AFFECT_SEED";
pub const FUSED_HEADER: &str = "t,x,y,z,qx,qy,qz,interest,stress,dwell_s,f_interest,f_stress,f_dwell";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    /// Inputs are malformed or inconsistent.
    Validation,
    /// The stage could not complete on valid inputs.
    Runtime,
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub kind: FailureKind,
    pub message: String,
    pub diagnostics: Vec<RowDiagnostic>,
}

impl PipelineError {
    pub fn validation(stage: &'static str, message: impl ToString) -> Self {
        PipelineError {
            stage,
            kind: FailureKind::Validation,
            message: message.to_string(),
            diagnostics: Vec::new(),
        }
    }

    pub fn runtime(stage: &'static str, message: impl ToString) -> Self {
        PipelineError {
            stage,
            kind: FailureKind::Runtime,
            message: message.to_string(),
            diagnostics: Vec::new(),
        }
    }

    pub fn from_session(stage: &'static str, e: SessionError) -> Self {
        let kind = match &e {
            SessionError::Io { source, .. } if source.kind() != io::ErrorKind::NotFound => FailureKind::Runtime,
            _ => FailureKind::Validation,
        };
        PipelineError {
            stage,
            kind,
            message: e.to_string(),
            diagnostics: e.diagnostics().to_vec(),
        }
    }

    fn from_sim(stage: &'static str, e: SimError) -> Self {
        match e {
            SimError::Session(e) => PipelineError::from_session(stage, e),
            other => PipelineError::validation(stage, other),
        }
    }

    fn from_ranking(stage: &'static str, e: RankingError) -> Self {
        match e {
            RankingError::Parse { .. } | RankingError::BadHyperparameter(_) | RankingError::Dwell(_) => {
                PipelineError::validation(stage, e)
            }
            RankingError::Degenerate(_) => {
                PipelineError::runtime(stage, format!("{e}; rerun with --oracle-only"))
            }
            other => PipelineError::runtime(stage, other),
        }
    }

    fn from_heatmap(stage: &'static str, e: HeatmapError) -> Self {
        match e {
            HeatmapError::NoPoints | HeatmapError::Io(_) => PipelineError::runtime(stage, e),
            other => PipelineError::validation(stage, other),
        }
    }

    fn from_image(stage: &'static str, e: ImageError) -> Self {
        match e {
            ImageError::Malformed { .. } | ImageError::Dimensions { .. } => PipelineError::validation(stage, e),
            ImageError::Io(ref io) if io.kind() == io::ErrorKind::NotFound => PipelineError::validation(stage, e),
            other => PipelineError::runtime(stage, other),
        }
    }

    fn io(stage: &'static str, path: &Path, e: io::Error) -> Self {
        PipelineError::runtime(stage, format!("{}: {e}", path.display()))
    }
}

type StageResult<T> = Result<T, PipelineError>;

/// Ranking hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankParams {
    pub k_top: usize,
    pub k_bottom: usize,
    /// `None` falls back to `GAZE_AFFECT_SEED`, then 42.
    pub seed: Option<u64>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub oracle_weights: OracleWeights,
    /// Score with the composite oracle instead of a trained model.
    pub oracle_only: bool,
}

impl Default for RankParams {
    fn default() -> Self {
        RankParams {
            k_top: DEFAULT_K,
            k_bottom: DEFAULT_K,
            seed: None,
            epochs: DEFAULT_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            oracle_weights: OracleWeights::default(),
            oracle_only: false,
        }
    }
}

/// Heatmap and image-output parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderParams {
    pub width: usize,
    pub height: usize,
    pub sigma: f64,
    pub ramp: ColorRamp,
    pub lat_clamp_deg: f64,
    pub format: ImageFormat,
    pub mask: Option<PathBuf>,
    pub background: Option<PathBuf>,
    pub opacity: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
            sigma: DEFAULT_SIGMA,
            ramp: ColorRamp::default(),
            lat_clamp_deg: DEFAULT_LAT_CLAMP.to_degrees(),
            format: ImageFormat::Ppm,
            mask: None,
            background: None,
            opacity: DEFAULT_OPACITY,
        }
    }
}

impl RenderParams {
    pub fn grid(&self) -> GridParams {
        GridParams {
            width: self.width,
            height: self.height,
            kernel_sigma: self.sigma,
        }
    }

    pub fn lat_clamp(&self) -> f64 {
        self.lat_clamp_deg.to_radians()
    }

    fn validate(&self) -> StageResult<()> {
        self.grid().validate().map_err(|e| PipelineError::from_heatmap("render", e))?;
        self.ramp.validate().map_err(|e| PipelineError::from_heatmap("render", e))?;
        if !(self.lat_clamp_deg > 0.0 && self.lat_clamp_deg < 90.0) {
            return Err(PipelineError::validation(
                "render",
                format!("lat_clamp_deg must be in (0, 90), got {}", self.lat_clamp_deg),
            ));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(PipelineError::validation("render", format!("opacity {} outside [0, 1]", self.opacity)));
        }
        Ok(())
    }
}

/// Everything needed to reproduce one pipeline run. Relative paths resolve
/// against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    /// Session manifest (`session.json`) of recorded data.
    pub session: Option<PathBuf>,
    /// Simulator scenario; used when no session is given.
    pub scenario: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Overrides the session's sphere radius.
    pub sphere_radius: Option<f64>,
    pub viewer_origin: Vec3,
    pub step: f64,
    pub skip_invalid: bool,
    pub ranking: RankParams,
    pub heatmap: RenderParams,
}

impl Default for RunManifest {
    fn default() -> Self {
        RunManifest {
            session: None,
            scenario: None,
            output_dir: PathBuf::from("out"),
            sphere_radius: None,
            viewer_origin: Vec3::ZERO,
            step: DEFAULT_STEP,
            skip_invalid: false,
            ranking: RankParams::default(),
            heatmap: RenderParams::default(),
        }
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> StageResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::validation("manifest", format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::validation("manifest", format!("{}: {e}", path.display())))
    }

    /// Joins every relative path onto `base`.
    pub fn resolve(mut self, base: &Path) -> Self {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            self.session.as_mut(),
            self.scenario.as_mut(),
            Some(&mut self.output_dir),
            self.heatmap.mask.as_mut(),
            self.heatmap.background.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
        self
    }

    pub fn validate(&self) -> StageResult<()> {
        let bad = |m: String| Err(PipelineError::validation("manifest", m));
        match (&self.session, &self.scenario) {
            (Some(_), Some(_)) => return bad("give either `session` or `scenario`, not both".into()),
            (None, None) => return bad("one of `session` or `scenario` is required".into()),
            _ => {}
        }
        for p in [&self.session, &self.scenario, &self.heatmap.mask, &self.heatmap.background]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return bad(format!("{} does not exist", p.display()));
            }
        }
        Step::new(self.step).map_err(|e| PipelineError::validation("manifest", e))?;
        if let Some(r) = self.sphere_radius {
            SphereConfig::new(r, self.viewer_origin).map_err(|e| PipelineError::validation("manifest", e))?;
        }
        self.ranking.oracle_weights.validate().map_err(|e| PipelineError::validation("manifest", e))?;
        self.heatmap.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_json(&serde_json::to_value(self).expect("manifest serializes"))
    }
}

/// Seed precedence: explicit value, then `GAZE_AFFECT_SEED`, then 42.
pub fn resolve_seed(explicit: Option<u64>) -> StageResult<u64> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| PipelineError::validation("manifest", format!("{SEED_ENV}={v:?} is not a u64"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

pub fn hash_json(v: &Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("json serializes")))
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    io::copy(&mut f, &mut h)?;
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub wall_ms: f64,
    pub manifest_hash: String,
    pub counts: BTreeMap<String, Value>,
    pub params: Value,
    /// Artifact file name → SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

impl StageReport {
    fn new(stage: &str, started: Instant, manifest_hash: &str, params: Value) -> Self {
        StageReport {
            stage: stage.into(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            manifest_hash: manifest_hash.into(),
            counts: BTreeMap::new(),
            params,
            artifacts: BTreeMap::new(),
        }
    }

    fn count(mut self, key: &str, v: impl Into<Value>) -> Self {
        self.counts.insert(key.into(), v.into());
        self
    }

    fn artifacts(mut self, stage: &'static str, paths: &[PathBuf]) -> StageResult<Self> {
        for p in paths {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let digest = sha256_file(p).map_err(|e| PipelineError::io(stage, p, e))?;
            self.artifacts.insert(name, digest);
        }
        Ok(self)
    }

    /// Writes `<dir>/<stage>.report.json`.
    pub fn write(&self, dir: &Path) -> StageResult<PathBuf> {
        let path = dir.join(format!("{}.report.json", self.stage));
        write_json(&path, self, "report")?;
        Ok(path)
    }
}

fn create(stage: &'static str, path: &Path) -> StageResult<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(stage, dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| PipelineError::io(stage, path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T, stage: &'static str) -> StageResult<()> {
    let mut w = create(stage, path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| PipelineError::runtime(stage, e))?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| PipelineError::io(stage, path, e))
}

fn open(stage: &'static str, path: &Path) -> StageResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| PipelineError::validation(stage, format!("{}: {e}", path.display())))
}

/// Runs the simulator and writes the session into `out_dir`.
pub fn stage_simulate(
    scenario: &Scenario,
    out_dir: &Path,
    manifest_hash: &str,
) -> StageResult<(SimulatedSession, StageReport)> {
    let started = Instant::now();
    let session = simulate_session(&scenario.field(), &scenario.config).map_err(|e| PipelineError::from_sim("simulate", e))?;
    emit_session(&session, out_dir).map_err(|e| PipelineError::from_sim("simulate", e))?;
    let scenario_path = out_dir.join("scenario.json");
    write_json(&scenario_path, scenario, "simulate")?;
    let m = &session.manifest;
    let report = StageReport::new("simulate", started, manifest_hash, serde_json::to_value(scenario).expect("scenario serializes"))
        .count("emotion_samples", session.log.emotions.len())
        .count("gaze_samples", session.log.gazes.len())
        .count("fixations", session.scanpath.fixations.len())
        .count("candidates", session.scanpath.candidates.len())
        .artifacts(
            "simulate",
            &[out_dir.join(&m.emotion_path), out_dir.join(&m.gaze_path), out_dir.join("session.json"), scenario_path],
        )?;
    report.write(out_dir)?;
    Ok((session, report))
}

/// Parses and validates a recorded session.
pub fn stage_validate(
    session_manifest: &Path,
    skip_invalid: bool,
    manifest_hash: &str,
) -> StageResult<(ParsedSession, StageReport)> {
    let started = Instant::now();
    let parsed = load_session(session_manifest, skip_invalid).map_err(|e| PipelineError::from_session("validate", e))?;
    let report = StageReport::new(
        "validate",
        started,
        manifest_hash,
        json!({ "session": session_manifest, "skip_invalid": skip_invalid }),
    )
    .count("emotion_samples", parsed.log.emotions.len())
    .count("gaze_samples", parsed.log.gazes.len())
    .count("skipped_rows", parsed.diagnostics.len());
    Ok((parsed, report))
}

/// Aligns streams, accumulates dwell and writes `fused.csv`, `dwell.csv`
/// and `normalization.json`.
pub fn stage_fuse(log: &SessionLog, step: f64, out_dir: &Path, manifest_hash: &str) -> StageResult<(Dataset, StageReport)> {
    let started = Instant::now();
    let step = Step::new(step).map_err(|e| PipelineError::validation("fuse", e))?;
    let aligned = align_streams(log).map_err(|e| PipelineError::from_session("fuse", e))?;
    let dwell = accumulate_dwell(&log.gazes, log.gaze_rate, step).map_err(|e| PipelineError::validation("fuse", e))?;
    let dataset = crate::ranking::build_dataset(&aligned, &dwell).map_err(|e| PipelineError::from_ranking("fuse", e))?;

    let fused_path = out_dir.join("fused.csv");
    let mut w = create("fuse", &fused_path)?;
    write_fused(&mut w, &dataset).map_err(|e| PipelineError::io("fuse", &fused_path, e))?;
    let dwell_path = out_dir.join("dwell.csv");
    let w = create("fuse", &dwell_path)?;
    dwell.write_csv(w).map_err(|e| PipelineError::io("fuse", &dwell_path, e))?;
    let norm_path = out_dir.join("normalization.json");
    write_json(
        &norm_path,
        &json!({ "step": step.get(), "normalization": dataset.normalization, "manifest_hash": manifest_hash }),
        "fuse",
    )?;

    let report = StageReport::new("fuse", started, manifest_hash, json!({ "step": step.get(), "gaze_rate_hz": log.gaze_rate }))
        .count("records", dataset.len())
        .count("bins", dwell.len())
        .count("gaze_samples", dwell.total_samples())
        .count("total_delay_s", dwell.total_delay_time())
        .artifacts("fuse", &[fused_path, dwell_path, norm_path])?;
    report.write(out_dir)?;
    Ok((dataset, report))
}

pub fn write_fused<W: Write>(mut w: W, dataset: &Dataset) -> io::Result<()> {
    writeln!(w, "{FUSED_HEADER}")?;
    for (r, f) in dataset.records.iter().zip(&dataset.features) {
        let k = &r.key;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.point.x,
            r.point.y,
            r.point.z,
            k.qx(),
            k.qy(),
            k.qz(),
            r.interest,
            r.stress,
            r.dwell,
            f.f_interest,
            f.f_stress,
            f.f_dwell
        )?;
    }
    w.flush()
}

/// Reads the fused table back into records. Features are recomputed from the
/// raw columns, so they match the writer's exactly.
pub fn read_fused<R: Read>(reader: R, step: f64) -> Result<Vec<FusedRecord>, RankingError> {
    let step = Step::new(step)?;
    let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| RankingError::Parse { line: 1, reason: e.to_string() })?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != FUSED_HEADER {
        return Err(RankingError::Parse {
            line: 1,
            reason: format!("expected header `{FUSED_HEADER}`, found `{header}`"),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| RankingError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64, RankingError> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| RankingError::Parse {
                    line,
                    reason: format!("column {} is not a finite real", i + 1),
                })
        };
        let key = BinKey::from_quantized(Vec3::new(num(4)?, num(5)?, num(6)?), step).map_err(|e| match e {
            DwellError::StepMismatch => RankingError::Parse {
                line,
                reason: format!("bin columns are not multiples of step {}", step.get()),
            },
            other => other.into(),
        })?;
        out.push(FusedRecord {
            t: num(0)?,
            point: Vec3::new(num(1)?, num(2)?, num(3)?),
            key,
            interest: num(7)?,
            stress: num(8)?,
            dwell: num(9)?,
        });
    }
    if out.is_empty() {
        return Err(RankingError::Empty("fused table"));
    }
    Ok(out)
}

pub fn load_fused(path: &Path, step: f64) -> StageResult<Vec<FusedRecord>> {
    read_fused(open("rank", path)?, step).map_err(|e| PipelineError::from_ranking("rank", e))
}

/// Model file contents: the model plus the provenance hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    #[serde(flatten)]
    pub model: RankingModel,
    pub manifest_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankOutput {
    pub extremes: Extremes,
    pub model: Option<RankingModel>,
    pub scores: Vec<f64>,
    pub targets: Vec<f64>,
}

/// Scores every record, extracts the extremes and writes `top.csv`,
/// `bottom.csv` and (unless oracle-only) `model.json`.
pub fn stage_rank(
    records: Vec<FusedRecord>,
    params: &RankParams,
    seed: u64,
    out_dir: &Path,
    manifest_hash: &str,
) -> StageResult<(RankOutput, StageReport)> {
    let started = Instant::now();
    params.oracle_weights.validate().map_err(|e| PipelineError::from_ranking("rank", e))?;
    let dataset = Dataset::from_records(records).map_err(|e| PipelineError::from_ranking("rank", e))?;
    let targets: Vec<f64> = dataset.features.iter().map(|f| params.oracle_weights.score(f)).collect();

    let mut artifacts = Vec::new();
    let (scores, model) = if params.oracle_only {
        (targets.clone(), None)
    } else {
        let cfg = TrainConfig {
            learning_rate: params.learning_rate,
            epochs: params.epochs,
            seed,
        };
        let model = train(&dataset.features, &targets, &cfg).map_err(|e| PipelineError::from_ranking("rank", e))?;
        let scores = dataset.features.iter().map(|f| predict(&model, f)).collect();
        let path = out_dir.join("model.json");
        write_json(
            &path,
            &ModelArtifact {
                model: model.clone(),
                manifest_hash: manifest_hash.into(),
            },
            "rank",
        )?;
        artifacts.push(path);
        (scores, Some(model))
    };

    let scored: Vec<ScoredRecord> = dataset
        .records
        .iter()
        .zip(&scores)
        .map(|(r, &score)| ScoredRecord {
            t: r.t,
            point: r.point,
            key: r.key,
            score,
        })
        .collect();
    let extremes = rank_extremes(&scored, params.k_top, params.k_bottom).map_err(|e| PipelineError::from_ranking("rank", e))?;
    for (name, list) in [("top.csv", &extremes.top), ("bottom.csv", &extremes.bottom)] {
        let path = out_dir.join(name);
        let w = create("rank", &path)?;
        write_ranked(w, list).map_err(|e| PipelineError::io("rank", &path, e))?;
        artifacts.push(path);
    }

    let mut report = StageReport::new(
        "rank",
        started,
        manifest_hash,
        json!({
            "k_top": params.k_top,
            "k_bottom": params.k_bottom,
            "seed": seed,
            "epochs": params.epochs,
            "learning_rate": params.learning_rate,
            "oracle_weights": params.oracle_weights,
            "oracle_only": params.oracle_only,
        }),
    )
    .count("records", dataset.len())
    .count("top", extremes.top.len())
    .count("bottom", extremes.bottom.len());
    if let Some(m) = &model {
        report = report
            .count("spearman_vs_oracle", spearman(&scores, &targets))
            .count("final_loss", m.loss_trace.last().copied().unwrap_or(f64::NAN));
    }
    let report = report.artifacts("rank", &artifacts)?;
    report.write(out_dir)?;
    Ok((
        RankOutput {
            extremes,
            model,
            scores,
            targets,
        },
        report,
    ))
}

pub fn load_ranked(path: &Path) -> StageResult<Vec<RankedPoint>> {
    read_ranked(open("render", path)?).map_err(|e| PipelineError::from_ranking("render", e))
}

fn load_mask(stage: &'static str, params: &RenderParams) -> StageResult<Option<Mask>> {
    params
        .mask
        .as_deref()
        .map(|p| Mask::read(p).map_err(|e| PipelineError::from_image(stage, e)))
        .transpose()
}

/// Colourized equirectangular image with mask and optional background.
fn paint(stage: &'static str, hm: &SphericalHeatmap, params: &RenderParams) -> StageResult<RgbImage> {
    let mask = load_mask(stage, params)?;
    let heat = colorize(hm, &params.ramp, mask.as_ref()).map_err(|e| PipelineError::from_heatmap(stage, e))?;
    match &params.background {
        Some(p) => {
            let bg = read_ppm(p).map_err(|e| PipelineError::from_image(stage, e))?;
            composite(&heat, &bg, params.opacity, mask.as_ref()).map_err(|e| PipelineError::from_heatmap(stage, e))
        }
        None => Ok(heat),
    }
}

fn render_params_echo(params: &RenderParams) -> Value {
    serde_json::to_value(params).expect("params serialize")
}

/// Splats the ranked points and writes `heatmap.bin` and `equirect.<ext>`.
pub fn stage_render(
    points: &[RankedPoint],
    params: &RenderParams,
    sphere: &SphereConfig,
    out_dir: &Path,
    manifest_hash: &str,
) -> StageResult<(SphericalHeatmap, StageReport)> {
    let started = Instant::now();
    params.validate()?;
    let hm = splat(points, &params.grid(), sphere).map_err(|e| PipelineError::from_heatmap("render", e))?;
    let bin_path = out_dir.join("heatmap.bin");
    let w = create("render", &bin_path)?;
    hm.write_to(w).map_err(|e| PipelineError::io("render", &bin_path, e))?;
    let img = paint("render", &hm, params)?;
    let img_path = out_dir.join(format!("equirect.{}", params.format.extension()));
    write_image(&img, &img_path, params.format).map_err(|e| PipelineError::from_image("render", e))?;
    let report = StageReport::new("render", started, manifest_hash, render_params_echo(params))
        .count("points", points.len())
        .count("max_abs", hm.max_abs())
        .artifacts("render", &[bin_path, img_path])?;
    report.write(out_dir)?;
    Ok((hm, report))
}

pub fn load_heatmap(path: &Path) -> StageResult<SphericalHeatmap> {
    SphericalHeatmap::load(path).map_err(|e| PipelineError::from_heatmap("unfold", e))
}

/// Writes the Mercator unfolding `mercator.<ext>` of a heatmap.
pub fn stage_unfold(
    hm: &SphericalHeatmap,
    params: &RenderParams,
    out_dir: &Path,
    manifest_hash: &str,
) -> StageResult<StageReport> {
    let started = Instant::now();
    params.validate()?;
    let img = paint("unfold", hm, params)?;
    let merc = unfold_mercator(&img, params.lat_clamp());
    let path = out_dir.join(format!("mercator.{}", params.format.extension()));
    write_image(&merc, &path, params.format).map_err(|e| PipelineError::from_image("unfold", e))?;
    let report = StageReport::new("unfold", started, manifest_hash, render_params_echo(params))
        .count("width", merc.width)
        .count("height", merc.height)
        .artifacts("unfold", &[path])?;
    report.write(out_dir)?;
    Ok(report)
}

/// Unfolds an already-rendered equirectangular PPM.
pub fn stage_unfold_image(
    image_path: &Path,
    params: &RenderParams,
    out_dir: &Path,
    manifest_hash: &str,
) -> StageResult<StageReport> {
    let started = Instant::now();
    let img = read_ppm(image_path).map_err(|e| PipelineError::from_image("unfold", e))?;
    let merc = unfold_mercator(&img, params.lat_clamp());
    let path = out_dir.join(format!("mercator.{}", params.format.extension()));
    write_image(&merc, &path, params.format).map_err(|e| PipelineError::from_image("unfold", e))?;
    let report = StageReport::new("unfold", started, manifest_hash, render_params_echo(params))
        .count("width", merc.width)
        .count("height", merc.height)
        .artifacts("unfold", &[path])?;
    report.write(out_dir)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub manifest_hash: String,
    pub seed: u64,
    pub wall_ms: f64,
    pub stages: Vec<StageReport>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: PipelineReport,
    pub session: SessionLog,
    pub rank: RankOutput,
    pub heatmap: SphericalHeatmap,
    /// Ground truth when the run started from a scenario.
    pub scenario: Option<Scenario>,
}

/// Chains every stage. Relative paths in `manifest` resolve against
/// `base_dir`. The provenance hash covers the manifest as given (plus the
/// effective seed), so it does not depend on where the run directory lives.
pub fn run_pipeline(manifest: &RunManifest, base_dir: &Path) -> StageResult<PipelineOutput> {
    let started = Instant::now();
    let seed = resolve_seed(manifest.ranking.seed)?;
    let mut effective = manifest.clone();
    effective.ranking.seed = Some(seed);
    let hash = effective.hash();
    let manifest = &effective.resolve(base_dir);
    manifest.validate()?;
    let out = &manifest.output_dir;
    std::fs::create_dir_all(out).map_err(|e| PipelineError::io("pipeline", out, e))?;

    let mut stages = Vec::new();
    let (session_path, scenario) = match (&manifest.session, &manifest.scenario) {
        (Some(s), _) => (s.clone(), None),
        (None, Some(sc)) => {
            let scenario = Scenario::load(sc).map_err(|e| PipelineError::from_sim("simulate", e))?;
            let dir = out.join("session");
            let (_, report) = stage_simulate(&scenario, &dir, &hash)?;
            stages.push(report);
            (dir.join("session.json"), Some(scenario))
        }
        (None, None) => unreachable!("validated above"),
    };

    let (parsed, report) = stage_validate(&session_path, manifest.skip_invalid, &hash)?;
    report.write(out)?;
    stages.push(report);
    let mut log = parsed.log;
    if let Some(r) = manifest.sphere_radius {
        log.sphere.radius = r;
    }
    log.sphere.viewer_origin = manifest.viewer_origin;

    let (dataset, report) = stage_fuse(&log, manifest.step, out, &hash)?;
    stages.push(report);
    let (rank, report) = stage_rank(dataset.records, &manifest.ranking, seed, out, &hash)?;
    stages.push(report);
    let points: Vec<RankedPoint> = rank.extremes.all_points().cloned().collect();
    let (heatmap, report) = stage_render(&points, &manifest.heatmap, &log.sphere, out, &hash)?;
    stages.push(report);
    stages.push(stage_unfold(&heatmap, &manifest.heatmap, out, &hash)?);

    let report = PipelineReport {
        manifest_hash: hash,
        seed,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        stages,
    };
    write_json(&out.join("pipeline.report.json"), &report, "pipeline")?;
    Ok(PipelineOutput {
        report,
        session: log,
        rank,
        heatmap,
        scenario,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::EmotionSample;
    use crate::session::GazeSample;

    #[test]
    fn manifest_defaults_mirror_modules() {
        let m: RunManifest = serde_json::from_str(r#"{"scenario":"s.json"}"#).unwrap();
        assert_eq!(m.step, 0.01);
        assert_eq!(m.ranking.k_top, 30);
        assert_eq!(m.ranking.epochs, 200);
        assert_eq!(m.ranking.learning_rate, 0.1);
        assert_eq!((m.heatmap.width, m.heatmap.height), (1024, 512));
        assert_eq!(m.heatmap.sigma, 0.05);
        assert!((m.heatmap.lat_clamp_deg - 85.0).abs() < 1e-12);
        assert_eq!(m.heatmap.format, ImageFormat::Ppm);
    }

    #[test]
    fn unknown_manifest_keys_are_rejected() {
        assert!(serde_json::from_str::<RunManifest>(r#"{"sesion":"a"}"#).is_err());
        assert!(serde_json::from_str::<RunManifest>(r#"{"ranking":{"k":3}}"#).is_err());
    }

    #[test]
    fn resolve_joins_relative_paths_only() {
        let m = RunManifest {
            scenario: Some("s.json".into()),
            heatmap: RenderParams {
                mask: Some("/abs/mask.pgm".into()),
                ..RenderParams::default()
            },
            ..RunManifest::default()
        }
        .resolve(Path::new("/base"));
        assert_eq!(m.scenario.unwrap(), PathBuf::from("/base/s.json"));
        assert_eq!(m.output_dir, PathBuf::from("/base/out"));
        assert_eq!(m.heatmap.mask.unwrap(), PathBuf::from("/abs/mask.pgm"));
    }

    #[test]
    fn validate_requires_one_input_that_exists() {
        let m = RunManifest::default();
        assert_eq!(m.validate().unwrap_err().kind, FailureKind::Validation);
        let m = RunManifest {
            session: Some("/definitely/not/here.json".into()),
            ..RunManifest::default()
        };
        assert!(m.validate().unwrap_err().message.contains("does not exist"));
    }

    #[test]
    fn hash_changes_with_params() {
        let a = RunManifest::default();
        let mut b = a.clone();
        b.ranking.seed = Some(7);
        assert_eq!(a.hash(), RunManifest::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn explicit_seed_wins() {
        assert_eq!(resolve_seed(Some(5)).unwrap(), 5);
    }

    fn tiny_log() -> SessionLog {
        let gazes = (0..100)
            .map(|i| GazeSample {
                t: i as f64 / 50.0,
                point: Vec3::new((i % 7) as f64, (i % 3) as f64, 102.0),
            })
            .collect();
        let emotions = (0..120)
            .map(|i| EmotionSample {
                interest: (i % 10) as f64 / 10.0,
                stress: (i % 4) as f64 / 4.0,
                ..EmotionSample::uniform(i as f64 / 60.0, 0.5)
            })
            .collect();
        SessionLog {
            session_id: "s".into(),
            location_id: "l".into(),
            duration: 2.0,
            emotion_rate: 60.0,
            gaze_rate: 50.0,
            sphere: SphereConfig::default(),
            emotions,
            gazes,
        }
    }

    #[test]
    fn fused_table_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (dataset, report) = stage_fuse(&tiny_log(), 0.01, dir.path(), "h").unwrap();
        assert_eq!(report.counts["records"], json!(100));
        assert!(report.artifacts.contains_key("fused.csv"));
        let back = load_fused(&dir.path().join("fused.csv"), 0.01).unwrap();
        assert_eq!(back, dataset.records);
        assert!(load_fused(&dir.path().join("fused.csv"), 0.07).is_err());
    }

    #[test]
    fn rank_writes_model_and_tables() {
        let dir = tempfile::tempdir().unwrap();
        let (dataset, _) = stage_fuse(&tiny_log(), 0.01, dir.path(), "h").unwrap();
        let params = RankParams {
            k_top: 5,
            k_bottom: 5,
            epochs: 20,
            ..RankParams::default()
        };
        let (out, report) = stage_rank(dataset.records, &params, 42, dir.path(), "h").unwrap();
        assert_eq!(out.extremes.top.len(), 5);
        let model: ModelArtifact = serde_json::from_reader(File::open(dir.path().join("model.json")).unwrap()).unwrap();
        assert_eq!(model.manifest_hash, "h");
        assert_eq!(model.model.loss_trace.len(), 20);
        assert_eq!(load_ranked(&dir.path().join("top.csv")).unwrap(), out.extremes.top);
        assert!(report.counts.contains_key("spearman_vs_oracle"));
    }

    #[test]
    fn too_few_bins_is_a_runtime_failure() {
        let dir = tempfile::tempdir().unwrap();
        let (dataset, _) = stage_fuse(&tiny_log(), 0.01, dir.path(), "h").unwrap();
        let params = RankParams {
            k_top: 100,
            k_bottom: 100,
            oracle_only: true,
            ..RankParams::default()
        };
        let err = stage_rank(dataset.records, &params, 42, dir.path(), "h").unwrap_err();
        assert_eq!(err.kind, FailureKind::Runtime);
        assert_eq!(err.stage, "rank");
    }
}
