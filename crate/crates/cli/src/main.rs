use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gaze_affect::fixture::{check_fixture, load_fixture, FIXTURE_RADIUS, FIXTURE_TOLERANCE};
use gaze_affect::geometry::{SphereConfig, DEFAULT_RADIUS};
use gaze_affect::image::ImageFormat;
use gaze_affect::pipeline::{
    hash_json, load_fused, load_heatmap, load_ranked, resolve_seed, run_pipeline, stage_fuse, stage_rank, stage_render,
    stage_simulate, stage_unfold, stage_unfold_image, stage_validate, FailureKind, PipelineError, RankParams,
    RenderParams, RunManifest, StageReport,
};
use gaze_affect::simulator::Scenario;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "gaze-affect", version, about = "Emotion + eye-tracking preference heatmaps on the VR environment sphere")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a ground-truth session from a scenario file.
    Simulate {
        scenario: PathBuf,
        #[arg(long, default_value = "session")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parse and validate a recorded session (path to its session.json).
    Validate {
        session: PathBuf,
        #[arg(long)]
        skip_invalid: bool,
    },
    /// Align streams, accumulate dwell and write the fused feature table.
    Fuse {
        session: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        step: f64,
        #[arg(long)]
        skip_invalid: bool,
    },
    /// Train the ranking model on a fused table and write top/bottom lists.
    Rank {
        fused: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Quantization step the fused table was built with.
        #[arg(long, default_value_t = 0.01)]
        step: f64,
        #[command(flatten)]
        ranking: RankArgs,
    },
    /// Splat ranked CSVs into a heatmap and write the equirectangular image.
    Render {
        #[arg(required = true)]
        ranked: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RADIUS)]
        radius: f64,
        #[command(flatten)]
        render: RenderArgs,
    },
    /// Unfold a heatmap (heatmap.bin) or an equirectangular PPM to Mercator.
    Unfold {
        input: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        render: RenderArgs,
    },
    /// Run every stage from a run manifest.
    Pipeline {
        #[arg(long)]
        manifest: PathBuf,
        /// Overrides the manifest's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        step: Option<f64>,
        #[arg(long)]
        skip_invalid: bool,
        #[command(flatten)]
        ranking: RankArgs,
        #[command(flatten)]
        render: RenderArgs,
    },
    /// Check that every coordinate of a ranked-coordinate table lies on the environment sphere.
    CheckFixture {
        #[arg(default_value = "fixtures/ranked_coordinates.csv")]
        fixture: PathBuf,
        #[arg(long, default_value_t = FIXTURE_RADIUS)]
        radius: f64,
        #[arg(long, default_value_t = FIXTURE_TOLERANCE)]
        tolerance: f64,
    },
}

#[derive(Args, Clone, Default)]
struct RankArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_top: Option<usize>,
    #[arg(long)]
    k_bottom: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Rank by the composite oracle score without training.
    #[arg(long)]
    oracle_only: bool,
}

impl RankArgs {
    fn apply(&self, p: &mut RankParams) {
        if self.seed.is_some() {
            p.seed = self.seed;
        }
        if let Some(k) = self.k_top {
            p.k_top = k;
        }
        if let Some(k) = self.k_bottom {
            p.k_bottom = k;
        }
        if let Some(e) = self.epochs {
            p.epochs = e;
        }
        if let Some(lr) = self.learning_rate {
            p.learning_rate = lr;
        }
        p.oracle_only |= self.oracle_only;
    }
}

#[derive(Args, Clone, Default)]
struct RenderArgs {
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Kernel sigma in radians.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    format: Option<ImageFormat>,
    /// PGM mask, 0 = hidden.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Equirectangular PPM to blend under the heatmap.
    #[arg(long)]
    background: Option<PathBuf>,
    #[arg(long)]
    opacity: Option<f64>,
    #[arg(long)]
    lat_clamp_deg: Option<f64>,
}

impl RenderArgs {
    fn apply(&self, p: &mut RenderParams) {
        if let Some(w) = self.width {
            p.width = w;
        }
        if let Some(h) = self.height {
            p.height = h;
        }
        if let Some(s) = self.sigma {
            p.sigma = s;
        }
        if let Some(f) = self.format {
            p.format = f;
        }
        if self.mask.is_some() {
            p.mask = self.mask.clone();
        }
        if self.background.is_some() {
            p.background = self.background.clone();
        }
        if let Some(o) = self.opacity {
            p.opacity = o;
        }
        if let Some(c) = self.lat_clamp_deg {
            p.lat_clamp_deg = c;
        }
    }

    fn params(&self) -> RenderParams {
        let mut p = RenderParams::default();
        self.apply(&mut p);
        p
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            for d in &e.diagnostics {
                eprintln!("  {d}");
            }
            ExitCode::from(match e.kind {
                FailureKind::Validation => EXIT_VALIDATION,
                FailureKind::Runtime => EXIT_RUNTIME,
            })
        }
    }
}

fn print_json(report: &StageReport) {
    println!("{}", serde_json::to_string_pretty(report).expect("report serializes"));
}

fn run(command: Command) -> Result<ExitCode, PipelineError> {
    match command {
        Command::Simulate { scenario, out, seed } => {
            let mut sc = Scenario::load(&scenario).map_err(|e| PipelineError::validation("simulate", e))?;
            if let Some(s) = seed {
                sc.config.seed = s;
            }
            let hash = hash_json(&serde_json::to_value(&sc).expect("scenario serializes"));
            let (_, report) = stage_simulate(&sc, &out, &hash)?;
            print_json(&report);
        }
        Command::Validate { session, skip_invalid } => {
            let (parsed, report) = stage_validate(&session, skip_invalid, &hash_json(&json!({ "session": session })))?;
            for d in &parsed.diagnostics {
                eprintln!("skipped: {d}");
            }
            print_json(&report);
        }
        Command::Fuse {
            session,
            out,
            step,
            skip_invalid,
        } => {
            let hash = hash_json(&json!({ "session": session, "step": step, "skip_invalid": skip_invalid }));
            let (parsed, _) = stage_validate(&session, skip_invalid, &hash)?;
            let (_, report) = stage_fuse(&parsed.log, step, &out, &hash)?;
            print_json(&report);
        }
        Command::Rank {
            fused,
            out,
            step,
            ranking,
        } => {
            let mut params = RankParams::default();
            ranking.apply(&mut params);
            let seed = resolve_seed(params.seed)?;
            params.seed = Some(seed);
            let hash = hash_json(&json!({ "fused": fused, "step": step, "ranking": params }));
            let records = load_fused(&fused, step)?;
            let (_, report) = stage_rank(records, &params, seed, &out, &hash)?;
            print_json(&report);
        }
        Command::Render {
            ranked,
            out,
            radius,
            render,
        } => {
            let params = render.params();
            let sphere = SphereConfig::with_radius(radius).map_err(|e| PipelineError::validation("render", e))?;
            let mut points = Vec::new();
            for p in &ranked {
                points.extend(load_ranked(p)?);
            }
            let hash = hash_json(&json!({ "ranked": ranked, "radius": radius, "heatmap": params }));
            let (_, report) = stage_render(&points, &params, &sphere, &out, &hash)?;
            print_json(&report);
        }
        Command::Unfold { input, out, render } => {
            let params = render.params();
            let hash = hash_json(&json!({ "input": input, "heatmap": params }));
            let report = if is_ppm(&input) {
                stage_unfold_image(&input, &params, &out, &hash)?
            } else {
                stage_unfold(&load_heatmap(&input)?, &params, &out, &hash)?
            };
            print_json(&report);
        }
        Command::Pipeline {
            manifest,
            out,
            step,
            skip_invalid,
            ranking,
            render,
        } => {
            let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
            let mut m = RunManifest::load(&manifest)?;
            // Command-line paths are relative to the working directory.
            let cwd = std::env::current_dir().map_err(|e| PipelineError::runtime("pipeline", e))?;
            if let Some(o) = out {
                m.output_dir = cwd.join(o);
            }
            if let Some(s) = step {
                m.step = s;
            }
            m.skip_invalid |= skip_invalid;
            ranking.apply(&mut m.ranking);
            let render = RenderArgs {
                mask: render.mask.map(|p| cwd.join(p)),
                background: render.background.map(|p| cwd.join(p)),
                ..render
            };
            render.apply(&mut m.heatmap);
            let result = run_pipeline(&m, &base)?;
            let r = &result.report;
            for s in &r.stages {
                println!("{:<9} {:>10.1} ms  {}", s.stage, s.wall_ms, s.artifacts.keys().cloned().collect::<Vec<_>>().join(" "));
            }
            println!("total     {:>10.1} ms  manifest {}", r.wall_ms, r.manifest_hash);
            println!("outputs in {}", base.join(&m.output_dir).display());
        }
        Command::CheckFixture {
            fixture,
            radius,
            tolerance,
        } => {
            let rows = load_fixture(&fixture).map_err(|e| PipelineError::validation("check-fixture", e))?;
            let report =
                check_fixture(&rows, radius, tolerance).map_err(|e| PipelineError::validation("check-fixture", e))?;
            for p in &report.points {
                println!("{:<48} norm {:>9.4}  dev {:>6.4}  {}", p.row.label(), p.norm, p.deviation, if p.ok { "ok" } else { "FAIL" });
            }
            println!(
                "{} points, mean radius {:.4}, norms [{:.4}, {:.4}], max deviation from {} = {:.4}",
                report.count, report.mean_radius, report.min_norm, report.max_norm, radius, report.max_deviation
            );
            if report.passed {
                println!("PASS");
            } else {
                for p in report.failures() {
                    println!("off-sphere: {} (norm {:.4})", p.row.label(), p.norm);
                }
                println!("FAIL");
                return Ok(ExitCode::from(EXIT_VALIDATION));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn is_ppm(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}
