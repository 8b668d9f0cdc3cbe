//! Experiment harness: runs the three scenarios from a JSON config and emits
//! comparison reports.
//!
//! Each run has two parts. A *survey* holds the camera at the scenario start
//! pose for a fixed number of frames and measures detection rate and yaw
//! error — the stationary-observation statistics. The *episodes* then run
//! the closed-loop behavior (docking approaches, or the train-link
//! formation) and measure success rate and attempts. Episodes fan out to the
//! worker pool; results are collected by index, so the report is
//! byte-identical for any pool size.

use std::fmt::Write as _;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{estimate_bundle, Detection, EstimatorConfig, FilterWindow, FusionMode};
use crate::geometry::{build_bundle, to_planar, wrap_deg, BundleGeometry, CameraIntrinsics};
use crate::latch::{
    run_episode, world_from_bundle, world_from_camera, BoatState, EpisodeConfig, LatchThresholds,
};
use crate::par::map_indexed;
use crate::sim::{simulate_frame, NoiseProfile};
use crate::swarm::{run_formation, FormationScenario, SwarmEventKind};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("reports compare different scenarios: {0} vs {1}")]
    ScenarioMismatch(String, String),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    IndoorDock,
    OutdoorBoats,
    SwarmTrain,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::IndoorDock => "indoor_dock",
            Scenario::OutdoorBoats => "outdoor_boats",
            Scenario::SwarmTrain => "swarm_train",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Leader tag only, no median filter, no fusion.
    ClassicSingle,
    /// Full pipeline: every visible tag, median window, weighted fusion.
    Bundle3d,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::ClassicSingle => "classic_single",
            EstimatorKind::Bundle3d => "bundle3d",
        }
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        match self {
            EstimatorKind::ClassicSingle => EstimatorConfig {
                window_capacity: 1,
                fusion: FusionMode::Argmax,
                d_ref_mm: 1000.0,
                leader_only: true,
            },
            EstimatorKind::Bundle3d => EstimatorConfig::default(),
        }
    }
}

fn default_episodes() -> u32 {
    100
}

fn default_survey_frames() -> u64 {
    10_000
}

fn default_robots() -> usize {
    3
}

fn default_spacing() -> f64 {
    1000.0
}

/// Top-level experiment description, read from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub estimator: EstimatorKind,
    pub noise_profile: NoiseProfile,
    #[serde(default = "default_episodes")]
    pub episodes: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_survey_frames")]
    pub survey_frames: u64,
    /// Bundle layout; the default 130 mm two-plane bundle when absent.
    #[serde(default)]
    pub bundle: Option<BundleGeometry>,
    /// Swarm-only: robots in the train.
    #[serde(default = "default_robots")]
    pub robots: usize,
    /// Swarm-only: initial gap between robots, mm.
    #[serde(default = "default_spacing")]
    pub spacing_mm: f64,
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.episodes < 1 {
            return Err(ExperimentError::InvalidConfig("episodes must be >= 1".into()));
        }
        if self.survey_frames < 1 {
            return Err(ExperimentError::InvalidConfig(
                "survey_frames must be >= 1".into(),
            ));
        }
        if self.scenario == Scenario::SwarmTrain && self.robots < 2 {
            return Err(ExperimentError::InvalidConfig("robots must be >= 2".into()));
        }
        self.noise_profile
            .validate()
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    pub fn bundle_geometry(&self) -> BundleGeometry {
        self.bundle
            .clone()
            .unwrap_or_else(|| build_bundle(130.0, 1, 10.0, 0.0).expect("default bundle"))
    }
}

fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).expect("default intrinsics")
}

/// Fixed per-scenario geometry: start distance, guidance standoff, contact
/// plane, and latch thresholds.
struct ScenarioParams {
    start_mm: f64,
    standoff_mm: f64,
    contact_dx_mm: f64,
    thresholds: LatchThresholds,
}

fn scenario_params(s: Scenario, spacing_mm: f64) -> ScenarioParams {
    match s {
        Scenario::IndoorDock => ScenarioParams {
            start_mm: 1800.0,
            standoff_mm: 0.0,
            contact_dx_mm: 10.0,
            thresholds: LatchThresholds::indoor(),
        },
        // guidance aims 100 mm inside the contact plane so the boat crosses
        // it instead of converging onto it asymptotically
        Scenario::OutdoorBoats => ScenarioParams {
            start_mm: 2000.0,
            standoff_mm: 400.0,
            contact_dx_mm: 500.0,
            thresholds: LatchThresholds::outdoor(),
        },
        Scenario::SwarmTrain => ScenarioParams {
            start_mm: spacing_mm,
            standoff_mm: 400.0,
            contact_dx_mm: 500.0,
            thresholds: LatchThresholds::outdoor(),
        },
    }
}

/// One line of the per-frame estimate log.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SurveyRow {
    pub frame: u64,
    pub n_tags: usize,
    pub d_x_mm: f64,
    pub d_y_mm: f64,
    pub psi_deg: f64,
    pub confidence: f64,
    pub ambiguous_flag: bool,
}

/// Aggregate survey statistics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SurveyStats {
    pub detection_pct: f64,
    pub yaw_rmse_deg: f64,
    pub yaw_max_abs_deg: f64,
}

/// One dumped frame for offline replay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameDump {
    pub frame: u64,
    /// Yaw of the true (wave-perturbed) pose, for error stats on replay.
    pub truth_psi_deg: f64,
    pub detections: Vec<Detection>,
}

/// First line of a detection dump: everything replay needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpMeta {
    pub bundle: BundleGeometry,
    pub intrinsics: CameraIntrinsics,
    pub estimator: EstimatorConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: u32,
    pub seed: u64,
    pub success: bool,
    pub attempts: u32,
    pub frames: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub scenario: Scenario,
    pub estimator: EstimatorKind,
    pub seed: u64,
    pub episodes: u32,
    pub detection_pct: f64,
    pub yaw_rmse_deg: f64,
    pub yaw_max_abs_deg: f64,
    pub success_rate: f64,
    pub mean_attempts: f64,
    pub episode_rows: Vec<EpisodeRow>,
}

/// Everything a run produces; the CLI decides what to write where.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: Report,
    pub survey_rows: Vec<SurveyRow>,
    pub dump_meta: DumpMeta,
    pub frame_dumps: Vec<FrameDump>,
}

fn mix_episode_seed(seed: u64, episode: u64) -> u64 {
    let mut z = seed ^ episode.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stationary survey at the scenario start pose: simulate, estimate, log,
/// dump. Sequential by construction (the median window is stateful).
fn run_survey(
    cfg: &ExperimentConfig,
    params: &ScenarioParams,
) -> (SurveyStats, Vec<SurveyRow>, Vec<FrameDump>) {
    let bundle = cfg.bundle_geometry();
    let k = default_intrinsics();
    let est_cfg = cfg.estimator.estimator_config();
    let mut win = FilterWindow::new(est_cfg.window_capacity)
        .unwrap_or_else(|_| FilterWindow::new(1).unwrap());
    let boat = BoatState::at(params.start_mm, 0.0, 180.0);

    let mut rows = Vec::with_capacity(cfg.survey_frames as usize);
    let mut dumps = Vec::with_capacity(cfg.survey_frames as usize);
    let mut hits = 0u64;
    let mut sq_sum = 0.0f64;
    let mut max_abs = 0.0f64;

    for frame in 0..cfg.survey_frames {
        let sway = cfg.noise_profile.target_sway_offset(frame);
        let truth = world_from_camera(&boat)
            .invert()
            .compose(&world_from_bundle(Vector2::new(0.0, sway), 0.0));
        let fsim = simulate_frame(&truth, &bundle, &k, &cfg.noise_profile, frame);
        let truth_planar = to_planar(&fsim.truth_camera_from_bundle);
        dumps.push(FrameDump {
            frame,
            truth_psi_deg: truth_planar.psi,
            detections: fsim.detections.clone(),
        });
        let est = estimate_bundle(&fsim.detections, &bundle, &k, &mut win, &est_cfg);
        match est {
            Some(e) => {
                hits += 1;
                let p = to_planar(&e.camera_from_bundle);
                let err = wrap_deg(p.psi - truth_planar.psi);
                sq_sum += err * err;
                max_abs = max_abs.max(err.abs());
                rows.push(SurveyRow {
                    frame,
                    n_tags: e.n_tags,
                    d_x_mm: p.d_x,
                    d_y_mm: p.d_y,
                    psi_deg: p.psi,
                    confidence: e.confidence,
                    ambiguous_flag: e.ambiguous,
                });
            }
            None => rows.push(SurveyRow {
                frame,
                n_tags: 0,
                d_x_mm: f64::NAN,
                d_y_mm: f64::NAN,
                psi_deg: f64::NAN,
                confidence: 0.0,
                ambiguous_flag: false,
            }),
        }
    }

    let stats = SurveyStats {
        detection_pct: 100.0 * hits as f64 / cfg.survey_frames as f64,
        yaw_rmse_deg: if hits > 0 {
            (sq_sum / hits as f64).sqrt()
        } else {
            f64::NAN
        },
        yaw_max_abs_deg: max_abs,
    };
    (stats, rows, dumps)
}

fn run_dock_episodes(cfg: &ExperimentConfig, params: &ScenarioParams) -> Vec<EpisodeRow> {
    let bundle = cfg.bundle_geometry();
    let k = default_intrinsics();
    map_indexed(cfg.episodes as usize, |i| {
        let seed = mix_episode_seed(cfg.seed, i as u64);
        let mut ecfg = EpisodeConfig::new(
            bundle.clone(),
            k,
            cfg.noise_profile.clone(),
            cfg.estimator.estimator_config(),
            params.thresholds,
            BoatState::at(params.start_mm, 0.0, 180.0),
            seed,
        );
        ecfg.standoff_mm = params.standoff_mm;
        ecfg.contact_dx_mm = params.contact_dx_mm;
        match run_episode(&ecfg) {
            Ok((res, _)) => EpisodeRow {
                episode: i as u32,
                seed,
                success: res.success,
                attempts: res.attempts,
                frames: res.frames,
                error: None,
            },
            Err(e) => EpisodeRow {
                episode: i as u32,
                seed,
                success: false,
                attempts: 0,
                frames: 0,
                error: Some(e.to_string()),
            },
        }
    })
}

fn run_swarm_episodes(cfg: &ExperimentConfig) -> Vec<EpisodeRow> {
    let bundle = cfg.bundle_geometry();
    let k = default_intrinsics();
    let max_ticks = 60_000u64;
    map_indexed(cfg.episodes as usize, |i| {
        let seed = mix_episode_seed(cfg.seed, i as u64);
        let mut profile = cfg.noise_profile.clone();
        profile.seed ^= seed;
        let built = FormationScenario::train_link(
            cfg.robots,
            cfg.spacing_mm,
            bundle.clone(),
            k,
            profile,
            cfg.estimator.estimator_config(),
            1,
        );
        match built {
            Ok(mut s) => {
                let done = run_formation(&mut s, max_ticks).unwrap_or(false);
                let fails = s
                    .events
                    .iter()
                    .filter(|e| matches!(e.kind, SwarmEventKind::LatchFail))
                    .count() as u32;
                EpisodeRow {
                    episode: i as u32,
                    seed,
                    success: done,
                    attempts: 1 + fails,
                    frames: s.tick(),
                    error: None,
                }
            }
            Err(e) => EpisodeRow {
                episode: i as u32,
                seed,
                success: false,
                attempts: 0,
                frames: 0,
                error: Some(e.to_string()),
            },
        }
    })
}

/// Execute a full experiment: survey, then episodes.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput, ExperimentError> {
    cfg.validate()?;
    let params = scenario_params(cfg.scenario, cfg.spacing_mm);
    let (stats, survey_rows, frame_dumps) = run_survey(cfg, &params);
    let episode_rows = match cfg.scenario {
        Scenario::SwarmTrain => run_swarm_episodes(cfg),
        _ => run_dock_episodes(cfg, &params),
    };

    let n = episode_rows.len() as f64;
    let successes = episode_rows.iter().filter(|r| r.success).count() as f64;
    let mean_attempts = if n > 0.0 {
        episode_rows.iter().map(|r| r.attempts as f64).sum::<f64>() / n
    } else {
        f64::NAN
    };

    let report = Report {
        scenario: cfg.scenario,
        estimator: cfg.estimator,
        seed: cfg.seed,
        episodes: cfg.episodes,
        detection_pct: stats.detection_pct,
        yaw_rmse_deg: stats.yaw_rmse_deg,
        yaw_max_abs_deg: stats.yaw_max_abs_deg,
        success_rate: 100.0 * successes / n,
        mean_attempts,
        episode_rows,
    };
    Ok(RunOutput {
        report,
        survey_rows,
        dump_meta: DumpMeta {
            bundle: cfg.bundle_geometry(),
            intrinsics: default_intrinsics(),
            estimator: cfg.estimator.estimator_config(),
        },
        frame_dumps,
    })
}

/// Re-run estimation over a dumped detection stream.
pub fn replay(meta: &DumpMeta, frames: &[FrameDump]) -> (SurveyStats, Vec<SurveyRow>) {
    let mut win = FilterWindow::new(meta.estimator.window_capacity)
        .unwrap_or_else(|_| FilterWindow::new(1).unwrap());
    let mut rows = Vec::with_capacity(frames.len());
    let mut hits = 0u64;
    let mut sq_sum = 0.0;
    let mut max_abs = 0.0f64;
    for f in frames {
        let est = estimate_bundle(
            &f.detections,
            &meta.bundle,
            &meta.intrinsics,
            &mut win,
            &meta.estimator,
        );
        match est {
            Some(e) => {
                hits += 1;
                let p = to_planar(&e.camera_from_bundle);
                let err = wrap_deg(p.psi - f.truth_psi_deg);
                sq_sum += err * err;
                max_abs = max_abs.max(err.abs());
                rows.push(SurveyRow {
                    frame: f.frame,
                    n_tags: e.n_tags,
                    d_x_mm: p.d_x,
                    d_y_mm: p.d_y,
                    psi_deg: p.psi,
                    confidence: e.confidence,
                    ambiguous_flag: e.ambiguous,
                });
            }
            None => rows.push(SurveyRow {
                frame: f.frame,
                n_tags: 0,
                d_x_mm: f64::NAN,
                d_y_mm: f64::NAN,
                psi_deg: f64::NAN,
                confidence: 0.0,
                ambiguous_flag: false,
            }),
        }
    }
    let stats = SurveyStats {
        detection_pct: if frames.is_empty() {
            f64::NAN
        } else {
            100.0 * hits as f64 / frames.len() as f64
        },
        yaw_rmse_deg: if hits > 0 {
            (sq_sum / hits as f64).sqrt()
        } else {
            f64::NAN
        },
        yaw_max_abs_deg: max_abs,
    };
    (stats, rows)
}

/// Side-by-side deltas (b − a) for every report scalar.
#[derive(Debug, Clone, Serialize)]
pub struct CompareDelta {
    pub scenario: Scenario,
    pub estimator_a: EstimatorKind,
    pub estimator_b: EstimatorKind,
    pub detection_pct: f64,
    pub yaw_rmse_deg: f64,
    pub yaw_max_abs_deg: f64,
    pub success_rate: f64,
    pub mean_attempts: f64,
}

pub fn compare(a: &Report, b: &Report) -> Result<CompareDelta, ExperimentError> {
    if a.scenario != b.scenario {
        return Err(ExperimentError::ScenarioMismatch(
            a.scenario.name().to_string(),
            b.scenario.name().to_string(),
        ));
    }
    Ok(CompareDelta {
        scenario: a.scenario,
        estimator_a: a.estimator,
        estimator_b: b.estimator,
        detection_pct: b.detection_pct - a.detection_pct,
        yaw_rmse_deg: b.yaw_rmse_deg - a.yaw_rmse_deg,
        yaw_max_abs_deg: b.yaw_max_abs_deg - a.yaw_max_abs_deg,
        success_rate: b.success_rate - a.success_rate,
        mean_attempts: b.mean_attempts - a.mean_attempts,
    })
}

// ---------------------------------------------------------------------------
// deterministic text renderings
// ---------------------------------------------------------------------------

/// Report JSON, stable byte-for-byte for a given report.
pub fn report_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Human-readable comparison table, one row per estimator.
pub fn render_table(reports: &[&Report]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:<15} {:>11} {:>14} {:>13} {:>10} {:>14}",
        "scenario", "estimator", "detection %", "yaw RMSE deg", "yaw max deg", "success %", "mean attempts"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<14} {:<15} {:>11.1} {:>14.3} {:>13.2} {:>10.1} {:>14.2}",
            r.scenario.name(),
            r.estimator.name(),
            r.detection_pct,
            r.yaw_rmse_deg,
            r.yaw_max_abs_deg,
            r.success_rate,
            r.mean_attempts
        );
    }
    out
}

pub fn render_compare(d: &CompareDelta) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "scenario {}: deltas ({} minus {})",
        d.scenario.name(),
        d.estimator_b.name(),
        d.estimator_a.name()
    );
    let _ = writeln!(out, "  detection_pct    {:+.3}", d.detection_pct);
    let _ = writeln!(out, "  yaw_rmse_deg     {:+.3}", d.yaw_rmse_deg);
    let _ = writeln!(out, "  yaw_max_abs_deg  {:+.3}", d.yaw_max_abs_deg);
    let _ = writeln!(out, "  success_rate     {:+.3}", d.success_rate);
    let _ = writeln!(out, "  mean_attempts    {:+.3}", d.mean_attempts);
    out
}

/// Per-frame estimate log as CSV.
pub fn survey_csv(rows: &[SurveyRow]) -> String {
    let mut out = String::from("frame,n_tags,d_x_mm,d_y_mm,psi_deg,confidence,ambiguous_flag\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.frame,
            r.n_tags,
            r.d_x_mm,
            r.d_y_mm,
            r.psi_deg,
            r.confidence,
            r.ambiguous_flag as u8
        );
    }
    out
}

/// Detection stream as JSON-lines: meta first, then one frame per line.
pub fn detections_jsonl(meta: &DumpMeta, frames: &[FrameDump]) -> String {
    let mut out = serde_json::to_string(meta).expect("meta serializes");
    out.push('\n');
    for f in frames {
        out.push_str(&serde_json::to_string(f).expect("frame serializes"));
        out.push('\n');
    }
    out
}

/// Parse a detection dump produced by [`detections_jsonl`].
pub fn parse_detections_jsonl(s: &str) -> Result<(DumpMeta, Vec<FrameDump>), ExperimentError> {
    let mut lines = s.lines().filter(|l| !l.trim().is_empty());
    let meta_line = lines
        .next()
        .ok_or_else(|| ExperimentError::InvalidConfig("empty detection dump".into()))?;
    let meta: DumpMeta = serde_json::from_str(meta_line)?;
    let mut frames = Vec::new();
    for line in lines {
        frames.push(serde_json::from_str(line)?);
    }
    Ok((meta, frames))
}
