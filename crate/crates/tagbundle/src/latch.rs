//! 2D water-plane boat kinematics and the camera–target latching loop.
//!
//! The boat is holonomic (four thrusters: surge, sway, yaw) and integrates
//! first-order kinematics at a fixed tick. Guidance is proportional control
//! with saturation on the estimated planar pose. An episode approaches a
//! docked tag bundle, evaluates the latch thresholds on the true pose when
//! the contact plane is crossed, and on failure retreats to the initial
//! standoff (with waypoint noise standing in for lidar accuracy) and
//! retries.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{estimate_bundle, EstimatorConfig, FilterWindow};
use crate::geometry::{to_planar, wrap_deg, BundleGeometry, CameraIntrinsics, PlanarPose, Pose6D};
use crate::sim::{simulate_frame, NoiseProfile};

#[derive(Debug, Error, PartialEq)]
pub enum LatchError {
    #[error("invalid thresholds: all bounds must be positive")]
    InvalidThresholds,
    #[error("max_attempts must be >= 1")]
    NoAttempts,
}

/// Success bounds evaluated at contact.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LatchThresholds {
    pub dx_max: f64,
    pub dy_max: f64,
    pub yaw_max: f64,
}

impl LatchThresholds {
    pub fn new(dx_max: f64, dy_max: f64, yaw_max: f64) -> Result<Self, LatchError> {
        if dx_max <= 0.0 || dy_max <= 0.0 || yaw_max <= 0.0 {
            return Err(LatchError::InvalidThresholds);
        }
        Ok(LatchThresholds {
            dx_max,
            dy_max,
            yaw_max,
        })
    }

    /// Indoor dock-face bounds.
    pub fn indoor() -> Self {
        LatchThresholds {
            dx_max: 10.0,
            dy_max: 40.0,
            yaw_max: 27.5,
        }
    }

    /// Outdoor boat-to-boat bounds (tag mounted inside the hull).
    pub fn outdoor() -> Self {
        LatchThresholds {
            dx_max: 500.0,
            dy_max: 40.0,
            yaw_max: 27.5,
        }
    }
}

/// Boat pose and body velocities on the water plane.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoatState {
    /// (W_x, W_y), mm.
    pub position: Vector2<f64>,
    /// Heading, degrees in (-180, 180]; 0 points along world +X.
    pub heading_deg: f64,
    /// (surge mm/s, sway mm/s, yaw deg/s), body frame.
    pub velocity: (f64, f64, f64),
}

impl BoatState {
    pub fn at(x: f64, y: f64, heading_deg: f64) -> Self {
        BoatState {
            position: Vector2::new(x, y),
            heading_deg: wrap_deg(heading_deg),
            velocity: (0.0, 0.0, 0.0),
        }
    }
}

/// Commanded body velocities.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Command {
    pub surge: f64,
    pub sway: f64,
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VelocityLimits {
    pub surge_max: f64,
    pub sway_max: f64,
    pub yaw_rate_max: f64,
}

impl Default for VelocityLimits {
    fn default() -> Self {
        VelocityLimits {
            surge_max: 300.0,
            sway_max: 150.0,
            yaw_rate_max: 30.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Gains {
    pub k_x: f64,
    pub k_y: f64,
    pub k_psi: f64,
}

impl Default for Gains {
    fn default() -> Self {
        Gains {
            k_x: 0.8,
            k_y: 1.0,
            k_psi: 1.0,
        }
    }
}

/// First-order kinematic step with saturated body velocities.
pub fn step_boat(state: &BoatState, cmd: &Command, dt: f64, limits: &VelocityLimits) -> BoatState {
    assert!(dt > 0.0, "dt must be positive");
    let surge = cmd.surge.clamp(-limits.surge_max, limits.surge_max);
    let sway = cmd.sway.clamp(-limits.sway_max, limits.sway_max);
    let yaw = cmd.yaw_rate.clamp(-limits.yaw_rate_max, limits.yaw_rate_max);
    let h = state.heading_deg.to_radians();
    let forward = Vector2::new(h.cos(), h.sin());
    let right = Vector2::new(h.sin(), -h.cos());
    BoatState {
        position: state.position + dt * (surge * forward + sway * right),
        heading_deg: wrap_deg(state.heading_deg + dt * yaw),
        velocity: (surge, sway, yaw),
    }
}

/// Proportional guidance toward (d_x = standoff, d_y = 0, psi = 0).
pub fn guidance(planar: &PlanarPose, gains: &Gains, standoff_mm: f64) -> Command {
    Command {
        surge: gains.k_x * (planar.d_x - standoff_mm),
        sway: gains.k_y * planar.d_y,
        yaw_rate: gains.k_psi * planar.psi,
    }
}

/// True iff the planar pose is within the latch thresholds.
pub fn check_latch(planar: &PlanarPose, th: &LatchThresholds) -> bool {
    planar.d_x < th.dx_max && planar.d_y.abs() < th.dy_max && planar.psi.abs() < th.yaw_max
}

/// Camera world pose for a boat: camera at the boat position, boresight
/// along the heading, +X right, +Y down.
pub fn world_from_camera(boat: &BoatState) -> Pose6D {
    let h = boat.heading_deg.to_radians();
    let x_cam = Vector3::new(h.sin(), -h.cos(), 0.0);
    let y_cam = Vector3::new(0.0, 0.0, -1.0);
    let z_cam = Vector3::new(h.cos(), h.sin(), 0.0);
    let r = nalgebra::Matrix3::from_columns(&[x_cam, y_cam, z_cam]);
    Pose6D::from_rotation_matrix(
        Vector3::new(boat.position.x, boat.position.y, 0.0),
        &r,
    )
}

/// World pose of a tag bundle standing at `position` with its outward normal
/// along `facing_deg` (bundle +Y up = world +Z).
pub fn world_from_bundle(position: Vector2<f64>, facing_deg: f64) -> Pose6D {
    let f = facing_deg.to_radians();
    let z_tag = Vector3::new(f.cos(), f.sin(), 0.0);
    let y_tag = Vector3::new(0.0, 0.0, 1.0);
    let x_tag = y_tag.cross(&z_tag);
    let r = nalgebra::Matrix3::from_columns(&[x_tag, y_tag, z_tag]);
    Pose6D::from_rotation_matrix(Vector3::new(position.x, position.y, 0.0), &r)
}

/// Episode outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub attempts: u32,
    pub frames: u64,
    pub final_planar: PlanarPose,
}

/// One row of an episode trace.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub tick: u64,
    pub attempt: u32,
    pub truth: PlanarPose,
    pub estimate: Option<PlanarPose>,
    pub command: Command,
}

#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    pub bundle: BundleGeometry,
    pub intrinsics: CameraIntrinsics,
    pub profile: NoiseProfile,
    pub estimator: EstimatorConfig,
    pub thresholds: LatchThresholds,
    /// Guidance distance target, mm (0 for a dock-face tag, 500 when the tag
    /// sits inside the target hull).
    pub standoff_mm: f64,
    /// True d_x at which contact is evaluated, mm.
    pub contact_dx_mm: f64,
    /// Below this estimated d_x a lost tag triggers a straight slow creep
    /// instead of a hold (the tag overflows the field of view close in).
    pub blind_creep_dx_mm: f64,
    pub start: BoatState,
    pub gains: Gains,
    pub limits: VelocityLimits,
    pub tick_hz: f64,
    pub max_attempts: u32,
    pub attempt_timeout_s: f64,
    pub no_pose_timeout_s: f64,
    pub seed: u64,
    pub record_trace: bool,
}

impl EpisodeConfig {
    pub fn new(
        bundle: BundleGeometry,
        intrinsics: CameraIntrinsics,
        profile: NoiseProfile,
        estimator: EstimatorConfig,
        thresholds: LatchThresholds,
        start: BoatState,
        seed: u64,
    ) -> Self {
        EpisodeConfig {
            bundle,
            intrinsics,
            profile,
            estimator,
            thresholds,
            standoff_mm: 0.0,
            contact_dx_mm: 10.0,
            blind_creep_dx_mm: 400.0,
            start,
            gains: Gains::default(),
            limits: VelocityLimits::default(),
            tick_hz: 30.0,
            max_attempts: 10,
            attempt_timeout_s: 90.0,
            no_pose_timeout_s: 2.0,
            seed,
            record_trace: false,
        }
    }
}

/// Closed-loop docking episode: simulate → estimate → guide → step, with
/// auto-recovery retries. The tag bundle stands at the world origin facing
/// +X; the boat starts on the +X side looking back at it.
pub fn run_episode(cfg: &EpisodeConfig) -> Result<(EpisodeResult, Vec<TraceRow>), LatchError> {
    if cfg.max_attempts < 1 {
        return Err(LatchError::NoAttempts);
    }
    let dt = 1.0 / cfg.tick_hz;
    let mut profile = cfg.profile.clone();
    profile.seed = profile.seed ^ cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut boat = cfg.start;
    let mut win = FilterWindow::new(cfg.estimator.window_capacity)
        .unwrap_or_else(|_| FilterWindow::new(1).unwrap());
    let mut frame: u64 = 0;
    let mut trace = Vec::new();
    let attempt_ticks = (cfg.attempt_timeout_s * cfg.tick_hz) as u64;
    let no_pose_ticks = (cfg.no_pose_timeout_s * cfg.tick_hz) as u64;
    let mut recovery_rng = ChaCha8Rng::seed_from_u64(profile.seed ^ 0xA5A5_A5A5);

    let mut attempts = 1u32;
    let mut last_planar: Option<PlanarPose> = None;

    let truth_pose = |boat: &BoatState, profile: &NoiseProfile, frame: u64| -> Pose6D {
        let sway = profile.target_sway_offset(frame);
        let bundle_world = world_from_bundle(Vector2::new(0.0, sway), 0.0);
        world_from_camera(boat).invert().compose(&bundle_world)
    };

    loop {
        // one attempt
        let mut tick_in_attempt: u64 = 0;
        let mut no_pose_streak: u64 = 0;
        let outcome: Option<PlanarPose> = loop {
            let truth = truth_pose(&boat, &profile, frame);
            let fsim = simulate_frame(&truth, &cfg.bundle, &cfg.intrinsics, &profile, frame);
            let est = estimate_bundle(
                &fsim.detections,
                &cfg.bundle,
                &cfg.intrinsics,
                &mut win,
                &cfg.estimator,
            );
            let cmd = match &est {
                Some(e) => {
                    no_pose_streak = 0;
                    let planar = to_planar(&e.camera_from_bundle);
                    last_planar = Some(planar);
                    guidance(&planar, &cfg.gains, cfg.standoff_mm)
                }
                None => {
                    no_pose_streak += 1;
                    match last_planar {
                        // close in the tag overflows the view: creep straight
                        Some(p) if p.d_x < cfg.blind_creep_dx_mm => Command {
                            surge: 100.0,
                            sway: 0.0,
                            yaw_rate: 0.0,
                        },
                        _ => Command::default(),
                    }
                }
            };
            boat = step_boat(&boat, &cmd, dt, &cfg.limits);
            let truth_planar = to_planar(&crate::sim::wave_perturbed_truth(
                &truth_pose(&boat, &profile, frame),
                &profile,
                frame,
            ));
            if cfg.record_trace {
                trace.push(TraceRow {
                    tick: frame,
                    attempt: attempts,
                    truth: truth_planar,
                    estimate: est.as_ref().map(|e| to_planar(&e.camera_from_bundle)),
                    command: cmd,
                });
            }
            frame += 1;
            tick_in_attempt += 1;

            if truth_planar.d_x <= cfg.contact_dx_mm {
                break Some(truth_planar);
            }
            let in_blind_zone = matches!(last_planar, Some(p) if p.d_x < cfg.blind_creep_dx_mm);
            if no_pose_streak >= no_pose_ticks && !in_blind_zone {
                break None;
            }
            if tick_in_attempt >= attempt_ticks {
                break None;
            }
        };

        let (contact_planar, success) = match outcome {
            Some(p) => (p, check_latch(&p, &cfg.thresholds)),
            None => (
                last_planar.unwrap_or(PlanarPose {
                    d_x: f64::INFINITY,
                    d_y: f64::INFINITY,
                    psi: 180.0,
                }),
                false,
            ),
        };

        if success {
            return Ok((
                EpisodeResult {
                    success: true,
                    attempts,
                    frames: frame,
                    final_planar: contact_planar,
                },
                trace,
            ));
        }
        if attempts >= cfg.max_attempts {
            return Ok((
                EpisodeResult {
                    success: false,
                    attempts,
                    frames: frame,
                    final_planar: contact_planar,
                },
                trace,
            ));
        }

        // recovery: retreat to the initial standoff with waypoint noise
        // (stand-in for the ±100 mm lidar localization accuracy)
        attempts += 1;
        let start_d = cfg.start.position.norm();
        let wp_x = start_d + 100.0 + recovery_rng.gen_range(-100.0..100.0);
        let wp_y = recovery_rng.gen_range(-100.0..100.0);
        let waypoint = Vector2::new(wp_x, wp_y);
        win.clear();
        last_planar = None;
        let mut recovery_ticks: u64 = 0;
        while (boat.position - waypoint).norm() > 30.0 && recovery_ticks < attempt_ticks {
            let to_wp = waypoint - boat.position;
            let dir = to_wp.normalize();
            let step = cfg.limits.surge_max.min(to_wp.norm() / dt);
            // drive on world-frame velocity (lidar navigation stand-in),
            // turning the bow back toward the target
            let face_target = wrap_deg(
                (-boat.position.y).atan2(-boat.position.x).to_degrees() - boat.heading_deg,
            );
            let h = boat.heading_deg.to_radians();
            let forward = Vector2::new(h.cos(), h.sin());
            let right = Vector2::new(h.sin(), -h.cos());
            let cmd = Command {
                surge: step * dir.dot(&forward),
                sway: step * dir.dot(&right),
                yaw_rate: cfg.gains.k_psi * face_target,
            };
            boat = step_boat(&boat, &cmd, dt, &cfg.limits);
            frame += 1;
            recovery_ticks += 1;
        }
        // settle the heading on the target before retrying
        let mut settle: u64 = 0;
        loop {
            let face_target = wrap_deg(
                (-boat.position.y).atan2(-boat.position.x).to_degrees() - boat.heading_deg,
            );
            if face_target.abs() < 1.0 || settle > 300 {
                break;
            }
            let cmd = Command {
                surge: 0.0,
                sway: 0.0,
                yaw_rate: cfg.gains.k_psi * face_target,
            };
            boat = step_boat(&boat, &cmd, dt, &cfg.limits);
            frame += 1;
            settle += 1;
        }
    }
}
