//! Seeded, deterministic detection simulator.
//!
//! Two noise channels, matching what actually broke the field runs: sub-pixel
//! corner jitter and bright reflection disks that occlude tags. Reflections
//! come from an ambient channel (disks placed uniformly over the image) and
//! an optional specular channel (a glint fires on a tag when the mirror ray
//! of a fixed light direction lines up with the camera, so tags on different
//! planes glint in disjoint pose sets). A disk drops a tag when it covers at
//! least `occlusion_kill_frac` of its projected area or contains a corner;
//! with `corrupt_instead_of_kill` the corner case displaces the corner
//! instead, producing the yaw-impulse outliers the median filter targets.
//!
//! Everything is a pure function of (profile, frame index): streams are
//! split per (seed, frame, lane) so changing the follower count never
//! perturbs the leader's noise.

use nalgebra::{Point2, Point3, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::Detection;
use crate::geometry::{
    project, tag_corners_bundle_frame, BundleGeometry, CameraIntrinsics, Pose6D,
};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("empty frame list")]
    EmptyInput,
    #[error("invalid noise profile: {0}")]
    InvalidProfile(String),
}

/// Specular glint model: a fixed light direction (camera frame); a tag
/// glints when its mirror ray points within `half_angle_deg` of the camera.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GlintModel {
    pub light_dir_cam: [f64; 3],
    pub half_angle_deg: f64,
    /// Micro-facet jitter applied to the tag normal before the mirror test,
    /// degrees (1-sigma).
    #[serde(default)]
    pub normal_jitter_deg: f64,
}

/// Slow lateral wander of the tag carrier (station-keeping error).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TargetSway {
    pub amplitude_mm: f64,
    pub period_s: f64,
}

/// All simulator noise knobs. `NoiseProfile::zero(seed)` is the exact,
/// noise-free profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseProfile {
    /// Per-corner-coordinate Gaussian jitter, px.
    pub pixel_sigma: f64,
    /// Poisson mean of ambient reflection disks per frame.
    pub reflection_rate: f64,
    /// Disk radius as a fraction of the mean projected tag diagonal.
    pub reflection_radius_frac: f64,
    /// Covered-area fraction above which a tag is undetected.
    pub occlusion_kill_frac: f64,
    /// Roll/pitch oscillation amplitude, degrees.
    pub wave_amplitude_deg: f64,
    pub wave_period_s: f64,
    pub seed: u64,
    /// Displace a disk-covered corner instead of dropping the tag.
    #[serde(default)]
    pub corrupt_instead_of_kill: bool,
    #[serde(default)]
    pub glint: Option<GlintModel>,
    #[serde(default)]
    pub target_sway: Option<TargetSway>,
    #[serde(default = "default_fps")]
    pub fps: f64,
}

fn default_fps() -> f64 {
    30.0
}

impl NoiseProfile {
    pub fn zero(seed: u64) -> Self {
        NoiseProfile {
            pixel_sigma: 0.0,
            reflection_rate: 0.0,
            reflection_radius_frac: 0.0,
            occlusion_kill_frac: 0.25,
            wave_amplitude_deg: 0.0,
            wave_period_s: 1.0,
            seed,
            corrupt_instead_of_kill: false,
            glint: None,
            target_sway: None,
            fps: 30.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.pixel_sigma < 0.0
            || self.reflection_rate < 0.0
            || self.reflection_radius_frac < 0.0
            || self.wave_amplitude_deg < 0.0
        {
            return Err(SimError::InvalidProfile(
                "rates and sigmas must be non-negative".into(),
            ));
        }
        if !(self.occlusion_kill_frac > 0.0 && self.occlusion_kill_frac <= 1.0) {
            return Err(SimError::InvalidProfile(format!(
                "occlusion_kill_frac must be in (0, 1], got {}",
                self.occlusion_kill_frac
            )));
        }
        if self.wave_period_s <= 0.0 || self.fps <= 0.0 {
            return Err(SimError::InvalidProfile(
                "wave period and fps must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Deterministic lateral offset of the tag carrier at frame `frame`.
    pub fn target_sway_offset(&self, frame: u64) -> f64 {
        match self.target_sway {
            Some(s) => {
                let t = frame as f64 / self.fps;
                let phase = phase_of(self.seed, 4);
                s.amplitude_mm * (std::f64::consts::TAU * t / s.period_s + phase).sin()
            }
            None => 0.0,
        }
    }
}

/// One reflection disk in image space.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReflectionEvent {
    pub center: [f64; 2],
    pub radius: f64,
    pub frame_index: u64,
}

/// Output of one simulated frame: what the detector would report, the disks
/// drawn, and the wave-perturbed true pose the detections correspond to.
#[derive(Debug, Clone)]
pub struct FrameSim {
    pub detections: Vec<Detection>,
    pub reflections: Vec<ReflectionEvent>,
    pub truth_camera_from_bundle: Pose6D,
}

// lane layout for stream splitting
const LANE_PHASE: u64 = 0;
const LANE_REFLECT: u64 = 1;
const LANE_JITTER: u64 = 0x100;
const LANE_GLINT: u64 = 0x200;
const LANE_CORRUPT: u64 = 0x300;

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn substream(seed: u64, frame: u64, lane: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(frame.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ mix64(lane))))
}

fn phase_of(seed: u64, idx: u64) -> f64 {
    let mut rng = substream(seed, 0, LANE_PHASE + (idx << 32));
    rng.gen_range(0.0..std::f64::consts::TAU)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps the stream layout obvious and portable
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let l = (-mean).exp();
    let mut k = 0usize;
    let mut p = 1.0f64;
    loop {
        p *= rng.gen_range(0.0f64..1.0);
        if p < l || k > 10_000 {
            return k;
        }
        k += 1;
    }
}

/// Wave-perturbed truth: sinusoidal roll/pitch on the tag carrier (one phase
/// set) and on the camera boat (an independent phase set).
pub fn wave_perturbed_truth(
    truth_camera_from_bundle: &Pose6D,
    np: &NoiseProfile,
    frame: u64,
) -> Pose6D {
    if np.wave_amplitude_deg == 0.0 {
        return *truth_camera_from_bundle;
    }
    let t = frame as f64 / np.fps;
    let w = std::f64::consts::TAU * t / np.wave_period_s;
    let a = np.wave_amplitude_deg.to_radians();
    let osc = |idx: u64| a * (w + phase_of(np.seed, idx)).sin();
    // carrier tilts about the bundle's in-plane x and out-of-plane z
    let r_bundle = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), osc(0))
        * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), osc(1));
    // camera boat pitches/rolls about its own x and z
    let r_cam = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), osc(2))
        * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), osc(3));
    let bundle_pert = Pose6D::new(Vector3::zeros(), r_bundle);
    let cam_pert = Pose6D::new(Vector3::zeros(), r_cam);
    cam_pert
        .invert()
        .compose(truth_camera_from_bundle)
        .compose(&bundle_pert)
}

/// Exact area of intersection between a disk and a convex polygon, via
/// Green's theorem over circle-clipped edges.
pub fn disk_polygon_area(center: &Point2<f64>, r: f64, poly: &[Point2<f64>]) -> f64 {
    if r <= 0.0 || poly.len() < 3 {
        return 0.0;
    }
    let pts: Vec<Vector2<f64>> = poly
        .iter()
        .map(|p| Vector2::new(p.x - center.x, p.y - center.y))
        .collect();
    let cross = |a: &Vector2<f64>, b: &Vector2<f64>| a.x * b.y - a.y * b.x;
    let mut total = 0.0;
    for i in 0..pts.len() {
        let a = pts[i];
        let b = pts[(i + 1) % pts.len()];
        // segment-circle intersection parameters in (0, 1)
        let d = b - a;
        let qa = d.norm_squared();
        let qb = 2.0 * a.dot(&d);
        let qc = a.norm_squared() - r * r;
        let mut ts = vec![0.0f64];
        if qa > 1e-300 {
            let disc = qb * qb - 4.0 * qa * qc;
            if disc > 0.0 {
                let sq = disc.sqrt();
                for t in [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)] {
                    if t > 1e-12 && t < 1.0 - 1e-12 {
                        ts.push(t);
                    }
                }
            }
        }
        ts.push(1.0);
        ts.sort_by(|x, y| x.total_cmp(y));
        for pair in ts.windows(2) {
            let p = a + d * pair[0];
            let q = a + d * pair[1];
            let mid = a + d * (0.5 * (pair[0] + pair[1]));
            if mid.norm() <= r {
                total += 0.5 * cross(&p, &q);
            } else {
                let ang = cross(&p, &q).atan2(p.dot(&q));
                total += 0.5 * r * r * ang;
            }
        }
    }
    total.abs()
}

fn polygon_area(poly: &[Point2<f64>]) -> f64 {
    let mut s = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        s += a.x * b.y - b.x * a.y;
    }
    0.5 * s.abs()
}

/// Does this disk take the tag out: covers at least `kill_frac` of the
/// projected quad, or contains one of its corners.
pub fn disk_kills_tag(
    center: &Point2<f64>,
    radius: f64,
    corners: &[Point2<f64>; 4],
    kill_frac: f64,
) -> bool {
    let area = polygon_area(corners);
    if area <= 0.0 {
        return true;
    }
    if disk_polygon_area(center, radius, corners) / area >= kill_frac - 1e-12 {
        return true;
    }
    corners
        .iter()
        .any(|c| (c - center).norm() <= radius)
}

fn projected_quad(
    cam_from_bundle: &Pose6D,
    placement: &crate::geometry::TagPlacement,
    k: &CameraIntrinsics,
) -> Option<[Point2<f64>; 4]> {
    let mut out = [Point2::origin(); 4];
    for (i, c) in tag_corners_bundle_frame(placement).iter().enumerate() {
        let pc = cam_from_bundle.transform_point(c);
        out[i] = project(k, &pc)?;
    }
    Some(out)
}

fn quad_in_bounds(quad: &[Point2<f64>; 4], k: &CameraIntrinsics) -> bool {
    quad.iter().all(|p| k.contains(p))
}

fn quad_convex(quad: &[Point2<f64>; 4]) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let a = quad[i];
        let b = quad[(i + 1) % 4];
        let c = quad[(i + 2) % 4];
        let cr = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
        if cr.abs() < 1e-9 {
            return false;
        }
        if sign == 0.0 {
            sign = cr.signum();
        } else if cr.signum() != sign {
            return false;
        }
    }
    true
}

/// Simulate one camera frame against the (unperturbed) true pose.
pub fn simulate_frame(
    truth_camera_from_bundle: &Pose6D,
    bundle: &BundleGeometry,
    k: &CameraIntrinsics,
    np: &NoiseProfile,
    frame: u64,
) -> FrameSim {
    let truth = wave_perturbed_truth(truth_camera_from_bundle, np, frame);

    // project every tag and gather jittered quads
    struct TagObs {
        slot: usize,
        tag_id: u32,
        quad: [Point2<f64>; 4],
        center_cam: Point3<f64>,
        normal_cam: Vector3<f64>,
        diag_px: f64,
    }
    let mut obs = Vec::new();
    for (slot, placement) in bundle.placements.iter().enumerate() {
        let Some(mut quad) = projected_quad(&truth, placement, k) else {
            continue;
        };
        let cam_from_tag = truth.compose(&placement.tag_to_bundle);
        if cam_from_tag.translation.z <= 0.0 {
            continue;
        }
        let diag = (quad[2] - quad[0]).norm().max((quad[3] - quad[1]).norm());
        if np.pixel_sigma > 0.0 {
            let mut rng = substream(np.seed, frame, LANE_JITTER + slot as u64);
            for c in quad.iter_mut() {
                c.x += gauss(&mut rng) * np.pixel_sigma;
                c.y += gauss(&mut rng) * np.pixel_sigma;
            }
        }
        obs.push(TagObs {
            slot,
            tag_id: placement.tag_id,
            quad,
            center_cam: Point3::from(cam_from_tag.translation),
            normal_cam: cam_from_tag.rotation * Vector3::z(),
            diag_px: diag,
        });
    }

    // ambient reflection disks, placed uniformly over the image
    let mut reflections = Vec::new();
    let ref_diag = if obs.is_empty() {
        50.0
    } else {
        obs.iter().map(|o| o.diag_px).sum::<f64>() / obs.len() as f64
    };
    {
        let mut rng = substream(np.seed, frame, LANE_REFLECT);
        let n = poisson(&mut rng, np.reflection_rate);
        for _ in 0..n {
            let cx = rng.gen_range(0.0..k.width as f64);
            let cy = rng.gen_range(0.0..k.height as f64);
            reflections.push(ReflectionEvent {
                center: [cx, cy],
                radius: np.reflection_radius_frac * ref_diag,
                frame_index: frame,
            });
        }
    }

    // specular glints: fire per tag when the mirror ray lines up with the
    // camera; the disk lands on that tag
    if let Some(glint) = np.glint {
        let l = Vector3::new(
            glint.light_dir_cam[0],
            glint.light_dir_cam[1],
            glint.light_dir_cam[2],
        )
        .normalize();
        for o in &obs {
            let mut rng = substream(np.seed, frame, LANE_GLINT + o.slot as u64);
            let mut n = o.normal_cam;
            if glint.normal_jitter_deg > 0.0 {
                let ax = Vector3::new(gauss(&mut rng), gauss(&mut rng), gauss(&mut rng));
                if ax.norm() > 1e-12 {
                    let jitter = UnitQuaternion::from_axis_angle(
                        &nalgebra::Unit::new_normalize(ax),
                        gauss(&mut rng).abs() * glint.normal_jitter_deg.to_radians(),
                    );
                    n = jitter * n;
                }
            }
            let mirror = l - 2.0 * l.dot(&n) * n;
            let v = -o.center_cam.coords.normalize();
            let misalign = mirror.dot(&v).clamp(-1.0, 1.0).acos().to_degrees();
            if misalign < glint.half_angle_deg {
                let c = Point2::from(
                    (o.quad[0].coords + o.quad[1].coords + o.quad[2].coords + o.quad[3].coords)
                        / 4.0,
                );
                // large enough to wipe out the glinting tag (a centered disk
                // of 0.45 diag covers ~64% of the quad), small enough to
                // spare an adjacent plane
                reflections.push(ReflectionEvent {
                    center: [c.x, c.y],
                    radius: 0.45 * o.diag_px,
                    frame_index: frame,
                });
            }
        }
    }

    // apply disks: kill by coverage, kill or corrupt by corner containment
    let mut detections = Vec::new();
    'tags: for o in obs {
        let mut quad = o.quad;
        let area = polygon_area(&quad);
        for (ri, refl) in reflections.iter().enumerate() {
            let c = Point2::new(refl.center[0], refl.center[1]);
            if area <= 0.0 {
                continue 'tags;
            }
            let coverage = disk_polygon_area(&c, refl.radius, &quad) / area;
            if coverage >= np.occlusion_kill_frac - 1e-12 {
                continue 'tags;
            }
            let hit = (0..4).find(|&i| (quad[i] - c).norm() <= refl.radius);
            if let Some(i) = hit {
                if np.corrupt_instead_of_kill {
                    let mut rng =
                        substream(np.seed, frame, LANE_CORRUPT + ((o.slot as u64) << 8) + ri as u64);
                    let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                    let mag = rng.gen_range(0.0..refl.radius);
                    quad[i].x += mag * ang.cos();
                    quad[i].y += mag * ang.sin();
                } else {
                    continue 'tags;
                }
            }
        }
        if !quad_in_bounds(&quad, k) || !quad_convex(&quad) {
            continue;
        }
        detections.push(Detection {
            tag_id: o.tag_id,
            corners: quad.map(|p| [p.x, p.y]),
            frame_index: frame,
        });
    }

    FrameSim {
        detections,
        reflections,
        truth_camera_from_bundle: truth,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateMode {
    /// Fraction of frames where the leader tag is detected.
    Single,
    /// Fraction of frames where at least one tag is detected.
    Bundle,
}

pub fn detection_rate(
    frames: &[Vec<Detection>],
    mode: RateMode,
    leader_id: u32,
) -> Result<f64, SimError> {
    if frames.is_empty() {
        return Err(SimError::EmptyInput);
    }
    let hits = frames
        .iter()
        .filter(|f| match mode {
            RateMode::Single => f.iter().any(|d| d.tag_id == leader_id),
            RateMode::Bundle => !f.is_empty(),
        })
        .count();
    Ok(hits as f64 / frames.len() as f64)
}
