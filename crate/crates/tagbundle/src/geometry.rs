//! Frames, rigid transforms, pinhole projection, and the construction of
//! multi-plane tag bundles (leader tag + followers hinged off its edge).
//!
//! Conventions used throughout the crate:
//!
//! - camera frame: +Z forward (boresight), +X right, +Y down;
//! - tag frame: +X right, +Y up, +Z out of the printed face, origin at the
//!   tag center;
//! - bundle frame: identical to the leader tag's frame;
//! - world frame: water plane, +Z up.
//!
//! Angles are degrees at API boundaries and radians internally. Distances are
//! millimetres everywhere.

use nalgebra::{Matrix3, Point2, Point3, Quaternion, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("tag side length must be positive, got {0}")]
    NonPositiveSide(f64),
    #[error("hinge angle {0}° out of range (|g| must be < 90°)")]
    HingeAngleOutOfRange(f64),
    #[error("tag center is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Rigid transform: translation in millimetres plus a unit quaternion.
///
/// A `Pose6D` named `a_from_b` maps coordinates of frame `b` into frame `a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6D {
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

/// Wire form of [`Pose6D`]: `{t: [x,y,z], q: [w,x,y,z]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoseWire {
    t: [f64; 3],
    q: [f64; 4],
}

impl Serialize for Pose6D {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let q = self.rotation.quaternion();
        PoseWire {
            t: [self.translation.x, self.translation.y, self.translation.z],
            q: [q.w, q.i, q.j, q.k],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose6D {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = PoseWire::deserialize(d)?;
        Ok(Pose6D {
            translation: Vector3::new(w.t[0], w.t[1], w.t[2]),
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(
                w.q[0], w.q[1], w.q[2], w.q[3],
            )),
        })
    }
}

impl Pose6D {
    pub fn identity() -> Self {
        Pose6D {
            translation: Vector3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn new(translation: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Pose6D {
            translation,
            rotation,
        }
    }

    pub fn from_rotation_matrix(translation: Vector3<f64>, r: &Matrix3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
        Pose6D {
            translation,
            rotation: UnitQuaternion::from_rotation_matrix(&rot),
        }
    }

    /// `self ∘ other`: if `self` is `a_from_b` and `other` is `b_from_c`,
    /// the result is `a_from_c`.
    pub fn compose(&self, other: &Pose6D) -> Pose6D {
        Pose6D {
            translation: self.translation + self.rotation * other.translation,
            rotation: self.rotation * other.rotation,
        }
    }

    pub fn invert(&self) -> Pose6D {
        let r_inv = self.rotation.inverse();
        Pose6D {
            translation: -(r_inv * self.translation),
            rotation: r_inv,
        }
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Geodesic rotation distance to `other`, radians.
    pub fn rotation_angle_to(&self, other: &Pose6D) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

/// Reduced pose on the water plane, following the camera–tag convention:
/// a camera directly facing the tag center reads `d_y = 0` and `psi = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarPose {
    /// Longitudinal distance along the camera boresight, mm.
    pub d_x: f64,
    /// Lateral offset, mm (positive to the camera's right).
    pub d_y: f64,
    /// Yaw of the tag plane relative to the boresight, degrees in (-180, 180].
    pub psi: f64,
}

/// Pinhole camera intrinsics (no distortion).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if cx < 0.0 || cx >= width as f64 || cy < 0.0 || cy >= height as f64 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside image {width}x{height}"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn contains(&self, p: &Point2<f64>) -> bool {
        p.x >= 0.0 && p.x < self.width as f64 && p.y >= 0.0 && p.y < self.height as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagRole {
    Leader,
    Follower,
}

/// One tag's placement inside a bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TagPlacement {
    pub tag_id: u32,
    /// Side length `l`, mm.
    #[serde(rename = "side_mm")]
    pub side_length: f64,
    /// bundle_from_tag transform.
    #[serde(rename = "pose")]
    pub tag_to_bundle: Pose6D,
    pub role: TagRole,
}

/// Leader tag plus followers hinged off its edge, each on its own plane.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleGeometry {
    pub placements: Vec<TagPlacement>,
    /// Hinge rotation step `g` between consecutive planes, degrees.
    #[serde(rename = "g_deg")]
    pub rotation_step_deg: f64,
    /// Hinge axis direction in the bundle frame (the shared edge direction).
    #[serde(rename = "hinge")]
    pub hinge_axis: Vector3<f64>,
}

impl BundleGeometry {
    pub fn leader(&self) -> &TagPlacement {
        self.placements
            .iter()
            .find(|p| p.role == TagRole::Leader)
            .expect("bundle has exactly one leader")
    }

    pub fn placement_by_id(&self, tag_id: u32) -> Option<&TagPlacement> {
        self.placements.iter().find(|p| p.tag_id == tag_id)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("bundle serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Build a bundle: the leader plane is the bundle XY-plane at the origin,
/// follower `k` shares the leader's right edge (pushed out by `hinge_offset`
/// in-plane to model a screen bezel gap) and is folded back by `k·g_deg`
/// about that edge.
pub fn build_bundle(
    leader_side: f64,
    follower_count: usize,
    g_deg: f64,
    hinge_offset: f64,
) -> Result<BundleGeometry, GeometryError> {
    if leader_side <= 0.0 {
        return Err(GeometryError::NonPositiveSide(leader_side));
    }
    if g_deg.abs() >= 90.0 {
        return Err(GeometryError::HingeAngleOutOfRange(g_deg));
    }
    let l = leader_side;
    let hinge_axis = Vector3::y(); // shared vertical edge
    let hinge_point = Vector3::new(l / 2.0 + hinge_offset, 0.0, 0.0);

    let mut placements = Vec::with_capacity(follower_count + 1);
    placements.push(TagPlacement {
        tag_id: 0,
        side_length: l,
        tag_to_bundle: Pose6D::identity(),
        role: TagRole::Leader,
    });
    for k in 1..=follower_count {
        let angle = (k as f64 * g_deg).to_radians();
        // fold back: positive g turns the follower's far edge away from the
        // camera, normal toward +X
        let rot = UnitQuaternion::from_axis_angle(&Unit::new_normalize(hinge_axis), angle);
        let center_unrotated = Vector3::new(l + hinge_offset, 0.0, 0.0);
        let center = hinge_point + rot * (center_unrotated - hinge_point);
        placements.push(TagPlacement {
            tag_id: k as u32,
            side_length: l,
            tag_to_bundle: Pose6D::new(center, rot),
            role: TagRole::Follower,
        });
    }
    Ok(BundleGeometry {
        placements,
        rotation_step_deg: g_deg,
        hinge_axis,
    })
}

/// The tag's 4 corners in the bundle frame, CCW from bottom-left as seen
/// from the tag's front.
pub fn tag_corners_bundle_frame(placement: &TagPlacement) -> [Point3<f64>; 4] {
    let h = placement.side_length / 2.0;
    let local = [
        Point3::new(-h, -h, 0.0),
        Point3::new(h, -h, 0.0),
        Point3::new(h, h, 0.0),
        Point3::new(-h, h, 0.0),
    ];
    local.map(|p| placement.tag_to_bundle.transform_point(&p))
}

/// Corner positions in the tag's own frame, CCW from bottom-left.
pub fn tag_corners_local(side_length: f64) -> [Point3<f64>; 4] {
    let h = side_length / 2.0;
    [
        Point3::new(-h, -h, 0.0),
        Point3::new(h, -h, 0.0),
        Point3::new(h, h, 0.0),
        Point3::new(-h, h, 0.0),
    ]
}

/// Pinhole projection. Returns `None` for points at or behind the camera
/// plane; the simulator uses that to drop tags.
pub fn project(k: &CameraIntrinsics, camera_point: &Point3<f64>) -> Option<Point2<f64>> {
    if camera_point.z <= 0.0 {
        return None;
    }
    Some(Point2::new(
        k.fx * camera_point.x / camera_point.z + k.cx,
        k.fy * camera_point.y / camera_point.z + k.cy,
    ))
}

/// Angle between the tag's outward normal and the reversed camera→tag-center
/// direction, degrees. 0° means the camera faces the tag frontally.
pub fn view_angle(camera_from_tag: &Pose6D) -> Result<f64, GeometryError> {
    let t = camera_from_tag.translation;
    if t.z <= 0.0 {
        return Err(GeometryError::BehindCamera(t.z));
    }
    let normal = camera_from_tag.rotation * Vector3::z();
    let toward_tag = t.normalize();
    let c = normal.dot(&-toward_tag).clamp(-1.0, 1.0);
    Ok(c.acos().to_degrees())
}

/// Reduce a camera_from_tag pose to the water-plane quantities (d_x, d_y, psi).
pub fn to_planar(camera_from_tag: &Pose6D) -> PlanarPose {
    let t = camera_from_tag.translation;
    let normal = camera_from_tag.rotation * Vector3::z();
    // psi: yaw of the tag plane about the camera's vertical, measured from
    // the frontal configuration (normal = -Z in camera frame)
    let psi = normal.x.atan2(-normal.z).to_degrees();
    PlanarPose {
        d_x: t.z,
        d_y: t.x,
        psi: wrap_deg(psi),
    }
}

/// Normalize an angle in degrees to (-180, 180].
pub fn wrap_deg(deg: f64) -> f64 {
    let mut a = deg % 360.0;
    if a <= -180.0 {
        a += 360.0;
    } else if a > 180.0 {
        a -= 360.0;
    }
    a
}

/// Rotation that views a tag frontally at depth `d_mm` on the boresight:
/// tag +X stays +X, +Y flips to camera -Y, normal points back at the camera.
pub fn frontal_pose(d_mm: f64) -> Pose6D {
    Pose6D::new(
        Vector3::new(0.0, 0.0, d_mm),
        UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI),
    )
}
