//! Multi-plane fiducial tag bundles for robust RGB-only pose estimation.
//!
//! A bundle is a leader tag plus one or more follower tags hinged off the
//! leader's edge and rotated out of its plane, so that a specular highlight
//! that blinds one tag usually leaves another detectable. This crate provides:
//!
//! - bundle geometry construction and pinhole projection ([`geometry`]),
//! - single-tag planar pose recovery and confidence-weighted fusion of
//!   several non-coplanar observations into one bundle pose ([`estimator`]),
//! - a seeded, deterministic detection simulator with pixel jitter, wave
//!   oscillation, and reflection occlusion ([`sim`]),
//! - a 2D water-plane docking/latching controller with auto-recovery
//!   ([`latch`]),
//! - a tag-ID indirect-communication layer for train-link robot formations
//!   ([`swarm`]),
//! - an experiment harness that runs the indoor/outdoor/swarm scenarios and
//!   emits comparison reports ([`experiment`]).

pub mod estimator;
pub mod experiment;
pub mod geometry;
pub mod latch;
pub mod par;
pub mod sim;
pub mod swarm;

pub use estimator::{Detection, EstimatorConfig, FilterWindow, FusionMode, WeightedPose};
pub use geometry::{
    BundleGeometry, CameraIntrinsics, PlanarPose, Pose6D, TagPlacement, TagRole,
};
pub use sim::{NoiseProfile, ReflectionEvent};
