//! Property tests for the invariants the pipeline leans on.

use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;

use tagbundle::estimator::{fuse, FilterWindow, FusionMode, WeightedPose};
use tagbundle::geometry::{build_bundle, frontal_pose, wrap_deg, Pose6D};
use tagbundle::latch::{check_latch, LatchThresholds};

fn arb_rotation() -> impl Strategy<Value = UnitQuaternion<f64>> {
    (-3.0f64..3.0, -1.5f64..1.5, -3.0f64..3.0)
        .prop_map(|(r, p, y)| UnitQuaternion::from_euler_angles(r, p, y))
}

fn arb_pose() -> impl Strategy<Value = Pose6D> {
    (
        -2000.0f64..2000.0,
        -2000.0f64..2000.0,
        100.0f64..5000.0,
        arb_rotation(),
    )
        .prop_map(|(x, y, z, q)| Pose6D::new(Vector3::new(x, y, z), q))
}

proptest! {
    /// wrap_deg always lands in (-180, 180] and preserves the angle mod 360.
    #[test]
    fn wrap_deg_range_and_congruence(a in -100_000.0f64..100_000.0) {
        let w = wrap_deg(a);
        prop_assert!(w > -180.0 && w <= 180.0);
        let diff = (a - w) / 360.0;
        prop_assert!((diff - diff.round()).abs() < 1e-9);
    }

    /// compose ∘ invert is the identity.
    #[test]
    fn pose_invert_is_inverse(p in arb_pose()) {
        let id = p.compose(&p.invert());
        prop_assert!(id.translation.norm() < 1e-9);
        prop_assert!(id.rotation.angle() < 1e-9);
    }

    /// Pose JSON round-trips.
    #[test]
    fn pose_json_round_trip(p in arb_pose()) {
        let s = serde_json::to_string(&p).unwrap();
        let back: Pose6D = serde_json::from_str(&s).unwrap();
        prop_assert!((back.translation - p.translation).norm() < 1e-9);
        prop_assert!(back.rotation_angle_to(&Pose6D::new(Vector3::zeros(), p.rotation)) < 1e-9);
    }

    /// Fused translation stays inside the bounding box of the re-expressed
    /// inputs (convex combination).
    #[test]
    fn fusion_translation_is_convex(
        poses in prop::collection::vec((arb_pose(), 0.01f64..1.0), 1..6)
    ) {
        let bundle = build_bundle(130.0, 0, 0.0, 0.0).unwrap();
        let inputs: Vec<WeightedPose> = poses
            .iter()
            .map(|(p, w)| WeightedPose::new(*p, *w, 1.0, 0))
            .collect();
        let (fused, confidence) = fuse(&inputs, &bundle, FusionMode::Weighted).unwrap();
        prop_assert!((0.0..=1.0).contains(&confidence));
        for axis in 0..3 {
            let lo = poses.iter().map(|(p, _)| p.translation[axis]).fold(f64::INFINITY, f64::min);
            let hi = poses.iter().map(|(p, _)| p.translation[axis]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(fused.translation[axis] >= lo - 1e-9);
            prop_assert!(fused.translation[axis] <= hi + 1e-9);
        }
    }

    /// A single outlier never leaks through a window of >= 3 agreeing poses:
    /// the median stays near the consensus.
    #[test]
    fn median_window_rejects_single_outlier(
        outlier_mm in 100.0f64..10_000.0,
        outlier_deg in 20.0f64..170.0,
        slot in 0usize..5,
    ) {
        let mut win = FilterWindow::new(5).unwrap();
        let consensus = frontal_pose(1500.0);
        let outlier = Pose6D::new(
            consensus.translation + Vector3::new(outlier_mm, 0.0, 0.0),
            consensus.rotation
                * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), outlier_deg.to_radians()),
        );
        let mut last = consensus;
        for i in 0..5 {
            let p = if i == slot { outlier } else { consensus };
            last = win.push(0, p);
        }
        prop_assert!((last.translation - consensus.translation).norm() < 1e-9);
        prop_assert!(last.rotation_angle_to(&consensus) < 1e-9);
    }

    /// check_latch is monotone under componentwise shrinking.
    #[test]
    fn latch_monotone_under_shrink(
        d_x in 0.0f64..20.0,
        d_y in -80.0f64..80.0,
        psi in -55.0f64..55.0,
        s in 0.0f64..1.0,
    ) {
        let th = LatchThresholds::indoor();
        let p = tagbundle::geometry::PlanarPose { d_x, d_y, psi };
        if check_latch(&p, &th) {
            let q = tagbundle::geometry::PlanarPose {
                d_x: d_x * s,
                d_y: d_y * s,
                psi: psi * s,
            };
            prop_assert!(check_latch(&q, &th));
        }
    }
}
