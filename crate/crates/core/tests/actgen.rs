mod common;

use std::collections::BTreeMap;

use common::actgen::{boundary_continuity, relative_pose_error, seed_demo};
use nalgebra::Vector3;
use proptest::prelude::*;
use worldforge::actgen::{
    augment_sweep, read_demo, retarget_demo, segment_demo, stitch_validate, write_demo, Demo, DemoPolicy, ObjectMove,
    RetargetSpec, ScriptedPickPlace, SegmentKind, StitchLimits, Workspace,
};
use worldforge::geometry::Pose;
use worldforge::rng::substream;

fn desk_limits() -> StitchLimits {
    StitchLimits { max_step: 0.1, max_rot_step: 0.5, workspace: Workspace { min: [-1.0, -1.0, -0.1], max: [1.0, 1.0, 1.0] } }
}

fn moved(demo: &Demo, new: Pose) -> RetargetSpec {
    let mut spec = RetargetSpec::identity(demo);
    spec.objects.insert("cube".into(), ObjectMove { old: demo.objects["cube"], new });
    spec
}

fn anchored_steps(demo: &Demo) -> Vec<usize> {
    segment_demo(demo).iter().filter(|s| s.kind != SegmentKind::Free).flat_map(|s| s.start - 1..s.end).collect()
}

#[test]
fn scripted_demo_has_one_grasp() {
    let demo = seed_demo();
    let segs = segment_demo(&demo);
    assert_eq!(segs.iter().filter(|s| s.kind == SegmentKind::Anchored(Some("cube".into()))).count(), 1);
    assert!(stitch_validate(&demo, &desk_limits()).pass);
}

#[test]
fn identity_spec_is_identity() {
    let demo = seed_demo();
    assert_eq!(retarget_demo(&demo, &RetargetSpec::identity(&demo)).unwrap(), demo);
}

#[test]
fn translated_object_shifts_anchored_poses() {
    let demo = seed_demo();
    let old = demo.objects["cube"];
    let new = Pose::from_translation(1.0, 0.0, 0.0).compose(&old);
    let out = retarget_demo(&demo, &moved(&demo, new)).unwrap();
    for t in anchored_steps(&demo) {
        let (a, b) = (demo.ee.poses()[t], out.ee.poses()[t]);
        assert_eq!(a.rotation(), b.rotation());
        assert!((b.translation() - a.translation() - Vector3::x()).amax() < 1e-12);
        assert!(old.inverse().compose(&a).max_abs_diff(&new.inverse().compose(&b)) < 1e-9);
    }
}

#[test]
fn rotated_object_keeps_grasp() {
    let demo = seed_demo();
    let old = demo.objects["cube"];
    let new = Pose::new(Pose::rot_z(std::f64::consts::FRAC_PI_2).rotation() * old.rotation(), *old.translation()).unwrap();
    let out = retarget_demo(&demo, &moved(&demo, new)).unwrap();
    for t in anchored_steps(&demo) {
        let before = old.inverse().compose(&demo.ee.poses()[t]);
        let after = new.inverse().compose(&out.ee.poses()[t]);
        assert!(before.max_abs_diff(&after) < 1e-9);
    }
    assert_eq!(out.gripper, demo.gripper);
    assert_eq!(out.ee.timestamps(), demo.ee.timestamps());
}

#[test]
fn relative_pose_invariance_over_random_moves() {
    assert!(relative_pose_error(200, 1) < 1e-9);
}

#[test]
fn free_segments_stitch_continuously() {
    let (checked, ok) = boundary_continuity(100, 2);
    assert!(checked >= 200 && ok);
}

#[test]
fn object_outside_workspace_flagged() {
    let demo = seed_demo();
    let out = retarget_demo(&demo, &moved(&demo, Pose::from_translation(3.0, 0.0, 0.0))).unwrap();
    let r = stitch_validate(&out, &desk_limits());
    assert_eq!(r.objects_outside, vec!["cube".to_string()]);
    assert!(r.ee_outside > 0 && !r.pass);
}

#[test]
fn demo_file_roundtrip() {
    let demo = seed_demo();
    let mut buf = Vec::new();
    write_demo(&mut buf, &demo).unwrap();
    assert_eq!(read_demo(buf.as_slice()).unwrap(), demo);
}

#[test]
fn sweep_is_reproducible() {
    let demo = seed_demo();
    let a = augment_sweep(&demo, "cube", 5, 0.1, 0.5, &mut substream(3, "sweep")).unwrap();
    let b = augment_sweep(&demo, "cube", 5, 0.1, 0.5, &mut substream(3, "sweep")).unwrap();
    assert_eq!(a.iter().map(|x| &x.1).collect::<Vec<_>>(), b.iter().map(|x| &x.1).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn retarget_preserves_grasp_frame(seed in any::<u64>(), phase in 2usize..12, x in 0.2f64..0.6, y in -0.3f64..0.3) {
        let objects = BTreeMap::from([("cube".to_string(), Pose::from_translation(x, y, 0.0))]);
        let demo = ScriptedPickPlace { phase, ..ScriptedPickPlace::desk("cube") }.demonstrate(&objects).unwrap();
        prop_assert_eq!(retarget_demo(&demo, &RetargetSpec::identity(&demo)).unwrap(), demo.clone());
        let new = Pose::random(&mut substream(seed, "prop"), 0.5);
        let out = retarget_demo(&demo, &moved(&demo, new)).unwrap();
        let old = demo.objects["cube"];
        for t in anchored_steps(&demo) {
            let d = old.inverse().compose(&demo.ee.poses()[t]).max_abs_diff(&new.inverse().compose(&out.ee.poses()[t]));
            prop_assert!(d < 1e-9);
        }
        let (first, last) = (0, demo.len() - 1);
        prop_assert_eq!(out.ee.poses()[first], demo.ee.poses()[first]);
        prop_assert_eq!(out.ee.poses()[last], demo.ee.poses()[last]);
    }
}
