mod common;

use common::gate::{boundary_failures, dominance_trials, report};
use proptest::prelude::*;
use worldforge::gate::{
    composite, geometric_score, multiview_score, physical_score, route, score_sequence, summary_csv, DepthTrack,
    Direction, GateConfig, GateError, Routing, SequenceInput, TokenOverlap, NEUTRAL,
};
use worldforge::geometry::{ActionSequence, CameraIntrinsics, DepthMap, Pose};
use worldforge::latent::{view_concat, VideoTensor};

fn camera() -> CameraIntrinsics {
    CameraIntrinsics::new(20.0, 20.0, 7.5, 5.5, 16, 12).unwrap()
}

fn textured(frames: usize, w: usize) -> VideoTensor {
    VideoTensor::from_fn(frames, 12, w, 3, |_, y, x, c| ((x * 7 + y * 13 + c * 5) % 17) as f64 / 16.0)
}

fn static_track(frames: usize) -> DepthTrack {
    DepthTrack {
        depth: vec![DepthMap::constant(16, 12, 2.0).unwrap(); frames],
        motion: vec![Pose::identity(); frames - 1],
        camera: camera(),
    }
}

fn line(speeds: &[f64], dt: f64) -> ActionSequence {
    let mut x = 0.0;
    let mut poses = vec![Pose::identity()];
    for s in speeds {
        x += s * dt;
        poses.push(Pose::from_translation(x, 0.0, 0.0));
    }
    let ts = (0..poses.len()).map(|i| i as f64 * dt).collect();
    ActionSequence::new(poses, ts).unwrap()
}

#[test]
fn static_scene_is_geometrically_perfect() {
    let s = geometric_score(&textured(4, 16), &static_track(4)).unwrap();
    assert!(s.assessed);
    assert_eq!(s.value, 1.0);
}

#[test]
fn moving_content_under_static_camera_is_penalized() {
    let v = VideoTensor::from_fn(3, 12, 16, 1, |t, _, x, _| ((x + 3 * t) % 4) as f64 / 3.0);
    let s = geometric_score(&v, &static_track(3)).unwrap();
    assert!(s.value < 0.9, "{}", s.value);
}

#[test]
fn depth_resolution_mismatch_is_inconsistent() {
    let mut track = static_track(3);
    track.camera = CameraIntrinsics::new(20.0, 20.0, 7.5, 5.5, 16, 10).unwrap();
    assert!(matches!(geometric_score(&textured(3, 16), &track), Err(GateError::InconsistentModalities(_))));
    let short = static_track(2);
    assert!(matches!(geometric_score(&textured(3, 16), &short), Err(GateError::InconsistentModalities(_))));
}

#[test]
fn identical_views_are_coherent() {
    let v = textured(2, 16);
    let cat = view_concat(&[v.clone(), v.clone(), v]).unwrap();
    assert_eq!(multiview_score(&cat, &[16, 16, 16]).unwrap().value, 1.0);
    assert!(matches!(multiview_score(&cat, &[16, 16]), Err(GateError::InconsistentModalities(_))));
}

#[test]
fn one_velocity_violation_in_hundred_steps() {
    let mut speeds = vec![0.5; 99];
    speeds[40] = 1.5;
    let s = physical_score(&line(&speeds, 0.1), 1.0, f64::INFINITY);
    assert_eq!(s.value, 1.0 - 1.0 / 99.0);
    let smooth = physical_score(&line(&[0.5; 99], 0.1), 1.0, 10.0);
    assert_eq!(smooth.value, 1.0);
}

#[test]
fn acceleration_fraction_dominates_when_larger() {
    let mut speeds = vec![0.5; 99];
    speeds[40] = 0.9;
    // Two acceleration spikes of 4 m/s^2 over 98 intervals, no speed violation.
    let s = physical_score(&line(&speeds, 0.1), 1.0, 3.0);
    assert!((s.value - (1.0 - 2.0 / 98.0)).abs() < 1e-15);
}

#[test]
fn absent_modalities_are_neutral() {
    let input = SequenceInput { frames: Some(textured(2, 16)), ..Default::default() };
    let r = score_sequence(&input, &GateConfig::default(), &TokenOverlap).unwrap();
    for s in [r.scores.geometric, r.scores.multiview, r.scores.alignment, r.scores.physical] {
        assert_eq!(s.value, NEUTRAL);
        assert!(!s.assessed);
    }
    assert_eq!(r.composite, 0.5);
    assert_eq!(r.routing, Routing::Pretrain);
    let none = SequenceInput::default();
    assert!(matches!(score_sequence(&none, &GateConfig::default(), &TokenOverlap), Err(GateError::InconsistentModalities(_))));
}

#[test]
fn full_sequence_report_is_deterministic() {
    let input = SequenceInput {
        frames: Some(textured(3, 16)),
        depth: Some(static_track(3)),
        views: Some(vec![8, 8]),
        text: Some("pick the red cube".into()),
        task_metadata: Some("pick red cube".into()),
        trajectory: Some(line(&[0.5; 9], 0.1)),
    };
    let cfg = GateConfig::default();
    let a = score_sequence(&input, &cfg, &TokenOverlap).unwrap();
    let b = score_sequence(&input, &cfg, &TokenOverlap).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.scores.alignment.value, 0.75);
    assert_eq!(a.composite, composite(&a.scores.values(), &cfg.weights));
    assert_eq!(route(&a, (cfg.tau_lo, cfg.tau_hi), &cfg.weights, cfg.direction).unwrap(), a.routing);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let csv = summary_csv(&[("s0".into(), a)]);
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("s0,1,"));
}

#[test]
fn routing_is_monotone_under_dominance() {
    let (n, bad) = dominance_trials(10_000, 0);
    assert_eq!(n, 10_000);
    assert_eq!(bad, 0);
}

#[test]
fn boundary_rules_hold() {
    assert!(boundary_failures().is_empty(), "{:?}", boundary_failures());
}

proptest! {
    #[test]
    fn composite_is_permutation_invariant(
        s in prop::array::uniform4(0.0..=1.0f64),
        w in prop::array::uniform4(0.0..=1.0f64),
        perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let total: f64 = w.iter().sum();
        prop_assume!(total > 0.0);
        let w = w.map(|x| x / total);
        let ps: [f64; 4] = std::array::from_fn(|i| s[perm[i]]);
        let pw: [f64; 4] = std::array::from_fn(|i| w[perm[i]]);
        prop_assert_eq!(composite(&s, &w), composite(&ps, &pw));
    }

    #[test]
    fn raising_one_score_never_downgrades(
        s in prop::array::uniform4(0.0..=1.0f64),
        i in 0usize..4,
        bump in 0.0..=1.0f64,
        lo in 0.0..=1.0f64,
        gap in 0.0..=1.0f64,
    ) {
        let hi = (lo + gap).min(1.0);
        let mut up = s;
        up[i] = (s[i] + bump).min(1.0);
        let a = route(&report(s), (lo, hi), &[0.25; 4], Direction::HighToFinetune).unwrap();
        let b = route(&report(up), (lo, hi), &[0.25; 4], Direction::HighToFinetune).unwrap();
        prop_assert!(b >= a);
    }
}
