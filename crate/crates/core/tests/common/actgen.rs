use std::collections::BTreeMap;

use rand::Rng;
use worldforge::actgen::{
    corrections, interpolate_pose, retarget_demo, segment_demo, Demo, DemoPolicy, ObjectMove, RetargetSpec,
    ScriptedPickPlace, SegmentKind,
};
use worldforge::geometry::Pose;
use worldforge::rng::substream;

pub fn seed_demo() -> Demo {
    let objects = BTreeMap::from([("cube".to_string(), Pose::from_translation(0.4, 0.1, 0.0))]);
    ScriptedPickPlace::desk("cube").demonstrate(&objects).unwrap()
}

pub fn random_move(demo: &Demo, rng: &mut impl Rng) -> RetargetSpec {
    let old = demo.objects["cube"];
    let new = Pose::random(rng, 0.3);
    let mut spec = RetargetSpec::identity(demo);
    spec.objects.insert("cube".into(), ObjectMove { old, new });
    spec
}

/// Worst `|new⁻¹ ∘ T'_t - old⁻¹ ∘ T_t|` over anchored steps of `n` random
/// object moves.
pub fn relative_pose_error(n: usize, seed: u64) -> f64 {
    let demo = seed_demo();
    let rng = &mut substream(seed, "actgen.rel");
    let mut worst = 0.0f64;
    for _ in 0..n {
        let spec = random_move(&demo, rng);
        let out = retarget_demo(&demo, &spec).unwrap();
        let m = spec.objects["cube"];
        for s in segment_demo(&demo).iter().filter(|s| s.kind != SegmentKind::Free) {
            for t in s.start - 1..s.end {
                let before = m.old.inverse().compose(&demo.ee.poses()[t]);
                let after = m.new.inverse().compose(&out.ee.poses()[t]);
                worst = worst.max(before.max_abs_diff(&after));
            }
        }
    }
    worst
}

/// Checks that every free segment's correction starts and ends bitwise on
/// its neighbours' anchored corrections and changes by at most one
/// interpolation increment per step. Returns the number of boundaries
/// checked and whether all passed.
pub fn boundary_continuity(n: usize, seed: u64) -> (usize, bool) {
    let demo = seed_demo();
    let rng = &mut substream(seed, "actgen.c0");
    let segs = segment_demo(&demo);
    let mut checked = 0;
    let mut ok = true;
    for _ in 0..n {
        let spec = random_move(&demo, rng);
        let c = corrections(&demo, &spec).unwrap();
        for (i, s) in segs.iter().enumerate() {
            if s.kind != SegmentKind::Free {
                continue;
            }
            let left = if i > 0 { c[segs[i - 1].end - 1] } else { Pose::identity() };
            let right = segs.get(i + 1).map_or(Pose::identity(), |n| c[n.start - 1]);
            let span = (s.end - s.start + 1) as f64;
            ok &= interpolate_pose(&left, &right, 0.0) == left && interpolate_pose(&left, &right, 1.0) == right;
            let mut prev = left;
            let bound = left.max_abs_diff(&right) * 2.0 / span + 1e-12;
            for t in s.start..=s.end {
                ok &= prev.max_abs_diff(&c[t - 1]) <= bound;
                prev = c[t - 1];
            }
            ok &= prev.max_abs_diff(&right) <= bound;
            checked += (i > 0) as usize + (i + 1 < segs.len()) as usize;
        }
    }
    (checked, ok)
}
