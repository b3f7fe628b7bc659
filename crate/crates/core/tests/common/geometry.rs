use rand::Rng;
use worldforge::geometry::{
    double_reproject, transfer_actions, warp_frame, ActionSequence, CameraIntrinsics, DepthMap, Image, Pose,
};
use worldforge::rng::substream;

fn single(p: Pose) -> ActionSequence {
    ActionSequence::new(vec![p], vec![0.0]).unwrap()
}

/// Over random `(base_a, base_b, action)` triples: largest deviation of
/// `base_b ∘ K` from `base_a ∘ a` (world pose preservation).
pub fn world_pose_error(cases: usize, seed: u64) -> f64 {
    let mut rng = substream(seed, "world-pose");
    (0..cases)
        .map(|_| {
            let (a, b, act) = (Pose::random(&mut rng, 2.0), Pose::random(&mut rng, 2.0), Pose::random(&mut rng, 1.0));
            let k = transfer_actions(&a, &b, &single(act)).poses()[0];
            b.compose(&k).max_abs_diff(&a.compose(&act))
        })
        .fold(0.0, f64::max)
}

/// Largest deviation between transferring A→B→C and A→C directly.
pub fn composition_error(cases: usize, seed: u64) -> f64 {
    let mut rng = substream(seed, "compose");
    (0..cases)
        .map(|_| {
            let (a, b, c) = (Pose::random(&mut rng, 2.0), Pose::random(&mut rng, 2.0), Pose::random(&mut rng, 2.0));
            let acts = ActionSequence::new(
                (0..3).map(|_| Pose::random(&mut rng, 1.0)).collect(),
                vec![0.0, 0.1, 0.2],
            )
            .unwrap();
            let two = transfer_actions(&b, &c, &transfer_actions(&a, &b, &acts));
            let one = transfer_actions(&a, &c, &acts);
            two.poses().iter().zip(one.poses()).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

pub fn desk_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(50.0, 50.0, 19.5, 15.5, 40, 32).unwrap()
}

/// Identity double reprojection over random depth with holes and a random
/// arm mask: number of valid pixels that differ from the input, and whether
/// the validity mask is exactly `depth valid && !arm`.
pub fn identity_reprojection(seed: u64) -> (usize, bool) {
    let k = desk_camera();
    let mut rng = substream(seed, "identity-reproj");
    let n = k.width * k.height;
    let frame = Image::from_fn(k.width, k.height, 3, |_, _, _| rng.random_range(0.0..1.0));
    let depth: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.5..6.0) }).collect();
    let depth = DepthMap::new(k.width, k.height, depth).unwrap();
    let arm: Vec<bool> = (0..n).map(|_| rng.random_bool(0.15)).collect();
    let r = double_reproject(&frame, &depth, &Pose::identity(), &k, &arm).unwrap();
    let expected: Vec<bool> = depth.valid().iter().zip(&arm).map(|(&v, &a)| v && !a).collect();
    let diffs = (0..n).filter(|&i| r.mask[i] && r.frame.data[3 * i..3 * i + 3] != frame.data[3 * i..3 * i + 3]).count();
    (diffs, r.mask == expected)
}

/// Fronto-parallel plane at random depth, camera translated along x: the
/// largest distance between each covered target pixel and the source
/// column shifted by `fx * tx / Z`, over `cases` random setups.
pub fn plane_shift_error(cases: usize, seed: u64) -> f64 {
    let k = desk_camera();
    let mut rng = substream(seed, "plane-shift");
    let frame = Image::from_fn(k.width, k.height, 1, |x, _, _| x as f64);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let z = rng.random_range(1.0..8.0);
        let tx = rng.random_range(-0.5..0.5);
        let shift = -k.fx * tx / z;
        let w = warp_frame(&frame, &DepthMap::constant(k.width, k.height, z).unwrap(), &Pose::from_translation(-tx, 0.0, 0.0), &k)
            .unwrap();
        for y in 0..k.height {
            for x in 0..k.width {
                if w.mask[y * k.width + x] {
                    let src = w.frame.pixel(x, y)[0];
                    worst = worst.max((x as f64 - (src + shift)).abs());
                }
            }
        }
    }
    worst
}
