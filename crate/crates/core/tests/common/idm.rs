use worldforge::autodiff::Tensor;
use worldforge::idm::{
    desk_camera, idm_infer, idm_train, render_arm, synthetic_dataset, ArmModel, IdmConfig, IdmMetrics, IdmModel,
    JointTrajectory, RenderedSample,
};
use worldforge::latent::VideoTensor;
use worldforge::rng::substream;

pub const STEPS: usize = 8;

pub fn dataset(seed: u64, n: usize, clutter: bool) -> Vec<RenderedSample> {
    synthetic_dataset(&mut substream(seed, "idm.data"), &ArmModel::desk(), &desk_camera(), n, STEPS, clutter).unwrap()
}

/// Final per-joint validation MAE of a masked model trained on 1000 clean
/// clips (16 epochs, about 2000 Adam steps) and checked on 60 held-out clips.
pub fn desk_idm_mae(seed: u64) -> Vec<f64> {
    let train = dataset(seed, 1000, false);
    let val = dataset(seed + 1000, 60, false);
    let (_, m) = idm_train(&train, &val, 1, IdmConfig { seed, ..IdmConfig::default() }, 16).unwrap();
    m.val_mae.last().unwrap().clone()
}

/// Masked and unmasked models trained on identical cluttered clips.
pub fn clutter_pair(seed: u64) -> (IdmMetrics, IdmMetrics) {
    let train = dataset(seed, 300, true);
    let val = dataset(seed + 1000, 60, true);
    let run = |use_mask| idm_train(&train, &val, 1, IdmConfig { seed, use_mask, ..IdmConfig::default() }, 20).unwrap().1;
    (run(true), run(false))
}

pub fn constant_pose_dataset(pose: &[f64], n: usize) -> Vec<RenderedSample> {
    let arm = ArmModel::desk();
    let k = desk_camera();
    let traj = JointTrajectory::new(STEPS, pose.len(), pose.repeat(STEPS)).unwrap();
    let bg = VideoTensor::zeros(STEPS, k.height, k.width, 1);
    (0..n).map(|_| render_arm(&arm, &traj, &k, &bg).unwrap()).collect()
}

/// Masked model with every weight drawn uniformly from `[-0.4, 0.4]`.
pub fn random_model(seed: u64) -> IdmModel {
    let mut m = IdmModel::new(IdmConfig::default(), 32, 32, 1, 3, 1).unwrap();
    let rng = &mut substream(seed, "idm.weights");
    for t in m.store.tensors_mut() {
        *t = Tensor::uniform(rng, t.shape(), -0.4, 0.4);
    }
    m
}

/// Repaints everything outside the arm mask of `n` cluttered clips and
/// counts clips whose prediction changed in any bit.
pub fn mask_invariance_violations(n: usize, seed: u64) -> usize {
    let model = random_model(seed);
    dataset(seed, n, true)
        .iter()
        .enumerate()
        .filter(|(i, s)| {
            let mut other = s.frames.clone();
            for (j, (v, &m)) in other.data_mut().iter_mut().zip(&s.masks).enumerate() {
                if !m {
                    *v = ((i * 31 + j * 7) % 11) as f64 / 10.0;
                }
            }
            idm_infer(&model, &s.frames, &s.masks).unwrap() != idm_infer(&model, &other, &s.masks).unwrap()
        })
        .count()
}
