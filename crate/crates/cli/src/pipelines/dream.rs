//! Train the dreamer on rendered arm clips, sample new clips, label them
//! with an inverse dynamics model and route them through the quality gate.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde_json::json;
use worldforge::dreamer::{euler_sample, toy_bundle, train_step, write_metrics_csv, ConditioningBundle, DiT, DiTConfig};
use worldforge::gate::{score_sequence, summary_csv, QualityReport, Routing, SequenceInput, TokenOverlap};
use worldforge::geometry::{ActionSequence, CameraIntrinsics, Pose};
use worldforge::idm::{
    forward_kinematics, idm_infer, idm_train, synthetic_dataset, write_joint_trajectory, ArmModel, IdmConfig,
    JointTrajectory,
};
use worldforge::latent::{codec_decode, codec_encode, LatentTensor, VideoTensor};
use worldforge::nn::{Adam, AdamConfig};
use worldforge::rng::substream;

use super::write_video;
use crate::manifest::PipelineManifest;
use crate::{Result, Staging, StageExt};

fn dream_arm() -> ArmModel {
    ArmModel { link_half_width: 0.25, finger_length: 0.5, ..ArmModel::desk() }
}

fn dream_camera(size: usize) -> CameraIntrinsics {
    let f = 35.0 * size as f64 / 32.0;
    let c = (size as f64 - 1.0) / 2.0;
    CameraIntrinsics::new(f, f, c, c, size, size).expect("positive focal length")
}

fn ee_actions(arm: &ArmModel, traj: &JointTrajectory, dt: f64) -> Result<ActionSequence> {
    let poses = (0..traj.steps)
        .map(|t| {
            let ee = *forward_kinematics(arm, &traj.at(t)[..arm.arm_dofs()]).last().expect("base point");
            Pose::from_translation(ee[0], ee[1], 0.0)
        })
        .collect();
    ActionSequence::new(poses, (0..traj.steps).map(|t| t as f64 * dt).collect()).stage("label")
}

pub fn run(m: &PipelineManifest, out: &mut Staging) -> Result<serde_json::Value> {
    let cfg = &m.config.dreamer;
    let dit_cfg = DiTConfig::desk();
    let size = 8;
    let arm = dream_arm();
    let k = dream_camera(size);

    let clips = synthetic_dataset(&mut substream(m.seed, "dream.clips"), &arm, &k, cfg.clips, cfg.frames, false)
        .stage("render")?;
    let data: Vec<(VideoTensor, ConditioningBundle)> = clips
        .iter()
        .map(|c| Ok((c.frames.clone(), toy_bundle(&c.frames, &cfg.prompt, &dit_cfg).stage("render")?)))
        .collect::<Result<_>>()?;

    let mut model = DiT::new(dit_cfg.clone(), &mut substream(m.seed, "dream.init")).stage("dreamer")?;
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &model.store);
    let mut rng = substream(m.seed, "dream.train");
    let mut metrics = Vec::with_capacity(cfg.train_steps);
    for _ in 0..cfg.train_steps {
        let batch: Vec<_> = (0..cfg.batch).map(|_| data[rng.random_range(0..data.len())].clone()).collect();
        metrics.push(train_step(&mut model, &batch, &mut opt, &mut rng).stage("dreamer")?);
    }
    out.with_writer("dreamer/metrics.csv", |w| write_metrics_csv(w, &metrics).stage("dreamer"))?;
    out.with_writer("dreamer/model.ckpt", |w| model.save(w).stage("dreamer"))?;

    let mut rng = substream(m.seed, "dream.sample");
    let noises: Vec<(LatentTensor, usize)> = (0..cfg.samples)
        .map(|i| {
            let src = i % data.len();
            let z = codec_encode(&data[src].0, dit_cfg.ratios).expect("clip shape matches the codec");
            let noise = LatentTensor::from_fn(z.frames, z.height, z.width, z.channels, |_, _, _, _| {
                rng.sample(StandardNormal)
            });
            (noise, src)
        })
        .collect();
    let samples: Vec<VideoTensor> = noises
        .par_iter()
        .map(|(z0, src)| {
            let z1 = euler_sample(&model, z0, &data[*src].1, cfg.sample_steps).stage("sample")?;
            let mut v = codec_decode(&z1, dit_cfg.ratios).stage("sample")?;
            v.clamp_unit();
            Ok(v)
        })
        .collect::<Result<_>>()?;

    let idm_cfg = IdmConfig {
        batch: m.config.idm.batch,
        lr: m.config.idm.lr,
        use_mask: false,
        seed: m.seed,
        ..IdmConfig::default()
    };
    let (idm, idm_metrics) = idm_train(&clips, &[], arm.grip_dofs, idm_cfg, m.config.idm.epochs).stage("idm")?;
    out.with_writer("idm/model.ckpt", |w| idm.save(w).stage("idm"))?;
    out.write_json("idm/metrics.json", &idm_metrics)?;

    let labelled: Vec<(JointTrajectory, QualityReport)> = samples
        .par_iter()
        .map(|v| {
            let traj = idm_infer(&idm, v, &vec![true; v.frames * v.height * v.width]).stage("label")?;
            let input = SequenceInput {
                frames: Some(v.clone()),
                text: Some(cfg.prompt.clone()),
                task_metadata: Some(cfg.task.clone()),
                trajectory: Some(ee_actions(&arm, &traj, m.config.geometry.frame_dt)?),
                ..SequenceInput::default()
            };
            let report = score_sequence(&input, &m.config.gate, &TokenOverlap).stage("gate")?;
            Ok((traj, report))
        })
        .collect::<Result<_>>()?;

    let mut pools: [Vec<String>; 3] = Default::default();
    let mut rows = Vec::new();
    for (i, (v, (traj, report))) in samples.iter().zip(&labelled).enumerate() {
        let id = format!("sample_{i:03}");
        write_video(out, &format!("samples/{id}"), v)?;
        out.with_writer(&format!("samples/{id}/actions.txt"), |w| write_joint_trajectory(w, traj).stage("label"))?;
        out.write_json(&format!("samples/{id}/quality.json"), report)?;
        pools[report.routing as usize].push(id.clone());
        rows.push((id, report.clone()));
    }
    for (r, ids) in [Routing::Reject, Routing::Pretrain, Routing::Finetune].iter().zip(&pools) {
        let body: String = ids.iter().map(|id| format!("{id}\n")).collect();
        out.write(&format!("pools/{r}.txt"), body.as_bytes())?;
    }
    out.write("quality_summary.csv", summary_csv(&rows).as_bytes())?;

    Ok(json!({
        "samples": samples.len(),
        "reject": pools[0].len(),
        "pretrain": pools[1].len(),
        "finetune": pools[2].len(),
        "flow_loss_first": metrics.first().map(|s| s.flow_loss),
        "flow_loss_last": metrics.last().map(|s| s.flow_loss),
    }))
}
