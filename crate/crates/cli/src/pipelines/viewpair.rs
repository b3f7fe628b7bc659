//! View-transfer training pairs: condition 1 is the scene warped to the
//! relocated viewpoint and back with the arm removed; condition 2 is the
//! arm rendered from actions re-expressed for the relocated base.

use serde_json::json;
use worldforge::geometry::{
    double_reproject, transfer_actions, write_trajectory, ActionSequence, DepthMap, Image, Pose, Reprojection,
};
use worldforge::idm::{
    clutter_background, desk_camera, forward_kinematics, planar_ik, random_trajectory, read_joint_trajectory,
    render_arm, write_joint_trajectory, ArmModel, JointTrajectory, RenderedSample,
};
use worldforge::latent::VideoTensor;
use worldforge::rng::substream;

use super::{write_masks, write_video};
use crate::manifest::{GeometryConfig, PipelineManifest};
use crate::{CliError, Result, Staging, StageExt};

pub struct ViewPair {
    pub source: RenderedSample,
    pub condition1: Vec<Reprojection>,
    pub condition2: RenderedSample,
    pub source_actions: ActionSequence,
    pub transferred_actions: ActionSequence,
    pub transferred_joints: JointTrajectory,
}

fn planar(dx: f64, dy: f64, yaw: f64) -> Pose {
    let r = Pose::rot_z(yaw);
    Pose::new(*r.rotation(), nalgebra::Vector3::new(dx, dy, 0.0)).expect("rotation about z")
}

fn ee_poses(arm: &ArmModel, traj: &JointTrajectory, dt: f64) -> Result<ActionSequence> {
    let poses = (0..traj.steps)
        .map(|t| {
            let q = &traj.at(t)[..arm.arm_dofs()];
            let ee = *forward_kinematics(arm, q).last().expect("base point");
            Pose::new(*Pose::rot_z(q.iter().sum()).rotation(), nalgebra::Vector3::new(ee[0], ee[1], 0.0))
                .expect("rotation about z")
        })
        .collect();
    ActionSequence::new(poses, (0..traj.steps).map(|t| t as f64 * dt).collect()).stage("transfer")
}

/// Builds both conditions for `traj` rendered over `background`.
pub fn build_view_pair(
    arm: &ArmModel,
    traj: &JointTrajectory,
    background: &VideoTensor,
    cfg: &GeometryConfig,
) -> Result<ViewPair> {
    let k = desk_camera();
    let source = render_arm(arm, traj, &k, background).stage("render")?;
    let [dx, dy, yaw] = cfg.relocation;
    let base_b = planar(dx, dy, yaw);

    // The relocated base seen from the original camera equals the original
    // base seen from a camera moved by the inverse relocation.
    let z = Pose::from_translation(0.0, 0.0, arm.plane_z);
    let view = z.compose(&base_b).compose(&z.inverse()).inverse();
    let (h, w) = (k.height, k.width);
    let condition1 = (0..traj.steps)
        .map(|t| {
            let mask = source.frame_mask(t);
            let depth = mask.iter().map(|&a| if a { arm.plane_z } else { cfg.background_depth }).collect();
            let depth = DepthMap::new(w, h, depth).stage("reproject")?;
            let frame = Image::new(w, h, background.channels, source.frames.frame(t).to_vec()).stage("reproject")?;
            double_reproject(&frame, &depth, &view, &k, mask).stage("reproject")
        })
        .collect::<Result<Vec<_>>>()?;

    let source_actions = ee_poses(arm, traj, cfg.frame_dt)?;
    let transferred_actions = transfer_actions(&Pose::identity(), &base_b, &source_actions);
    let d = arm.dofs();
    let mut data = traj.data().to_vec();
    for (t, p) in transferred_actions.poses().iter().enumerate() {
        let tr = p.translation();
        let q = planar_ik(arm, [tr[0], tr[1]], traj.at(t)[1]).stage("transfer")?;
        data[t * d..t * d + 2].copy_from_slice(&q);
    }
    let transferred_joints = JointTrajectory::new(traj.steps, d, data).stage("transfer")?;
    let blank = VideoTensor::zeros(traj.steps, h, w, background.channels);
    let condition2 = render_arm(arm, &transferred_joints, &k, &blank).stage("render")?;
    Ok(ViewPair { source, condition1, condition2, source_actions, transferred_actions, transferred_joints })
}

pub fn run(m: &PipelineManifest, out: &mut Staging) -> Result<serde_json::Value> {
    let cfg = &m.config.geometry;
    let arm = ArmModel::desk();
    let k = desk_camera();
    let traj = match m.inputs.get("trajectory") {
        Some(p) => {
            let f = std::fs::File::open(p)?;
            read_joint_trajectory(std::io::BufReader::new(f)).stage("load")?
        }
        None => random_trajectory(&mut substream(m.seed, "viewpair.trajectory"), &arm, cfg.frames),
    };
    if traj.dofs != arm.dofs() {
        return Err(CliError::Validation(format!("trajectory has {} DOFs, the desk arm {}", traj.dofs, arm.dofs())));
    }
    let background = clutter_background(&mut substream(m.seed, "viewpair.background"), traj.steps, &k, 1);
    let pair = build_view_pair(&arm, &traj, &background, cfg)?;

    let (h, w) = (k.height, k.width);
    write_video(out, "source", &pair.source.frames)?;
    write_masks(out, "source", &pair.source.masks, traj.steps, h, w)?;
    for (t, r) in pair.condition1.iter().enumerate() {
        out.write_frame(&format!("condition1/frame_{t:03}.pgm"), &r.frame.data, h, w, r.frame.channels)?;
        out.write_mask(&format!("condition1/mask_{t:03}.pgm"), &r.mask, h, w)?;
    }
    write_video(out, "condition2", &pair.condition2.frames)?;
    out.with_writer("joints_source.txt", |b| write_joint_trajectory(b, &traj).stage("write"))?;
    out.with_writer("joints_transferred.txt", |b| write_joint_trajectory(b, &pair.transferred_joints).stage("write"))?;
    out.with_writer("actions_source.txt", |b| write_trajectory(b, &pair.source_actions).stage("write"))?;
    out.with_writer("actions_transferred.txt", |b| write_trajectory(b, &pair.transferred_actions).stage("write"))?;

    let valid: usize = pair.condition1.iter().map(|r| r.mask.iter().filter(|&&v| v).count()).sum();
    Ok(json!({
        "frames": traj.steps,
        "condition1_valid_fraction": valid as f64 / (traj.steps * h * w) as f64,
        "arm_out_of_frame": pair.condition2.out_of_frame.len(),
    }))
}
