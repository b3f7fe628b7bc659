//! Mimic training pairs: condition 1 blanks the source arm out of the
//! frames; condition 2 renders the target arm from provided joint
//! annotations (no inverse kinematics).

use std::path::Path;

use serde_json::json;
use worldforge::geometry::CameraIntrinsics;
use worldforge::idm::{
    clutter_background, desk_camera, random_trajectory, read_joint_trajectory, render_arm, write_joint_trajectory,
    ArmModel, JointTrajectory, RenderedSample,
};
use worldforge::latent::{read_pnm, VideoTensor};
use worldforge::rng::substream;

use super::{write_masks, write_video};
use crate::manifest::{ArmPreset, PipelineManifest};
use crate::{CliError, Result, Staging, StageExt};

pub struct MimicPair {
    pub condition1: VideoTensor,
    pub condition2: RenderedSample,
}

/// Camera matching the desk camera's field of view at `width x height`.
pub fn scaled_camera(width: usize, height: usize) -> Result<CameraIntrinsics> {
    let k = desk_camera();
    let (sx, sy) = (width as f64 / k.width as f64, height as f64 / k.height as f64);
    CameraIntrinsics::new(k.fx * sx, k.fy * sy, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height)
        .stage("camera")
}

pub fn build_mimic_pair(
    frames: &VideoTensor,
    masks: &[bool],
    target: &ArmModel,
    joints: &JointTrajectory,
) -> Result<MimicPair> {
    let n = frames.height * frames.width;
    if masks.len() != frames.frames * n {
        return Err(CliError::Validation(format!("{} mask pixels for {:?} frames", masks.len(), frames.dims())));
    }
    if joints.steps != frames.frames {
        return Err(CliError::Validation(format!("{} pose annotations for {} frames", joints.steps, frames.frames)));
    }
    if joints.dofs != target.dofs() {
        return Err(CliError::Validation(format!("annotations have {} DOFs, target arm {}", joints.dofs, target.dofs())));
    }
    let mut condition1 = frames.clone();
    let c = frames.channels;
    for t in 0..frames.frames {
        let frame = condition1.frame_mut(t);
        for (i, &arm) in masks[t * n..(t + 1) * n].iter().enumerate() {
            if arm {
                frame[i * c..(i + 1) * c].fill(0.0);
            }
        }
    }
    let k = scaled_camera(frames.width, frames.height)?;
    let blank = VideoTensor::zeros(frames.frames, frames.height, frames.width, c);
    let condition2 = render_arm(target, joints, &k, &blank).stage("render")?;
    Ok(MimicPair { condition1, condition2 })
}

/// Reads `frame_*.p?m` files in name order from `dir`.
fn read_frames(dir: &Path, prefix: &str) -> Result<VideoTensor> {
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(prefix)))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::Validation(format!("no {prefix}* pixmaps in {}", dir.display())));
    }
    let mut data = Vec::new();
    let mut dims = None;
    for p in &names {
        let (h, w, c, v) = read_pnm(std::fs::File::open(p)?).stage("load")?;
        if dims.is_some_and(|d| d != (h, w, c)) {
            return Err(CliError::Validation(format!("{} differs in size from earlier frames", p.display())));
        }
        dims = Some((h, w, c));
        data.extend(v);
    }
    let (h, w, c) = dims.expect("nonempty");
    VideoTensor::new(names.len(), h, w, c, data).stage("load")
}

pub fn run(m: &PipelineManifest, out: &mut Staging) -> Result<serde_json::Value> {
    let target = match m.config.idm.target_arm {
        ArmPreset::Desk => ArmModel::desk(),
        ArmPreset::FourteenDof => ArmModel::fourteen_dof(),
    };
    let (frames, masks) = match (m.inputs.get("frames"), m.inputs.get("masks")) {
        (Some(f), Some(k)) => {
            let frames = read_frames(f, "frame_")?;
            let mv = read_frames(k, "mask_")?;
            if mv.channels != 1 || mv.frames != frames.frames || (mv.height, mv.width) != (frames.height, frames.width) {
                return Err(CliError::Validation(format!("masks {:?} do not align with frames {:?}", mv.dims(), frames.dims())));
            }
            (frames, mv.data().iter().map(|&v| v > 0.5).collect::<Vec<_>>())
        }
        _ => {
            let arm = ArmModel::desk();
            let k = desk_camera();
            let steps = m.config.geometry.frames;
            let traj = random_trajectory(&mut substream(m.seed, "mimicpair.source"), &arm, steps);
            let bg = clutter_background(&mut substream(m.seed, "mimicpair.background"), steps, &k, 1);
            let s = render_arm(&arm, &traj, &k, &bg).stage("render")?;
            (s.frames, s.masks)
        }
    };
    let joints = match m.inputs.get("annotations") {
        Some(p) => read_joint_trajectory(std::io::BufReader::new(std::fs::File::open(p)?)).stage("load")?,
        None => random_trajectory(&mut substream(m.seed, "mimicpair.target"), &target, frames.frames),
    };
    let pair = build_mimic_pair(&frames, &masks, &target, &joints)?;

    write_video(out, "source", &frames)?;
    write_masks(out, "source", &masks, frames.frames, frames.height, frames.width)?;
    write_video(out, "condition1", &pair.condition1)?;
    write_video(out, "condition2", &pair.condition2.frames)?;
    write_masks(out, "condition2", &pair.condition2.masks, frames.frames, frames.height, frames.width)?;
    out.with_writer("target_joints.txt", |b| write_joint_trajectory(b, &joints).stage("write"))?;
    Ok(json!({
        "frames": frames.frames,
        "target_dofs": target.dofs(),
        "masked_fraction": masks.iter().filter(|&&v| v).count() as f64 / masks.len() as f64,
    }))
}
