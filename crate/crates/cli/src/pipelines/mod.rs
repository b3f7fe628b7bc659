mod augment;
mod dream;
mod mimicpair;
mod sysid;
mod viewpair;

pub use mimicpair::{build_mimic_pair, MimicPair};
pub use viewpair::{build_view_pair, ViewPair};

use worldforge::latent::VideoTensor;

use crate::manifest::{Pipeline, PipelineManifest};
use crate::{Result, Staging};

pub fn execute(m: &PipelineManifest, out: &mut Staging) -> Result<serde_json::Value> {
    match m.pipeline {
        Pipeline::Dream => dream::run(m, out),
        Pipeline::Viewpair => viewpair::run(m, out),
        Pipeline::Mimicpair => mimicpair::run(m, out),
        Pipeline::Sysid => sysid::run(m, out),
        Pipeline::Augment => augment::run(m, out),
    }
}

/// `dir/frame_TT.pgm` (or `.ppm`) for every frame.
fn write_video(out: &mut Staging, dir: &str, v: &VideoTensor) -> Result<()> {
    let ext = if v.channels == 3 { "ppm" } else { "pgm" };
    for t in 0..v.frames {
        out.write_frame(&format!("{dir}/frame_{t:03}.{ext}"), v.frame(t), v.height, v.width, v.channels)?;
    }
    Ok(())
}

fn write_masks(out: &mut Staging, dir: &str, masks: &[bool], frames: usize, height: usize, width: usize) -> Result<()> {
    let n = height * width;
    for t in 0..frames {
        out.write_mask(&format!("{dir}/mask_{t:03}.pgm"), &masks[t * n..(t + 1) * n], height, width)?;
    }
    Ok(())
}
