//! Z-buffered forward warping and the double-reprojection pair builder.

use super::{project, unproject, CameraIntrinsics, DepthMap, GeometryError, Pose, Result};

/// Row-major interleaved image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(GeometryError::ShapeMismatch(format!(
                "{} values for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { width, height, channels, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }
}

/// Result of a forward warp: target frame, coverage mask and the depth of
/// each covered pixel in the target camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Warp {
    pub frame: Image,
    pub mask: Vec<bool>,
    pub depth: DepthMap,
}

fn check_sizes(frame: &Image, depth: &DepthMap, k: &CameraIntrinsics) -> Result<()> {
    if frame.width != depth.width || frame.height != depth.height {
        return Err(GeometryError::ShapeMismatch(format!(
            "frame {}x{} vs depth {}x{}",
            frame.width, frame.height, depth.width, depth.height
        )));
    }
    if frame.width != k.width || frame.height != k.height {
        return Err(GeometryError::ShapeMismatch(format!(
            "frame {}x{} vs camera {}x{}",
            frame.width, frame.height, k.width, k.height
        )));
    }
    k.check()
}

fn forward_warp(
    frame: &Image,
    depth: &DepthMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    source_ok: Option<&[bool]>,
) -> Result<Warp> {
    check_sizes(frame, depth, k)?;
    let (w, h) = (frame.width, frame.height);
    let mut out = Image::zeros(w, h, frame.channels);
    let mut zbuf = vec![f64::INFINITY; w * h];
    for y in 0..h {
        for x in 0..w {
            if source_ok.is_some_and(|m| !m[y * w + x]) {
                continue;
            }
            let Some(d) = depth.at(x, y) else { continue };
            let p = pose.transform_point(&unproject(x as f64, y as f64, d, k)?);
            let Ok((u, v, z)) = project(&p, k) else { continue };
            let (tx, ty) = (u.round(), v.round());
            if tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
                continue;
            }
            let (tx, ty) = (tx as usize, ty as usize);
            let i = ty * w + tx;
            if z < zbuf[i] {
                zbuf[i] = z;
                out.pixel_mut(tx, ty).copy_from_slice(frame.pixel(x, y));
            }
        }
    }
    let mask: Vec<bool> = zbuf.iter().map(|z| z.is_finite()).collect();
    let depth = DepthMap::with_mask(w, h, zbuf.iter().map(|&z| if z.is_finite() { z } else { 0.0 }).collect(), mask.clone())?;
    Ok(Warp { frame: out, mask, depth })
}

/// Forward-warps `frame` into the camera reached by `pose_a_to_b` (which maps
/// points in camera A coordinates to camera B coordinates). Each source
/// pixel splats to its nearest target pixel; the nearest surface wins.
pub fn warp_frame(frame: &Image, depth: &DepthMap, pose_a_to_b: &Pose, k: &CameraIntrinsics) -> Result<Warp> {
    forward_warp(frame, depth, pose_a_to_b, k, None)
}

/// Degraded condition frame aligned with the original view.
#[derive(Clone, Debug, PartialEq)]
pub struct Reprojection {
    pub frame: Image,
    pub mask: Vec<bool>,
}

/// Warps A→B (excluding arm pixels) and back B→A using the carried depth.
/// Holes and the arm region are invalid and zeroed.
pub fn double_reproject(
    frame: &Image,
    depth: &DepthMap,
    pose_a_to_b: &Pose,
    k: &CameraIntrinsics,
    arm_mask: &[bool],
) -> Result<Reprojection> {
    if arm_mask.len() != frame.width * frame.height {
        return Err(GeometryError::ShapeMismatch(format!(
            "arm mask has {} entries for {}x{}",
            arm_mask.len(),
            frame.width,
            frame.height
        )));
    }
    let keep: Vec<bool> = arm_mask.iter().map(|&a| !a).collect();
    let there = forward_warp(frame, depth, pose_a_to_b, k, Some(&keep))?;
    let back = forward_warp(&there.frame, &there.depth, &pose_a_to_b.inverse(), k, None)?;
    let mut out = back.frame;
    let mut mask = back.mask;
    for (i, m) in mask.iter_mut().enumerate() {
        if arm_mask[i] {
            *m = false;
        }
        if !*m {
            let c = out.channels;
            out.data[i * c..(i + 1) * c].fill(0.0);
        }
    }
    Ok(Reprojection { frame: out, mask })
}
