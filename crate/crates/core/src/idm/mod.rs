//! Inverse dynamics from video: a synthetic planar-arm renderer that
//! produces frames, arm masks and ground-truth joint trajectories, and a
//! small trainable model recovering joint angles from masked frames.

mod io;
mod model;

pub use io::{read_dataset, read_joint_trajectory, write_dataset, write_joint_trajectory};
pub use model::{idm_infer, idm_train, IdmConfig, IdmMetrics, IdmModel};

use rand::Rng;

use crate::geometry::CameraIntrinsics;
use crate::latent::VideoTensor;

#[derive(Debug, thiserror::Error)]
pub enum IdmError {
    #[error("invalid arm: {0}")]
    BadArm(String),
    #[error("joint {joint} at step {step} is {value}, outside [{lo}, {hi}]")]
    OutOfLimits { step: usize, joint: usize, value: f64, lo: f64, hi: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("target ({x}, {y}) is out of reach")]
    Unreachable { x: f64, y: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("dataset file: {0}")]
    Io(String),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Latent(#[from] crate::latent::LatentError),
}

impl From<std::io::Error> for IdmError {
    fn from(e: std::io::Error) -> Self {
        IdmError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, IdmError>;

/// Planar serial arm in the plane `z = plane_z` of the camera frame, based at
/// the optical axis. Gripper DOFs are openness values in `[0, 1]`; the first
/// is drawn as a pair of fingers.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArmModel {
    pub links: Vec<f64>,
    pub grip_dofs: usize,
    /// Per arm joint `(lo, hi)` in radians.
    pub limits: Vec<(f64, f64)>,
    pub plane_z: f64,
    pub link_half_width: f64,
    pub finger_length: f64,
}

impl ArmModel {
    /// Two unit links and one gripper (`D = 3`).
    pub fn desk() -> Self {
        Self {
            links: vec![1.0, 1.0],
            grip_dofs: 1,
            limits: vec![(-1.2, 1.2), (-1.5, 1.5)],
            plane_z: 5.0,
            link_half_width: 0.09,
            finger_length: 0.6,
        }
    }

    /// Twelve short links and two grippers (`D = 14`).
    pub fn fourteen_dof() -> Self {
        Self {
            links: vec![2.0 / 12.0; 12],
            grip_dofs: 2,
            limits: vec![(-0.4, 0.4); 12],
            plane_z: 5.0,
            link_half_width: 0.05,
            finger_length: 0.3,
        }
    }

    pub fn arm_dofs(&self) -> usize {
        self.links.len()
    }

    pub fn dofs(&self) -> usize {
        self.links.len() + self.grip_dofs
    }

    pub fn validate(&self) -> Result<()> {
        if self.links.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(IdmError::BadArm("link lengths must be positive".into()));
        }
        if self.dofs() == 0 || self.limits.len() != self.links.len() {
            return Err(IdmError::BadArm("need at least one DOF and one limit per link".into()));
        }
        if self.limits.iter().any(|(lo, hi)| !(lo <= hi)) || !(self.link_half_width > 0.0) {
            return Err(IdmError::BadArm("bad limits or link width".into()));
        }
        Ok(())
    }
}

/// `T x D` joint values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTrajectory {
    pub steps: usize,
    pub dofs: usize,
    data: Vec<f64>,
}

impl JointTrajectory {
    pub fn new(steps: usize, dofs: usize, data: Vec<f64>) -> Result<Self> {
        if steps == 0 || dofs == 0 || data.len() != steps * dofs {
            return Err(IdmError::ShapeMismatch(format!("{} values for {steps}x{dofs}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(IdmError::NonFinite("joint trajectory".into()));
        }
        Ok(Self { steps, dofs, data })
    }

    pub fn at(&self, t: usize) -> &[f64] {
        &self.data[t * self.dofs..(t + 1) * self.dofs]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn check_limits(&self, arm: &ArmModel) -> Result<()> {
        if self.dofs != arm.dofs() {
            return Err(IdmError::ShapeMismatch(format!("trajectory has {} DOFs, arm {}", self.dofs, arm.dofs())));
        }
        for t in 0..self.steps {
            let row = self.at(t);
            let bounds = arm.limits.iter().copied().chain(std::iter::repeat_n((0.0, 1.0), arm.grip_dofs));
            for (j, ((lo, hi), &v)) in bounds.zip(row).enumerate() {
                if !(lo..=hi).contains(&v) {
                    return Err(IdmError::OutOfLimits { step: t, joint: j, value: v, lo, hi });
                }
            }
        }
        Ok(())
    }

    /// Mean absolute error per DOF against `other`.
    pub fn mae_per_joint(&self, other: &JointTrajectory) -> Vec<f64> {
        let mut out = vec![0.0; self.dofs];
        for (i, (a, b)) in self.data.iter().zip(&other.data).enumerate() {
            out[i % self.dofs] += (a - b).abs();
        }
        out.iter_mut().for_each(|v| *v /= self.steps as f64);
        out
    }
}

/// Joint positions in the arm plane, base first, end effector last.
pub fn forward_kinematics(arm: &ArmModel, angles: &[f64]) -> Vec<[f64; 2]> {
    let mut pts = vec![[0.0, 0.0]];
    let mut phi = 0.0;
    for (l, a) in arm.links.iter().zip(angles) {
        phi += a;
        let [x, y] = *pts.last().unwrap();
        pts.push([x + l * phi.cos(), y + l * phi.sin()]);
    }
    pts
}

/// Joint angles of a two-link arm placing its end effector at `target`;
/// `elbow` picks the sign of the second joint.
pub fn planar_ik(arm: &ArmModel, target: [f64; 2], elbow: f64) -> Result<[f64; 2]> {
    let [l1, l2] = arm.links[..] else {
        return Err(IdmError::BadArm(format!("closed-form IK needs 2 links, got {}", arm.links.len())));
    };
    let [x, y] = target;
    let c2 = (x * x + y * y - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
    if !(c2.abs() <= 1.0 + 1e-12) {
        return Err(IdmError::Unreachable { x, y });
    }
    let q2 = elbow.signum() * c2.clamp(-1.0, 1.0).acos();
    let q1 = y.atan2(x) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
    let q1 = (q1 + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
    Ok([q1, q2])
}

/// Frames, per-pixel arm masks (`T * H * W`) and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSample {
    pub frames: VideoTensor,
    pub masks: Vec<bool>,
    pub trajectory: JointTrajectory,
    /// Frames in which no arm pixel landed inside the image.
    pub out_of_frame: Vec<usize>,
}

impl RenderedSample {
    pub fn frame_mask(&self, t: usize) -> &[bool] {
        let n = self.frames.height * self.frames.width;
        &self.masks[t * n..(t + 1) * n]
    }
}

struct Stroke {
    a: [f64; 2],
    b: [f64; 2],
    half_width: f64,
    shade: f64,
}

fn strokes(arm: &ArmModel, row: &[f64]) -> Vec<Stroke> {
    let pts = forward_kinematics(arm, &row[..arm.arm_dofs()]);
    let n = arm.links.len();
    let mut out: Vec<Stroke> = (0..n)
        .map(|i| Stroke {
            a: pts[i],
            b: pts[i + 1],
            half_width: arm.link_half_width * (1.0 - 0.2 * i as f64 / n as f64),
            shade: 0.9 - 0.3 * i as f64 / (n.max(2) - 1) as f64,
        })
        .collect();
    if arm.grip_dofs > 0 {
        let ee = pts[n];
        let phi: f64 = row[..n].iter().sum();
        let spread = 0.3 + 1.0 * row[n];
        for s in [1.0, -1.0] {
            let ang = phi + s * spread;
            out.push(Stroke {
                a: ee,
                b: [ee[0] + arm.finger_length * ang.cos(), ee[1] + arm.finger_length * ang.sin()],
                half_width: arm.link_half_width * 0.7,
                shade: 0.8,
            });
        }
    }
    out
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 { (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((p[0] - a[0] - t * d[0]).powi(2) + (p[1] - a[1] - t * d[1]).powi(2)).sqrt()
}

/// Draws the arm over `background` with anti-aliased strokes; the mask is
/// every pixel with nonzero arm coverage.
pub fn render_arm(
    arm: &ArmModel,
    traj: &JointTrajectory,
    k: &CameraIntrinsics,
    background: &VideoTensor,
) -> Result<RenderedSample> {
    arm.validate()?;
    traj.check_limits(arm)?;
    if background.width != k.width || background.height != k.height || background.frames != traj.steps {
        return Err(IdmError::ShapeMismatch(format!(
            "background {:?} vs camera {}x{} and {} steps",
            background.dims(),
            k.width,
            k.height,
            traj.steps
        )));
    }
    let (h, w, c) = (k.height, k.width, background.channels);
    let mut frames = background.clone();
    let mut masks = vec![false; traj.steps * h * w];
    let mut out_of_frame = Vec::new();
    for t in 0..traj.steps {
        let mut any = false;
        if arm.plane_z > 0.0 {
            let pixel = arm.plane_z / k.fx;
            let ss = strokes(arm, traj.at(t));
            let frame = frames.frame_mut(t);
            for y in 0..h {
                for x in 0..w {
                    let p = [(x as f64 - k.cx) * arm.plane_z / k.fx, (y as f64 - k.cy) * arm.plane_z / k.fy];
                    let i = y * w + x;
                    for s in &ss {
                        let alpha = (0.5 + (s.half_width - segment_distance(p, s.a, s.b)) / pixel).clamp(0.0, 1.0);
                        if alpha > 0.0 {
                            for v in &mut frame[i * c..(i + 1) * c] {
                                *v = *v * (1.0 - alpha) + s.shade * alpha;
                            }
                            masks[t * h * w + i] = true;
                            any = true;
                        }
                    }
                }
            }
        }
        if !any {
            out_of_frame.push(t);
        }
    }
    Ok(RenderedSample { frames, masks, trajectory: traj.clone(), out_of_frame })
}

/// Static background of random bright rectangles.
pub fn clutter_background<R: Rng + ?Sized>(rng: &mut R, frames: usize, k: &CameraIntrinsics, channels: usize) -> VideoTensor {
    let (h, w) = (k.height, k.width);
    let mut plane = vec![0.0; h * w * channels];
    for _ in 0..6 {
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let (rw, rh) = (rng.random_range(3..10), rng.random_range(3..10));
        let shade: f64 = rng.random_range(0.2..1.0);
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                plane[(y * w + x) * channels..(y * w + x + 1) * channels].fill(shade);
            }
        }
    }
    let data = plane.iter().copied().cycle().take(frames * plane.len()).collect();
    VideoTensor::new(frames, h, w, channels, data).expect("sized")
}

/// Smooth sinusoidal joint motion inside 70% of each joint range, with a
/// sinusoidal gripper.
pub fn random_trajectory<R: Rng + ?Sized>(rng: &mut R, arm: &ArmModel, steps: usize) -> JointTrajectory {
    let d = arm.dofs();
    let mut data = vec![0.0; steps * d];
    for (j, &(lo, hi)) in arm.limits.iter().enumerate() {
        let c = rng.random_range(0.7 * lo..=0.7 * hi);
        let amp = rng.random_range(0.0..0.3);
        let freq = rng.random_range(0.1..0.5);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for t in 0..steps {
            data[t * d + j] = (c + amp * (freq * t as f64 + phase).sin()).clamp(lo, hi);
        }
    }
    for g in 0..arm.grip_dofs {
        let freq = rng.random_range(0.1..0.5);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for t in 0..steps {
            data[t * d + arm.arm_dofs() + g] = (0.5 + 0.4 * (freq * t as f64 + phase).sin()).clamp(0.0, 1.0);
        }
    }
    JointTrajectory::new(steps, d, data).expect("finite")
}

/// Default 32x32 camera looking at the arm plane.
pub fn desk_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(35.0, 35.0, 15.5, 15.5, 32, 32).expect("valid")
}

/// Renders `n` random clips (`steps` frames) on clutter or a black background.
pub fn synthetic_dataset<R: Rng + ?Sized>(
    rng: &mut R,
    arm: &ArmModel,
    k: &CameraIntrinsics,
    n: usize,
    steps: usize,
    clutter: bool,
) -> Result<Vec<RenderedSample>> {
    (0..n)
        .map(|_| {
            let traj = random_trajectory(rng, arm, steps);
            let bg = if clutter {
                clutter_background(rng, steps, k, 1)
            } else {
                VideoTensor::zeros(steps, k.height, k.width, 1)
            };
            render_arm(arm, &traj, k, &bg)
        })
        .collect()
}
