//! SE(3) poses, action relocation between robot bases, pinhole cameras and
//! depth-based forward warping.

mod io;
mod warp;

pub use io::{read_depth, read_trajectory, write_depth, write_trajectory};
pub use warp::{double_reproject, warp_frame, Image, Reprojection, Warp};

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("rotation is not orthonormal (deviation {0:.3e})")]
    NonOrthonormal(f64),
    #[error("point at depth {0} is behind the camera")]
    BehindCamera(f64),
    #[error("invalid intrinsics: {0}")]
    BadIntrinsics(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("action sequence is empty or misaligned with its timestamps")]
    BadSequence,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

const ORTHO_TOL: f64 = 1e-9;

/// Rigid transform `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let dev = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        let worst = dev.max((det - 1.0).abs());
        if !(worst <= ORTHO_TOL) || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonOrthonormal(worst));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::new(x, y, z) }
    }

    /// Rotation of `angle` radians about `axis` followed by `translation`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self { rotation: r.into_inner(), translation }
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::z(), angle, Vector3::zeros())
    }

    /// Uniformly oriented rotation with a Gaussian translation of scale `t_scale`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, t_scale: f64) -> Self {
        let axis = loop {
            let a = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            if a.norm() > 1e-6 {
                break a;
            }
        };
        let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let t = Vector3::from_fn(|_, _| t_scale * rng.sample::<f64, _>(StandardNormal));
        Self::from_axis_angle(axis, angle, t)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Row-major rotation followed by translation.
    pub fn to_array12(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)], t.x, t.y, t.z]
    }

    pub fn from_array12(v: &[f64; 12]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(&v[..9]), Vector3::new(v[9], v[10], v[11]))
    }

    /// Largest absolute entry difference of the homogeneous matrices.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        (self.to_homogeneous() - other.to_homogeneous()).amax()
    }
}

pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn pose_inverse(a: &Pose) -> Pose {
    a.inverse()
}

/// End-effector poses relative to the robot base, with timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSequence {
    poses: Vec<Pose>,
    timestamps: Vec<f64>,
}

impl ActionSequence {
    pub fn new(poses: Vec<Pose>, timestamps: Vec<f64>) -> Result<Self> {
        if poses.is_empty() || poses.len() != timestamps.len() {
            return Err(GeometryError::BadSequence);
        }
        Ok(Self { poses, timestamps })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Re-expresses base-relative actions for a robot whose base moved from
/// `base_a` to `base_b` (both base-to-world) so that every end-effector
/// world pose is unchanged: `K_t = base_b⁻¹ ∘ base_a ∘ a_t`.
pub fn transfer_actions(base_a: &Pose, base_b: &Pose, actions: &ActionSequence) -> ActionSequence {
    let rel = base_b.inverse().compose(base_a);
    ActionSequence {
        poses: actions.poses.iter().map(|a| rel.compose(a)).collect(),
        timestamps: actions.timestamps.clone(),
    }
}

/// Pinhole intrinsics; pixel centers sit at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.check()?;
        Ok(k)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::BadIntrinsics(format!("focal lengths {} {}", self.fx, self.fy)));
        }
        let inside = |c: f64, n: usize| (0.0..=(n as f64 - 1.0).max(0.0)).contains(&c);
        if self.width == 0 || self.height == 0 || !inside(self.cx, self.width) || !inside(self.cy, self.height) {
            return Err(GeometryError::BadIntrinsics(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }
}

pub fn unproject(u: f64, v: f64, depth: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(GeometryError::BehindCamera(depth));
    }
    Ok(Vector3::new((u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth))
}

/// Returns `(u, v, depth)`.
pub fn project(p: &Vector3<f64>, k: &CameraIntrinsics) -> Result<(f64, f64, f64)> {
    if !(p.z > 0.0 && p.z.is_finite()) {
        return Err(GeometryError::BehindCamera(p.z));
    }
    Ok((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy, p.z))
}

/// Per-pixel metric depth with a validity mask; row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Entries that are non-positive or non-finite are marked invalid.
    pub fn new(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != width * height {
            return Err(GeometryError::ShapeMismatch(format!("{} depths for {width}x{height}", depth.len())));
        }
        let valid = depth.iter().map(|d| *d > 0.0 && d.is_finite()).collect();
        Ok(Self::from_parts(width, height, depth, valid))
    }

    pub fn with_mask(width: usize, height: usize, depth: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != depth.len() {
            return Err(GeometryError::ShapeMismatch("mask and depth lengths differ".into()));
        }
        let mut d = Self::new(width, height, depth)?;
        for (v, m) in d.valid.iter_mut().zip(mask) {
            *v &= m;
        }
        Ok(d)
    }

    fn from_parts(width: usize, height: usize, mut depth: Vec<f64>, valid: Vec<bool>) -> Self {
        for (d, v) in depth.iter_mut().zip(&valid) {
            if !v {
                *d = 0.0;
            }
        }
        Self { width, height, depth, valid }
    }

    pub fn constant(width: usize, height: usize, z: f64) -> Result<Self> {
        Self::new(width, height, vec![z; width * height])
    }

    pub fn at(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.depth[i])
    }

    pub fn depths(&self) -> &[f64] {
        &self.depth
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }
}
