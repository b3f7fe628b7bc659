//! Demonstration retargeting: split a seed demonstration into
//! object-anchored and free segments from gripper events, move anchored
//! segments with their object, blend the free segments in between, and
//! check the result for step size and workspace limits.

mod io;

pub use io::{read_demo, write_demo};

use std::collections::BTreeMap;

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{ActionSequence, GeometryError, Pose};

#[derive(Debug, thiserror::Error)]
pub enum ActgenError {
    #[error("anchored segment [{start}, {end}] references unknown object {object:?}")]
    UnknownObject { start: usize, end: usize, object: String },
    #[error("invalid demo: {0}")]
    BadDemo(String),
    #[error("demo file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ActgenError>;

pub const GRIP_THRESHOLD: f64 = 0.5;
pub const GRIP_HYSTERESIS: f64 = 0.05;

/// Steps `start..=end` (1-based) during which the end effector works
/// relative to `object`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub start: usize,
    pub end: usize,
    pub object: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demo {
    pub ee: ActionSequence,
    /// Gripper openness per step, 1 = open.
    pub gripper: Vec<f64>,
    /// Object poses at record time.
    pub objects: BTreeMap<String, Pose>,
    pub annotations: Vec<Annotation>,
}

impl Demo {
    pub fn new(
        ee: ActionSequence,
        gripper: Vec<f64>,
        objects: BTreeMap<String, Pose>,
        annotations: Vec<Annotation>,
    ) -> Result<Self> {
        let t = ee.len();
        if gripper.len() != t || gripper.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(ActgenError::BadDemo(format!("{} gripper values in [0, 1] needed for {t} steps", t)));
        }
        let mut spans: Vec<&Annotation> = annotations.iter().collect();
        spans.sort_by_key(|a| a.start);
        for a in &spans {
            if a.start < 1 || a.end > t || a.start > a.end {
                return Err(ActgenError::BadDemo(format!("annotation [{}, {}] outside [1, {t}]", a.start, a.end)));
            }
        }
        if spans.windows(2).any(|w| w[1].start <= w[0].end) {
            return Err(ActgenError::BadDemo("annotations overlap".into()));
        }
        Ok(Self { ee, gripper, objects, annotations })
    }

    pub fn len(&self) -> usize {
        self.ee.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ee.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SegmentKind {
    Free,
    /// Object chosen by annotation, else the object nearest the end
    /// effector when the gripper closed; `None` when the demo has no objects.
    Anchored(Option<String>),
}

/// Steps `start..=end`, 1-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub kind: SegmentKind,
}

/// Gripper closed intervals `(close_step, open_step)`, 1-based; the open
/// step is the demo length when the gripper never reopens.
fn grasp_intervals(gripper: &[f64]) -> Vec<(usize, usize)> {
    let mut closed = gripper.first().is_some_and(|&g| g < GRIP_THRESHOLD);
    let mut start = None;
    let mut out = Vec::new();
    for (i, &g) in gripper.iter().enumerate().skip(1) {
        if !closed && g < GRIP_THRESHOLD - GRIP_HYSTERESIS {
            closed = true;
            start = Some(i + 1);
        } else if closed && g > GRIP_THRESHOLD + GRIP_HYSTERESIS {
            closed = false;
            if let Some(s) = start.take() {
                out.push((s, i + 1));
            }
        }
    }
    if let Some(s) = start {
        out.push((s, gripper.len()));
    }
    out
}

pub fn segment_demo(demo: &Demo) -> Vec<Segment> {
    let t = demo.len();
    let mut out = Vec::new();
    let mut next = 1;
    for (s, e) in grasp_intervals(&demo.gripper) {
        if s > next {
            out.push(Segment { start: next, end: s - 1, kind: SegmentKind::Free });
        }
        let object = demo
            .annotations
            .iter()
            .find(|a| a.start <= s && s <= a.end)
            .map(|a| a.object.clone())
            .or_else(|| {
                let p = demo.ee.poses()[s - 1].translation();
                demo.objects
                    .iter()
                    .min_by(|a, b| (a.1.translation() - p).norm().total_cmp(&(b.1.translation() - p).norm()))
                    .map(|(k, _)| k.clone())
            });
        out.push(Segment { start: s, end: e, kind: SegmentKind::Anchored(object) });
        next = e + 1;
    }
    if next <= t {
        out.push(Segment { start: next, end: t, kind: SegmentKind::Free });
    }
    out
}

/// Record-time and target pose of one object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectMove {
    pub old: Pose,
    pub new: Pose,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetargetSpec {
    pub objects: BTreeMap<String, ObjectMove>,
}

impl RetargetSpec {
    /// Leaves every object of `demo` where it was recorded.
    pub fn identity(demo: &Demo) -> Self {
        Self { objects: demo.objects.iter().map(|(k, &p)| (k.clone(), ObjectMove { old: p, new: p })).collect() }
    }

    /// World-frame correction `new ∘ old⁻¹`; exactly the identity when the
    /// object does not move.
    pub fn correction(&self, object: &str) -> Option<Pose> {
        self.objects.get(object).map(|m| if m.old == m.new { Pose::identity() } else { m.new.compose(&m.old.inverse()) })
    }
}

/// Pose blend with linear translation and spherical rotation interpolation;
/// `u <= 0` and `u >= 1` return the endpoints exactly.
pub fn interpolate_pose(a: &Pose, b: &Pose, u: f64) -> Pose {
    if u <= 0.0 || a == b {
        return *a;
    }
    if u >= 1.0 {
        return *b;
    }
    let unit = |p: &Pose| {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*p.rotation()));
        UnitQuaternion::new_normalize(q.into_inner())
    };
    let (qa, qb) = (unit(a), unit(b));
    let q = qa.try_slerp(&qb, u, 1e-12).unwrap_or(if u < 0.5 { qa } else { qb });
    let q = UnitQuaternion::new_normalize(q.into_inner());
    let t = a.translation() * (1.0 - u) + b.translation() * u;
    Pose::new(q.to_rotation_matrix().into_inner(), t).expect("slerp yields a rotation")
}

/// Per-step world-frame corrections applied by [`retarget_demo`]. Free
/// segments blend from the correction of the preceding anchored segment to
/// that of the following one; the demo's first and last steps keep the
/// identity.
pub fn corrections(demo: &Demo, spec: &RetargetSpec) -> Result<Vec<Pose>> {
    let segments = segment_demo(demo);
    let mut anchored: Vec<Option<Pose>> = Vec::with_capacity(segments.len());
    for s in &segments {
        anchored.push(match &s.kind {
            SegmentKind::Free => None,
            SegmentKind::Anchored(obj) => {
                let name = obj.clone().unwrap_or_default();
                Some(spec.correction(&name).ok_or(ActgenError::UnknownObject {
                    start: s.start,
                    end: s.end,
                    object: name,
                })?)
            }
        });
    }
    let mut out = vec![Pose::identity(); demo.len()];
    for (i, s) in segments.iter().enumerate() {
        match anchored[i] {
            Some(c) => out[s.start - 1..s.end].fill(c),
            None => {
                let left = i.checked_sub(1).and_then(|j| anchored[j]);
                let right = anchored.get(i + 1).copied().flatten();
                let s0 = s.start - left.is_some() as usize;
                let e0 = s.end + right.is_some() as usize;
                let (left, right) = (left.unwrap_or_else(Pose::identity), right.unwrap_or_else(Pose::identity));
                for t in s.start..=s.end {
                    let u = if e0 > s0 { (t - s0) as f64 / (e0 - s0) as f64 } else { 0.0 };
                    out[t - 1] = interpolate_pose(&left, &right, u);
                }
            }
        }
    }
    Ok(out)
}

/// Moves anchored segments rigidly with their object
/// (`T'_t = new ∘ old⁻¹ ∘ T_t`) and blends the corrections across free
/// segments, keeping timing and the gripper signal.
pub fn retarget_demo(demo: &Demo, spec: &RetargetSpec) -> Result<Demo> {
    let c = corrections(demo, spec)?;
    let poses = demo
        .ee
        .poses()
        .iter()
        .zip(&c)
        .map(|(p, c)| if *c == Pose::identity() { *p } else { c.compose(p) })
        .collect();
    let mut objects = demo.objects.clone();
    for (k, m) in &spec.objects {
        objects.insert(k.clone(), m.new);
    }
    Ok(Demo {
        ee: ActionSequence::new(poses, demo.ee.timestamps().to_vec())?,
        gripper: demo.gripper.clone(),
        objects,
        annotations: demo.annotations.clone(),
    })
}

/// Axis-aligned box in the base frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Workspace {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchLimits {
    /// Meters per step.
    pub max_step: f64,
    /// Radians per step.
    pub max_rot_step: f64,
    pub workspace: Workspace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchReport {
    pub max_translation_step: f64,
    pub max_rotation_step: f64,
    pub translation_violations: usize,
    pub rotation_violations: usize,
    /// End-effector steps outside the workspace.
    pub ee_outside: usize,
    /// Objects whose pose lies outside the workspace.
    pub objects_outside: Vec<String>,
    pub pass: bool,
}

fn rotation_angle(a: &Pose, b: &Pose) -> f64 {
    let r = a.rotation().transpose() * b.rotation();
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

pub fn stitch_validate(demo: &Demo, limits: &StitchLimits) -> StitchReport {
    let poses = demo.ee.poses();
    let mut r = StitchReport {
        max_translation_step: 0.0,
        max_rotation_step: 0.0,
        translation_violations: 0,
        rotation_violations: 0,
        ee_outside: poses.iter().filter(|p| !limits.workspace.contains(p.translation())).count(),
        objects_outside: demo
            .objects
            .iter()
            .filter(|(_, p)| !limits.workspace.contains(p.translation()))
            .map(|(k, _)| k.clone())
            .collect(),
        pass: false,
    };
    for w in poses.windows(2) {
        let dt = (w[1].translation() - w[0].translation()).norm();
        let dr = rotation_angle(&w[0], &w[1]);
        r.max_translation_step = r.max_translation_step.max(dt);
        r.max_rotation_step = r.max_rotation_step.max(dr);
        r.translation_violations += (dt > limits.max_step) as usize;
        r.rotation_violations += (dr > limits.max_rot_step) as usize;
    }
    r.pass = r.translation_violations == 0 && r.rotation_violations == 0 && r.ee_outside == 0 && r.objects_outside.is_empty();
    r
}

/// Source of demonstrations for scenes this module cannot script, such as
/// a learned policy running in a simulator.
pub trait DemoPolicy {
    fn demonstrate(&mut self, objects: &BTreeMap<String, Pose>) -> Result<Demo>;
}

/// Rule-based pick-and-place of `object` to `place`: approach, descend,
/// close, carry, open and retreat, `phase` steps each.
#[derive(Clone, Debug)]
pub struct ScriptedPickPlace {
    pub object: String,
    pub place: Pose,
    pub home: Pose,
    pub phase: usize,
    pub dt: f64,
}

impl ScriptedPickPlace {
    pub fn desk(object: &str) -> Self {
        Self {
            object: object.to_string(),
            place: Pose::from_translation(0.45, -0.2, 0.0),
            home: Pose::from_axis_angle(Vector3::x(), std::f64::consts::PI, Vector3::new(0.3, 0.0, 0.4)),
            phase: 10,
            dt: 0.1,
        }
    }
}

fn grip_frame(height: f64) -> Pose {
    Pose::from_axis_angle(Vector3::x(), std::f64::consts::PI, Vector3::new(0.0, 0.0, height))
}

impl DemoPolicy for ScriptedPickPlace {
    fn demonstrate(&mut self, objects: &BTreeMap<String, Pose>) -> Result<Demo> {
        let obj = *objects
            .get(&self.object)
            .ok_or_else(|| ActgenError::BadDemo(format!("scene lacks object {:?}", self.object)))?;
        let n = self.phase.max(2);
        let above = obj.compose(&grip_frame(0.15));
        let grasp = obj.compose(&grip_frame(0.02));
        let lifted = Pose::from_translation(0.0, 0.0, 0.15).compose(&grasp);
        let drop = self.place.compose(&grip_frame(0.02));
        let after = self.place.compose(&grip_frame(0.15));
        let mut poses = Vec::new();
        let mut gripper = Vec::new();
        let mut leg = |a: &Pose, b: &Pose, g0: f64, g1: f64| {
            for k in 0..n {
                let u = k as f64 / (n - 1) as f64;
                poses.push(interpolate_pose(a, b, u));
                gripper.push(g0 + (g1 - g0) * u);
            }
        };
        leg(&self.home, &above, 1.0, 1.0);
        leg(&above, &grasp, 1.0, 1.0);
        leg(&grasp, &grasp, 1.0, 0.0);
        leg(&grasp, &lifted, 0.0, 0.0);
        leg(&lifted, &drop, 0.0, 0.0);
        leg(&drop, &drop, 0.0, 1.0);
        leg(&drop, &after, 1.0, 1.0);
        leg(&after, &self.home, 1.0, 1.0);
        let stamps = (0..poses.len()).map(|i| i as f64 * self.dt).collect();
        let annotations = grasp_intervals(&gripper)
            .into_iter()
            .map(|(start, end)| Annotation { start, end, object: self.object.clone() })
            .collect();
        Demo::new(ActionSequence::new(poses, stamps)?, gripper, objects.clone(), annotations)
    }
}

/// `n` retargets of `demo` with `object` shifted by up to `max_offset` in
/// x and y and turned by up to `max_yaw` about its own origin.
pub fn augment_sweep<R: Rng + ?Sized>(
    demo: &Demo,
    object: &str,
    n: usize,
    max_offset: f64,
    max_yaw: f64,
    rng: &mut R,
) -> Result<Vec<(RetargetSpec, Demo)>> {
    let old = *demo
        .objects
        .get(object)
        .ok_or_else(|| ActgenError::BadDemo(format!("demo lacks object {object:?}")))?;
    (0..n)
        .map(|_| {
            let (dx, dy) = (rng.random_range(-max_offset..=max_offset), rng.random_range(-max_offset..=max_offset));
            let yaw = rng.random_range(-max_yaw..=max_yaw);
            let new = Pose::new(
                Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).into_inner() * old.rotation(),
                old.translation() + Vector3::new(dx, dy, 0.0),
            )?;
            let mut spec = RetargetSpec::identity(demo);
            spec.objects.insert(object.to_string(), ObjectMove { old, new });
            let out = retarget_demo(demo, &spec)?;
            Ok((spec, out))
        })
        .collect()
}
