//! Per-sequence quality scoring and routing into pre-training,
//! fine-tuning or rejection pools.
//!
//! Four proxy scores in `[0, 1]` are combined into a weighted composite:
//! geometric consistency (photometric error after depth-based warping
//! between consecutive frames), multi-view coherence (disagreement between
//! side-by-side views), text alignment (a pluggable scorer) and physical
//! plausibility (velocity and acceleration limit violations). A modality
//! that is absent yields the neutral score 0.5 and is flagged unassessed.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::{warp_frame, ActionSequence, CameraIntrinsics, DepthMap, GeometryError, Image, Pose};
use crate::latent::{view_split, LatentError, VideoTensor};

#[derive(Debug, thiserror::Error)]
pub enum GateError {
    #[error("inconsistent modalities: {0}")]
    InconsistentModalities(String),
    #[error("thresholds must satisfy 0 <= lo <= hi <= 1, got ({lo}, {hi})")]
    BadThresholds { lo: f64, hi: f64 },
    #[error("weights must be non-negative and sum to 1, got {0:?}")]
    BadWeights([f64; 4]),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Latent(#[from] LatentError),
}

pub type Result<T> = std::result::Result<T, GateError>;

pub const NEUTRAL: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Routing {
    Reject,
    Pretrain,
    Finetune,
}

impl fmt::Display for Routing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Routing::Reject => "reject",
            Routing::Pretrain => "pretrain",
            Routing::Finetune => "finetune",
        })
    }
}

/// Which pool receives the highest-scoring sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[default]
    HighToFinetune,
    HighToPretrain,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub assessed: bool,
}

impl Score {
    pub fn assessed(value: f64) -> Self {
        Self { value: value.clamp(0.0, 1.0), assessed: true }
    }

    pub fn neutral() -> Self {
        Self { value: NEUTRAL, assessed: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub geometric: Score,
    pub multiview: Score,
    pub alignment: Score,
    pub physical: Score,
}

impl Scores {
    pub fn values(&self) -> [f64; 4] {
        [self.geometric.value, self.multiview.value, self.alignment.value, self.physical.value]
    }

    pub fn from_values(v: [f64; 4]) -> Self {
        Self {
            geometric: Score::assessed(v[0]),
            multiview: Score::assessed(v[1]),
            alignment: Score::assessed(v[2]),
            physical: Score::assessed(v[3]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub scores: Scores,
    pub composite: f64,
    pub routing: Routing,
    pub scorer_versions: Vec<(String, String)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Geometric, multi-view, alignment, physical.
    pub weights: [f64; 4],
    pub tau_lo: f64,
    pub tau_hi: f64,
    pub direction: Direction,
    /// End-effector speed limit, m/s.
    pub max_velocity: f64,
    /// End-effector acceleration limit, m/s^2.
    pub max_acceleration: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            weights: [0.25; 4],
            tau_lo: 0.5,
            tau_hi: 0.8,
            direction: Direction::HighToFinetune,
            max_velocity: 1.0,
            max_acceleration: 10.0,
        }
    }
}

impl GateConfig {
    pub fn check(&self) -> Result<()> {
        check_thresholds(self.tau_lo, self.tau_hi)?;
        check_weights(&self.weights)
    }
}

fn check_thresholds(lo: f64, hi: f64) -> Result<()> {
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(GateError::BadThresholds { lo, hi });
    }
    Ok(())
}

fn check_weights(w: &[f64; 4]) -> Result<()> {
    if w.iter().any(|v| !(*v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(GateError::BadWeights(*w));
    }
    Ok(())
}

/// Correctly rounded sum (Shewchuk partials with a final half-even fix),
/// so the result does not depend on the order of `xs`.
fn exact_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in xs {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    let Some(mut hi) = partials.pop() else { return 0.0 };
    let mut lo = 0.0;
    while let Some(x) = partials.pop() {
        let y = hi;
        hi = x + y;
        lo = x - (hi - y);
        if lo != 0.0 {
            break;
        }
    }
    if lo != 0.0 && partials.last().is_some_and(|&p| (lo < 0.0) == (p < 0.0)) {
        let y = 2.0 * lo;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// `sum_i w_i s_i`, rounded once.
pub fn composite(scores: &[f64; 4], weights: &[f64; 4]) -> f64 {
    exact_sum(scores.iter().zip(weights).map(|(s, w)| s * w))
}

fn routing_for(c: f64, lo: f64, hi: f64, direction: Direction) -> Routing {
    match (c >= hi, c >= lo, direction) {
        (true, _, Direction::HighToFinetune) => Routing::Finetune,
        (true, _, Direction::HighToPretrain) => Routing::Pretrain,
        (false, true, Direction::HighToFinetune) => Routing::Pretrain,
        (false, true, Direction::HighToPretrain) => Routing::Finetune,
        (false, false, _) => Routing::Reject,
    }
}

/// Recomputes the composite with `weights` and routes it: `>= hi` to the
/// high pool, `[lo, hi)` to the middle pool, below `lo` to rejection.
pub fn route(report: &QualityReport, thresholds: (f64, f64), weights: &[f64; 4], direction: Direction) -> Result<Routing> {
    check_thresholds(thresholds.0, thresholds.1)?;
    check_weights(weights)?;
    let c = composite(&report.scores.values(), weights);
    Ok(routing_for(c, thresholds.0, thresholds.1, direction))
}

/// Text-to-task agreement in `[0, 1]`.
pub trait AlignmentScorer: Sync {
    fn name(&self) -> &str;
    fn version(&self) -> &str;
    fn score(&self, text: &str, metadata: &str) -> f64;
}

/// Jaccard overlap of lower-cased alphanumeric tokens.
#[derive(Clone, Copy, Debug, Default)]
pub struct TokenOverlap;

fn tokens(s: &str) -> std::collections::BTreeSet<String> {
    s.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

impl AlignmentScorer for TokenOverlap {
    fn name(&self) -> &str {
        "alignment.token_overlap"
    }

    fn version(&self) -> &str {
        "1"
    }

    fn score(&self, text: &str, metadata: &str) -> f64 {
        let (a, b) = (tokens(text), tokens(metadata));
        let union = a.union(&b).count();
        if union == 0 {
            return 0.0;
        }
        a.intersection(&b).count() as f64 / union as f64
    }
}

/// Per-frame depth with the camera motion between consecutive frames.
#[derive(Clone, Debug)]
pub struct DepthTrack {
    pub depth: Vec<DepthMap>,
    /// `motion[t]` maps camera-`t` points to camera-`t+1` points.
    pub motion: Vec<Pose>,
    pub camera: CameraIntrinsics,
}

#[derive(Clone, Debug, Default)]
pub struct SequenceInput {
    pub frames: Option<VideoTensor>,
    pub depth: Option<DepthTrack>,
    /// Widths of side-by-side views packed into each frame.
    pub views: Option<Vec<usize>>,
    pub text: Option<String>,
    pub task_metadata: Option<String>,
    pub trajectory: Option<ActionSequence>,
}

fn frame_image(v: &VideoTensor, t: usize) -> Image {
    Image { width: v.width, height: v.height, channels: v.channels, data: v.frame(t).to_vec() }
}

/// `1 -` mean absolute photometric error of frame `t` warped into frame
/// `t + 1`, over covered pixels of all consecutive pairs.
pub fn geometric_score(frames: &VideoTensor, track: &DepthTrack) -> Result<Score> {
    if track.depth.len() != frames.frames || track.motion.len() + 1 != frames.frames {
        return Err(GateError::InconsistentModalities(format!(
            "{} frames, {} depth maps, {} motions",
            frames.frames,
            track.depth.len(),
            track.motion.len()
        )));
    }
    if frames.width != track.camera.width || frames.height != track.camera.height {
        return Err(GateError::InconsistentModalities("frame and camera resolution differ".into()));
    }
    let (mut err, mut n) = (0.0, 0usize);
    for t in 0..frames.frames.saturating_sub(1) {
        let w = warp_frame(&frame_image(frames, t), &track.depth[t], &track.motion[t], &track.camera)?;
        let next = frames.frame(t + 1);
        let c = frames.channels;
        for (i, &ok) in w.mask.iter().enumerate() {
            if ok {
                for ch in 0..c {
                    err += (w.frame.data[i * c + ch] - next[i * c + ch]).abs();
                }
                n += c;
            }
        }
    }
    Ok(if n == 0 { Score::neutral() } else { Score::assessed(1.0 - err / n as f64) })
}

/// `1 -` mean absolute difference between each view and the first, over
/// their common width.
pub fn multiview_score(frames: &VideoTensor, widths: &[usize]) -> Result<Score> {
    let views = view_split(frames, widths).map_err(|e| GateError::InconsistentModalities(e.to_string()))?;
    if views.len() < 2 {
        return Ok(Score::neutral());
    }
    let base = &views[0];
    let (mut err, mut n) = (0.0, 0usize);
    for v in &views[1..] {
        let w = base.width.min(v.width);
        for t in 0..frames.frames {
            for y in 0..frames.height {
                for x in 0..w {
                    for c in 0..frames.channels {
                        err += (base.at(t, y, x, c) - v.at(t, y, x, c)).abs();
                        n += 1;
                    }
                }
            }
        }
    }
    Ok(Score::assessed(1.0 - err / n.max(1) as f64))
}

/// `1 - max(v_viol / (T - 1), a_viol / (T - 2))` from finite-difference
/// end-effector speeds and accelerations.
pub fn physical_score(traj: &ActionSequence, max_velocity: f64, max_acceleration: f64) -> Score {
    let (p, ts) = (traj.poses(), traj.timestamps());
    if p.len() < 2 {
        return Score::neutral();
    }
    let vel: Vec<(nalgebra::Vector3<f64>, f64)> = p
        .windows(2)
        .zip(ts.windows(2))
        .map(|(w, t)| {
            let dt = t[1] - t[0];
            ((w[1].translation() - w[0].translation()) / dt, 0.5 * (t[0] + t[1]))
        })
        .collect();
    let v_viol = vel.iter().filter(|(v, _)| !(v.norm() <= max_velocity)).count();
    let a_viol = vel
        .windows(2)
        .filter(|w| !(((w[1].0 - w[0].0) / (w[1].1 - w[0].1)).norm() <= max_acceleration))
        .count();
    let v_frac = v_viol as f64 / vel.len() as f64;
    let a_frac = if vel.len() > 1 { a_viol as f64 / (vel.len() - 1) as f64 } else { 0.0 };
    Score::assessed(1.0 - v_frac.max(a_frac))
}

/// Scores every available modality and routes the sequence under `config`.
pub fn score_sequence(input: &SequenceInput, config: &GateConfig, alignment: &dyn AlignmentScorer) -> Result<QualityReport> {
    config.check()?;
    let frames = input
        .frames
        .as_ref()
        .ok_or_else(|| GateError::InconsistentModalities("frames are required".into()))?;
    let geometric = match &input.depth {
        Some(track) => geometric_score(frames, track)?,
        None => Score::neutral(),
    };
    let multiview = match &input.views {
        Some(w) => multiview_score(frames, w)?,
        None => Score::neutral(),
    };
    let alignment_score = match (&input.text, &input.task_metadata) {
        (Some(t), Some(m)) => Score::assessed(alignment.score(t, m)),
        _ => Score::neutral(),
    };
    let physical = match &input.trajectory {
        Some(t) => physical_score(t, config.max_velocity, config.max_acceleration),
        None => Score::neutral(),
    };
    let scores = Scores { geometric, multiview, alignment: alignment_score, physical };
    let composite = composite(&scores.values(), &config.weights);
    Ok(QualityReport {
        scores,
        composite,
        routing: routing_for(composite, config.tau_lo, config.tau_hi, config.direction),
        scorer_versions: vec![
            ("geometric.warp_photometric".into(), "1".into()),
            ("multiview.view_difference".into(), "1".into()),
            (alignment.name().into(), alignment.version().into()),
            ("physical.limit_violations".into(), "1".into()),
        ],
    })
}

/// Header plus one row per `(id, report)`.
pub fn summary_csv(rows: &[(String, QualityReport)]) -> String {
    let mut out = String::from("id,geometric,multiview,alignment,physical,composite,routing\n");
    for (id, r) in rows {
        let v = r.scores.values();
        out.push_str(&format!("{id},{},{},{},{},{},{}\n", v[0], v[1], v[2], v[3], r.composite, r.routing));
    }
    out
}
