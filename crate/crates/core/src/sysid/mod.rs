//! System identification of a single PD-controlled joint: a reference
//! simulator, rollout sampling, a learned differentiable surrogate and
//! gradient-based recovery of friction, stiffness and damping.

mod identify;
mod io;
mod surrogate;

pub use identify::{identify_params, IdentifyConfig, Identification};
pub use io::{read_rollout, write_rollout};
pub use surrogate::{train_surrogate, SurrogateConfig, SurrogateModel};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{substream, StageRng};

#[derive(Debug, thiserror::Error)]
pub enum SysidError {
    #[error("non-finite state after simulation step")]
    NonFinite,
    #[error("time step must be positive, got {0}")]
    BadDt(f64),
    #[error("parameter box is empty or negative")]
    EmptyBox,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("rollout is inconsistent: {0}")]
    BadRollout(String),
    #[error("identification diverged at step {step}: loss rose {streak} times in a row (last {loss})")]
    Divergence { step: usize, streak: usize, loss: f64, curve: Vec<f64> },
    #[error("rollout file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

pub type Result<T> = std::result::Result<T, SysidError>;

/// Friction, stiffness and damping of the joint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysParams {
    pub f: f64,
    pub p: f64,
    pub d: f64,
}

impl PhysParams {
    pub const fn new(f: f64, p: f64, d: f64) -> Self {
        Self { f, p, d }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.f, self.p, self.d]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self { f: a[0], p: a[1], d: a[2] }
    }

    /// Per-parameter `|self - truth| / |truth|`.
    pub fn relative_error(&self, truth: &PhysParams) -> [f64; 3] {
        let (a, b) = (self.to_array(), truth.to_array());
        [0, 1, 2].map(|i| (a[i] - b[i]).abs() / b[i].abs())
    }
}

/// Axis-aligned search box over `(f, p, d)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lo: PhysParams,
    pub hi: PhysParams,
}

impl ParamBox {
    pub fn desk() -> Self {
        Self { lo: PhysParams::new(0.0, 1.0, 0.0), hi: PhysParams::new(1.0, 20.0, 2.0) }
    }

    pub fn check(&self) -> Result<()> {
        let (lo, hi) = (self.lo.to_array(), self.hi.to_array());
        if (0..3).any(|i| !(lo[i] >= 0.0 && lo[i] <= hi[i] && hi[i].is_finite())) {
            return Err(SysidError::EmptyBox);
        }
        Ok(())
    }

    pub fn contains(&self, x: &PhysParams) -> bool {
        let (lo, hi, v) = (self.lo.to_array(), self.hi.to_array(), x.to_array());
        (0..3).all(|i| (lo[i]..=hi[i]).contains(&v[i]))
    }

    pub fn project(&self, x: [f64; 3]) -> [f64; 3] {
        let (lo, hi) = (self.lo.to_array(), self.hi.to_array());
        [0, 1, 2].map(|i| x[i].clamp(lo[i], hi[i]))
    }

    pub fn center(&self) -> PhysParams {
        let (lo, hi) = (self.lo.to_array(), self.hi.to_array());
        PhysParams::from_array([0, 1, 2].map(|i| 0.5 * (lo[i] + hi[i])))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PhysParams {
        let (lo, hi) = (self.lo.to_array(), self.hi.to_array());
        PhysParams::from_array([0, 1, 2].map(|i| if lo[i] == hi[i] { lo[i] } else { rng.random_range(lo[i]..=hi[i]) }))
    }

    /// Widths, with degenerate axes reported as 1.
    pub fn widths(&self) -> [f64; 3] {
        let (lo, hi) = (self.lo.to_array(), self.hi.to_array());
        [0, 1, 2].map(|i| if hi[i] > lo[i] { hi[i] - lo[i] } else { 1.0 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub theta: f64,
    pub omega: f64,
}

impl JointState {
    pub const fn new(theta: f64, omega: f64) -> Self {
        Self { theta, omega }
    }
}

/// Joint torque under PD control toward `a` with Coulomb and viscous
/// friction; `sign(0) = 0`.
pub fn torque(params: &PhysParams, s: &JointState, a: f64) -> f64 {
    let sign = if s.omega > 0.0 {
        1.0
    } else if s.omega < 0.0 {
        -1.0
    } else {
        0.0
    };
    params.p * (a - s.theta) - params.d * s.omega - params.f * sign
}

/// Semi-implicit Euler step with unit inertia.
pub fn simulate_step(params: &PhysParams, s: &JointState, a: f64, dt: f64) -> Result<JointState> {
    if !(dt > 0.0) {
        return Err(SysidError::BadDt(dt));
    }
    let omega = s.omega + dt * torque(params, s, a);
    let theta = s.theta + dt * omega;
    if !(omega.is_finite() && theta.is_finite()) {
        return Err(SysidError::NonFinite);
    }
    Ok(JointState { theta, omega })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    /// `horizon + 1` states.
    pub states: Vec<JointState>,
    /// `horizon` target angles.
    pub actions: Vec<f64>,
    pub params: PhysParams,
    pub dt: f64,
}

impl Rollout {
    pub fn simulate(params: PhysParams, s0: JointState, actions: Vec<f64>, dt: f64) -> Result<Self> {
        let mut states = vec![s0];
        for &a in &actions {
            let next = simulate_step(&params, states.last().unwrap(), a, dt)?;
            states.push(next);
        }
        Ok(Self { states, actions, params, dt })
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.states.len() != self.actions.len() + 1 || !(self.dt > 0.0) {
            return Err(SysidError::BadRollout(format!(
                "{} states, {} actions, dt {}",
                self.states.len(),
                self.actions.len(),
                self.dt
            )));
        }
        Ok(())
    }
}

/// Target-angle sequence for a rollout of `horizon` steps.
pub trait ActionGenerator: Sync {
    fn generate(&self, rng: &mut StageRng, horizon: usize, dt: f64) -> Vec<f64>;
}

/// Sum of three random sinusoids (amplitude 0.2..0.8 rad, 0.5..3 rad/s).
#[derive(Clone, Copy, Debug, Default)]
pub struct SmoothTargets;

impl ActionGenerator for SmoothTargets {
    fn generate(&self, rng: &mut StageRng, horizon: usize, dt: f64) -> Vec<f64> {
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| (rng.random_range(0.2..0.8), rng.random_range(0.5..3.0), rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        (0..horizon)
            .map(|t| waves.iter().map(|(a, w, ph)| a * (w * t as f64 * dt + ph).sin()).sum())
            .collect()
    }
}

/// `n` rollouts with parameters drawn uniformly from `param_box`, initial
/// angle uniform in `[-0.5, 0.5]` at rest. Rollout `i` draws from its own
/// substream so the result is independent of thread count.
pub fn generate_rollouts(
    param_box: &ParamBox,
    n: usize,
    horizon: usize,
    dt: f64,
    actions: &dyn ActionGenerator,
    seed: u64,
) -> Result<Vec<Rollout>> {
    param_box.check()?;
    if horizon == 0 {
        return Err(SysidError::BadRollout("horizon must be at least 1".into()));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let rng = &mut substream(seed, &format!("sysid.rollout.{i}"));
            let params = param_box.sample(rng);
            let s0 = JointState::new(rng.random_range(-0.5..=0.5), 0.0);
            let a = actions.generate(rng, horizon, dt);
            Rollout::simulate(params, s0, a, dt)
        })
        .collect()
}
