use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::surrogate::Transitions;
use super::{PhysParams, Result, Rollout, SurrogateModel, SysidError};
use crate::autodiff::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifyConfig {
    pub steps: usize,
    /// Levenberg-Marquardt damping relative to the curvature diagonal.
    pub damping: f64,
    /// Consecutive loss increases tolerated before aborting.
    pub patience: usize,
    /// Stop once an update moves less than this in box-normalized units.
    pub tolerance: f64,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        Self { steps: 500, damping: 1e-2, patience: 10, tolerance: 1e-10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identification {
    pub params: PhysParams,
    /// `sum_t |M(s_{t-1}, a_{t-1}) - s_t|^2` at each visited iterate.
    pub loss_curve: Vec<f64>,
}

/// Residuals `acc_pred - acc_obs` and their Jacobian rows w.r.t. raw
/// `(f, p, d)`.
fn linearize(model: &SurrogateModel, t: &Transitions, target: &[f64], x: [f64; 3]) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
    let n = t.len();
    let mut g = Graph::new();
    let b = model.store.bind(&mut g, false);
    let p = g.param(Tensor::from_parts(vec![n, 3], x.repeat(n)));
    let acc = model.acc_for(&mut g, &b, t, p)?;
    let total = g.sum(acc)?;
    g.backward(total)?;
    let r = g.value(acc).data().iter().zip(target).map(|(a, y)| a - y).collect();
    let jac = g.grad(p).expect("param has grad").data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok((r, jac))
}

/// Recovers `(f, p, d)` from an observed rollout through the frozen
/// surrogate by projected, damped Gauss-Newton steps on the one-step
/// prediction loss, working in box-normalized coordinates.
pub fn identify_params(
    model: &SurrogateModel,
    real: &Rollout,
    init: PhysParams,
    config: &IdentifyConfig,
) -> Result<Identification> {
    let t = Transitions::from_rollouts(std::slice::from_ref(real))?;
    if config.steps == 0 {
        return Ok(Identification { params: init, loss_curve: vec![] });
    }
    let bx = &model.config.param_box;
    let widths = bx.widths();
    let target = t.target_acc();
    let state_weight = model.dt.powi(2) * (1.0 + model.dt.powi(2));
    let mut x = bx.project(init.to_array());
    let mut curve = Vec::new();
    let mut streak = 0;
    for step in 0..config.steps {
        let (r, jac) = linearize(model, &t, &target, x)?;
        let loss = state_weight * r.iter().map(|v| v * v).sum::<f64>();
        if let Some(&prev) = curve.last() {
            streak = if loss > prev * (1.0 + 1e-12) { streak + 1 } else { 0 };
        }
        curve.push(loss);
        if streak >= config.patience {
            return Err(SysidError::Divergence { step, streak, loss, curve });
        }
        let mut a = Matrix3::zeros();
        let mut grad = Vector3::zeros();
        for (ri, j) in r.iter().zip(&jac) {
            let ju = Vector3::new(j[0] * widths[0], j[1] * widths[1], j[2] * widths[2]);
            a += ju * ju.transpose();
            grad += ju * *ri;
        }
        for i in 0..3 {
            a[(i, i)] += config.damping * a[(i, i)] + 1e-12;
        }
        let delta = a.lu().solve(&(-grad)).ok_or(SysidError::NonFinite)?;
        let next = bx.project([0, 1, 2].map(|i| x[i] + widths[i] * delta[i]));
        let moved = (0..3).map(|i| (next[i] - x[i]).abs() / widths[i]).fold(0.0, f64::max);
        x = next;
        if moved < config.tolerance {
            break;
        }
    }
    let (r, _) = linearize(model, &t, &target, x)?;
    curve.push(state_weight * r.iter().map(|v| v * v).sum::<f64>());
    Ok(Identification { params: PhysParams::from_array(x), loss_curve: curve })
}
