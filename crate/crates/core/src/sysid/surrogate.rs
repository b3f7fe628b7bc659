use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ParamBox, PhysParams, Result, Rollout, SysidError};
use crate::autodiff::{Graph, Tensor, Var};
use crate::nn::{cosine_lr, Adam, AdamConfig, Bound, Init, Linear, ParamId, ParamStore};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub param_box: ParamBox,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Width of the `tanh` used as a smooth velocity sign.
    pub sign_width: f64,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            param_box: ParamBox::desk(),
            hidden: 16,
            epochs: 20,
            batch: 256,
            lr: 1e-2,
            sign_width: 1e-3,
            seed: 0,
        }
    }
}

/// Learned one-step dynamics `M(s, a, f, p, d)`.
///
/// Acceleration is a bilinear form `phi(s, a)^T W psi(f, p, d)` over state
/// features `[a - theta, omega, tanh(omega / w), 1]` and box-normalized
/// parameters `[1, f, p, d]`, plus a small MLP residual; the next state
/// follows by a semi-implicit Euler step.
#[derive(Clone, Debug)]
pub struct SurrogateModel {
    pub config: SurrogateConfig,
    pub dt: f64,
    pub acc_scale: f64,
    pub store: ParamStore,
    w: ParamId,
    r1: Linear,
    r2: Linear,
}

/// Flattened transitions of a rollout set.
pub(crate) struct Transitions {
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    pub action: Vec<f64>,
    pub params: Vec<f64>,
    pub next_theta: Vec<f64>,
    pub next_omega: Vec<f64>,
    pub dt: f64,
}

impl Transitions {
    pub fn from_rollouts(rollouts: &[Rollout]) -> Result<Self> {
        let mut t = Transitions {
            theta: vec![],
            omega: vec![],
            action: vec![],
            params: vec![],
            next_theta: vec![],
            next_omega: vec![],
            dt: rollouts.first().map_or(0.0, |r| r.dt),
        };
        for r in rollouts {
            r.check()?;
            if r.dt != t.dt {
                return Err(SysidError::BadRollout("rollouts mix time steps".into()));
            }
            for (k, &a) in r.actions.iter().enumerate() {
                t.theta.push(r.states[k].theta);
                t.omega.push(r.states[k].omega);
                t.action.push(a);
                t.params.extend(r.params.to_array());
                t.next_theta.push(r.states[k + 1].theta);
                t.next_omega.push(r.states[k + 1].omega);
            }
        }
        if t.theta.is_empty() {
            return Err(SysidError::EmptyDataset);
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    /// Acceleration implied by each observed transition.
    pub fn target_acc(&self) -> Vec<f64> {
        self.next_omega.iter().zip(&self.omega).map(|(n, o)| (n - o) / self.dt).collect()
    }

    fn subset(&self, idx: &[usize]) -> Transitions {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect();
        Transitions {
            theta: pick(&self.theta),
            omega: pick(&self.omega),
            action: pick(&self.action),
            params: idx.iter().flat_map(|&i| self.params[3 * i..3 * i + 3].to_vec()).collect(),
            next_theta: pick(&self.next_theta),
            next_omega: pick(&self.next_omega),
            dt: self.dt,
        }
    }
}

fn column(g: &mut Graph, v: &[f64]) -> Var {
    g.constant(Tensor::from_parts(vec![v.len(), 1], v.to_vec()))
}

impl SurrogateModel {
    pub fn new(config: SurrogateConfig, dt: f64, acc_scale: f64) -> Result<Self> {
        config.param_box.check()?;
        if !(dt > 0.0) {
            return Err(SysidError::BadDt(dt));
        }
        let rng = &mut substream(config.seed, "sysid.surrogate.init");
        let mut store = ParamStore::new();
        let w = store.add("bilinear", Tensor::uniform(rng, &[4, 4], -0.1, 0.1));
        let r1 = Linear::new(&mut store, "residual1", 6, config.hidden, true, Init::Uniform, rng);
        let r2 = Linear::new(&mut store, "residual2", config.hidden, 1, true, Init::Zeros, rng);
        Ok(Self { config, dt, acc_scale, store, w, r1, r2 })
    }

    /// Normalized acceleration `[N, 1]`; `params` is `[N, 3]` or `[1, 3]`
    /// raw `(f, p, d)`.
    pub fn acc_normalized(
        &self,
        g: &mut Graph,
        b: &Bound,
        theta: Var,
        omega: Var,
        action: Var,
        params: Var,
    ) -> Result<Var> {
        let n = g.shape(theta)[0];
        let params = if g.shape(params)[0] == 1 && n > 1 { g.gather_rows(params, &vec![0; n])? } else { params };
        let bx = &self.config.param_box;
        let lo = g.constant(Tensor::from_parts(vec![1, 3], bx.lo.to_array().map(|v| -v).to_vec()));
        let inv = g.constant(Tensor::from_parts(vec![1, 3], bx.widths().map(|v| 1.0 / v).to_vec()));
        let psi = g.add(params, lo)?;
        let psi = g.mul(psi, inv)?;
        let ones = g.constant(Tensor::ones(&[n, 1]));
        let err = g.sub(action, theta)?;
        let sv = g.scale(omega, 1.0 / self.config.sign_width)?;
        let sign = g.tanh(sv)?;
        let phi = g.concat(&[err, omega, sign, ones], 1)?;
        let psi1 = g.concat(&[ones, psi], 1)?;
        let pw = g.matmul(phi, b[self.w])?;
        let bil = g.mul(pw, psi1)?;
        let bil = g.sum_axis(bil, 1)?;
        let feats = g.concat(&[err, omega, sign, psi], 1)?;
        let h = self.r1.forward(g, b, feats)?;
        let h = g.silu(h)?;
        let res = self.r2.forward(g, b, h)?;
        Ok(g.add(bil, res)?)
    }

    /// Acceleration `[N, 1]` in rad/s^2 for constant state and action
    /// columns and a parameter variable.
    pub(crate) fn acc_for(&self, g: &mut Graph, b: &Bound, t: &Transitions, params: Var) -> Result<Var> {
        let (th, om, a) = (column(g, &t.theta), column(g, &t.omega), column(g, &t.action));
        let acc = self.acc_normalized(g, b, th, om, a, params)?;
        Ok(g.scale(acc, self.acc_scale)?)
    }

    /// Predicted next states `(theta, omega)` for each transition.
    pub fn predict(&self, rollouts: &[Rollout]) -> Result<Vec<(f64, f64)>> {
        let t = Transitions::from_rollouts(rollouts)?;
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, false);
        let p = g.constant(Tensor::from_parts(vec![t.len(), 3], t.params.clone()));
        let acc = self.acc_for(&mut g, &b, &t, p)?;
        Ok(g.value(acc)
            .data()
            .iter()
            .enumerate()
            .map(|(i, acc)| {
                let omega = t.omega[i] + t.dt * acc;
                (t.theta[i] + t.dt * omega, omega)
            })
            .collect())
    }

    /// One-step mean squared error of `(theta, omega)` over all transitions.
    pub fn one_step_mse(&self, rollouts: &[Rollout]) -> Result<[f64; 2]> {
        let t = Transitions::from_rollouts(rollouts)?;
        let pred = self.predict(rollouts)?;
        let n = pred.len() as f64;
        let mut out = [0.0; 2];
        for (i, (th, om)) in pred.iter().enumerate() {
            out[0] += (th - t.next_theta[i]).powi(2) / n;
            out[1] += (om - t.next_omega[i]).powi(2) / n;
        }
        Ok(out)
    }

    /// Normalized acceleration MSE at `params` for a batch, with gradients
    /// of the surrogate weights.
    fn loss_and_grads(&self, t: &Transitions) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, true);
        let (th, om, a) = (column(&mut g, &t.theta), column(&mut g, &t.omega), column(&mut g, &t.action));
        let p = g.constant(Tensor::from_parts(vec![t.len(), 3], t.params.clone()));
        let acc = self.acc_normalized(&mut g, &b, th, om, a, p)?;
        let target: Vec<f64> = t.target_acc().iter().map(|v| v / self.acc_scale).collect();
        let target = column(&mut g, &target);
        let loss = g.mse(acc, target)?;
        g.backward(loss)?;
        Ok((g.value(loss).data()[0], self.store.grads(&g, &b)))
    }

    /// Evaluates `(f, p, d)` on one transition; used for gradient checks.
    pub fn next_state_graph(&self, g: &mut Graph, s: (f64, f64), a: f64, params: Var) -> Result<Var> {
        let b = self.store.bind(g, false);
        let t = Transitions {
            theta: vec![s.0],
            omega: vec![s.1],
            action: vec![a],
            params: vec![],
            next_theta: vec![],
            next_omega: vec![],
            dt: self.dt,
        };
        let acc = self.acc_for(g, &b, &t, params)?;
        let om = g.constant(Tensor::from_parts(vec![1, 1], vec![s.1]));
        let th = g.constant(Tensor::from_parts(vec![1, 1], vec![s.0]));
        let dv = g.scale(acc, self.dt)?;
        let omega = g.add(om, dv)?;
        let dth = g.scale(omega, self.dt)?;
        let theta = g.add(th, dth)?;
        Ok(g.concat(&[theta, omega], 1)?)
    }

    /// `phi (x) [1, psi]` per transition, matching the layout of `W`.
    fn bilinear_features(&self, t: &Transitions) -> (Vec<[f64; 16]>, Vec<[f64; 6]>) {
        let bx = &self.config.param_box;
        let (lo, w) = (bx.lo.to_array(), bx.widths());
        (0..t.len())
            .map(|i| {
                let psi: [f64; 3] = [0, 1, 2].map(|k| (t.params[3 * i + k] - lo[k]) / w[k]);
                let sign = (t.omega[i] / self.config.sign_width).tanh();
                let phi = [t.action[i] - t.theta[i], t.omega[i], sign, 1.0];
                let psi1 = [1.0, psi[0], psi[1], psi[2]];
                let mut f = [0.0; 16];
                for a in 0..4 {
                    for b in 0..4 {
                        f[a * 4 + b] = phi[a] * psi1[b];
                    }
                }
                (f, [phi[0], phi[1], phi[2], psi[0], psi[1], psi[2]])
            })
            .unzip()
    }

    /// Least-squares solve for `W` with the residual network held fixed.
    fn refit_bilinear(&mut self, t: &Transitions) {
        let (feats, inputs) = self.bilinear_features(t);
        let flat: Vec<f64> = inputs.iter().flatten().copied().collect();
        let h = self.r1.apply(&self.store, &flat, inputs.len());
        let h: Vec<f64> = h.iter().map(|&v| v * crate::autodiff::sigmoid(v)).collect();
        let res = self.r2.apply(&self.store, &h, inputs.len());
        let mut ata = DMatrix::<f64>::zeros(16, 16);
        let mut atb = DVector::<f64>::zeros(16);
        for ((f, y), r) in feats.iter().zip(t.target_acc()).zip(res) {
            let f = DVector::from_row_slice(f);
            ata += &f * f.transpose();
            atb += &f * (y / self.acc_scale - r);
        }
        let scale = ata.diagonal().max().max(1e-300);
        for i in 0..16 {
            ata[(i, i)] += 1e-12 * scale;
        }
        if let Some(sol) = ata.cholesky().map(|c| c.solve(&atb)) {
            if sol.iter().all(|v| v.is_finite()) {
                self.store.get_mut(self.w).data_mut().copy_from_slice(sol.as_slice());
            }
        }
    }

    pub fn params_in_box(&self, x: &PhysParams) -> bool {
        self.config.param_box.contains(x)
    }
}

/// Fits a surrogate to simulated rollouts, returning it with the per-epoch
/// training loss. The bilinear weights start from their least-squares
/// solution, all weights are then trained jointly with Adam under cosine
/// decay, and the bilinear weights are re-solved against the final residual.
pub fn train_surrogate(rollouts: &[Rollout], config: SurrogateConfig) -> Result<(SurrogateModel, Vec<f64>)> {
    let data = Transitions::from_rollouts(rollouts)?;
    let acc = data.target_acc();
    let rms = (acc.iter().map(|v| v * v).sum::<f64>() / acc.len() as f64).sqrt();
    let mut model = SurrogateModel::new(config.clone(), data.dt, rms.max(1e-9))?;
    let batch = config.batch.max(1);
    let per_epoch = data.len().div_ceil(batch);
    let total = config.epochs * per_epoch;
    let mut opt = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, &model.store);
    let rng = &mut substream(config.seed, "sysid.surrogate.shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok((model, curve));
    }
    model.refit_bilinear(&data);
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        for idx in order.chunks(batch) {
            let (loss, grads) = model.loss_and_grads(&data.subset(idx))?;
            opt.step_with_lr(&mut model.store, &grads, cosine_lr(config.lr, 0.01, step, total));
            sum += loss / per_epoch as f64;
            step += 1;
        }
        curve.push(sum);
    }
    model.refit_bilinear(&data);
    Ok((model, curve))
}
