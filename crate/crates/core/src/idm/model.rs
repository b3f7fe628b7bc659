use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{IdmError, JointTrajectory, RenderedSample, Result};
use crate::autodiff::{Graph, Tensor, Var};
use crate::latent::VideoTensor;
use crate::nn::{cosine_lr, read_checkpoint, write_checkpoint, Adam, AdamConfig, Bound, Init, Linear, ParamStore};
use crate::rng::substream;

const LN_EPS: f64 = 1e-5;

/// Patch encoder, one temporal attention block and a linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdmConfig {
    pub patch: usize,
    pub patch_dim: usize,
    pub hidden: usize,
    pub dim: usize,
    pub batch: usize,
    pub lr: f64,
    /// Zero pixels outside the arm mask before encoding.
    pub use_mask: bool,
    pub seed: u64,
}

impl Default for IdmConfig {
    fn default() -> Self {
        Self { patch: 4, patch_dim: 8, hidden: 64, dim: 64, batch: 8, lr: 3e-3, use_mask: true, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Shape {
    height: usize,
    width: usize,
    channels: usize,
    dofs: usize,
    grip_dofs: usize,
}

#[derive(Clone, Debug)]
pub struct IdmModel {
    pub config: IdmConfig,
    shape: Shape,
    pub store: ParamStore,
    embed: Linear,
    f1: Linear,
    f2: Linear,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    m1: Linear,
    m2: Linear,
    head: Linear,
}

/// Per-epoch training curves; `val_mae[e][j]` is the validation MAE of
/// joint `j` after epoch `e`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IdmMetrics {
    pub train_loss: Vec<f64>,
    pub val_mae: Vec<Vec<f64>>,
}

impl IdmModel {
    pub fn new(config: IdmConfig, height: usize, width: usize, channels: usize, dofs: usize, grip_dofs: usize) -> Result<Self> {
        let p = config.patch;
        if p == 0 || height % p != 0 || width % p != 0 || channels == 0 || dofs == 0 || grip_dofs > dofs {
            return Err(IdmError::ShapeMismatch(format!("{height}x{width}x{channels} frames, patch {p}, {dofs} DOFs")));
        }
        if config.patch_dim == 0 || config.hidden == 0 || config.dim == 0 || config.batch == 0 {
            return Err(IdmError::ShapeMismatch("zero-sized layer".into()));
        }
        let rng = &mut substream(config.seed, "idm.init");
        let mut s = ParamStore::new();
        let patches = (height / p) * (width / p);
        let (d, h) = (config.dim, config.hidden);
        let embed = Linear::new(&mut s, "embed", p * p * channels, config.patch_dim, true, Init::Uniform, rng);
        let f1 = Linear::new(&mut s, "frame1", patches * config.patch_dim, h, true, Init::Uniform, rng);
        let f2 = Linear::new(&mut s, "frame2", h, d, true, Init::Uniform, rng);
        let q = Linear::new(&mut s, "attn.q", d, d, false, Init::Uniform, rng);
        let k = Linear::new(&mut s, "attn.k", d, d, false, Init::Uniform, rng);
        let v = Linear::new(&mut s, "attn.v", d, d, false, Init::Uniform, rng);
        let o = Linear::new(&mut s, "attn.o", d, d, true, Init::Uniform, rng);
        let m1 = Linear::new(&mut s, "mlp1", d, 2 * d, true, Init::Uniform, rng);
        let m2 = Linear::new(&mut s, "mlp2", 2 * d, d, true, Init::Uniform, rng);
        let head = Linear::new(&mut s, "head", d, dofs, true, Init::Zeros, rng);
        let shape = Shape { height, width, channels, dofs, grip_dofs };
        Ok(Self { config, shape, store: s, embed, f1, f2, q, k, v, o, m1, m2, head })
    }

    pub fn dofs(&self) -> usize {
        self.shape.dofs
    }

    /// Patch rows `[T * P, p * p * C]` of the (optionally masked) clip.
    fn patches(&self, frames: &VideoTensor, masks: &[bool], out: &mut Vec<f64>) -> Result<usize> {
        let Shape { height: h, width: w, channels: c, .. } = self.shape;
        if frames.height != h || frames.width != w || frames.channels != c || masks.len() != frames.frames * h * w {
            return Err(IdmError::ShapeMismatch(format!(
                "clip {:?} with {} mask entries, model expects {h}x{w}x{c}",
                frames.dims(),
                masks.len()
            )));
        }
        let p = self.config.patch;
        for t in 0..frames.frames {
            let f = frames.frame(t);
            let m = &masks[t * h * w..(t + 1) * h * w];
            for py in (0..h).step_by(p) {
                for px in (0..w).step_by(p) {
                    for y in py..py + p {
                        for x in px..px + p {
                            let keep = !self.config.use_mask || m[y * w + x];
                            for ch in 0..c {
                                out.push(if keep { f[(y * w + x) * c + ch] } else { 0.0 });
                            }
                        }
                    }
                }
            }
        }
        Ok(frames.frames)
    }

    /// Raw predictions `[sum T, D]` for a batch of clips.
    fn forward(&self, g: &mut Graph, b: &Bound, clips: &[(&VideoTensor, &[bool])]) -> Result<(Var, Vec<usize>)> {
        let mut data = Vec::new();
        let mut lens = Vec::new();
        for (f, m) in clips {
            lens.push(self.patches(f, m, &mut data)?);
        }
        let rows: usize = lens.iter().sum();
        let p = self.config.patch;
        let patches = (self.shape.height / p) * (self.shape.width / p);
        let width = p * p * self.shape.channels;
        let x = g.constant(Tensor::new(vec![rows * patches, width], data)?);
        let e = self.embed.forward(g, b, x)?;
        let e = g.silu(e)?;
        let e = g.reshape(e, &[rows, patches * self.config.patch_dim])?;
        let h = self.f1.forward(g, b, e)?;
        let h = g.silu(h)?;
        let h = self.f2.forward(g, b, h)?;

        let a = g.layer_norm(h, LN_EPS)?;
        let q = self.q.forward(g, b, a)?;
        let k = self.k.forward(g, b, a)?;
        let v = self.v.forward(g, b, a)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, 1.0 / (self.config.dim as f64).sqrt())?;
        let mut mask = vec![false; rows * rows];
        let mut start = 0;
        for &len in &lens {
            for i in start..start + len {
                mask[i * rows + start..i * rows + start + len].fill(true);
            }
            start += len;
        }
        let s = g.softmax_masked(s, &mask)?;
        let att = g.matmul(s, v)?;
        let att = self.o.forward(g, b, att)?;
        let h = g.add(h, att)?;

        let m = g.layer_norm(h, LN_EPS)?;
        let m = self.m1.forward(g, b, m)?;
        let m = g.silu(m)?;
        let m = self.m2.forward(g, b, m)?;
        let h = g.add(h, m)?;
        let h = g.layer_norm(h, LN_EPS)?;
        Ok((self.head.forward(g, b, h)?, lens))
    }

    fn targets(&self, samples: &[&RenderedSample]) -> Result<Tensor> {
        let mut data = Vec::new();
        for s in samples {
            if s.trajectory.dofs != self.shape.dofs {
                return Err(IdmError::ShapeMismatch(format!("trajectory has {} DOFs", s.trajectory.dofs)));
            }
            data.extend_from_slice(s.trajectory.data());
        }
        Ok(Tensor::new(vec![data.len() / self.shape.dofs, self.shape.dofs], data)?)
    }

    /// Mean squared error over all joints of a batch and its gradients.
    pub fn loss_and_grads(&self, samples: &[&RenderedSample]) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, true);
        let clips: Vec<_> = samples.iter().map(|s| (&s.frames, s.masks.as_slice())).collect();
        let (y, _) = self.forward(&mut g, &b, &clips)?;
        let target = g.constant(self.targets(samples)?);
        let loss = g.mse(y, target)?;
        g.backward(loss)?;
        let value = g.value(loss).data()[0];
        Ok((value, self.store.grads(&g, &b)))
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut header = BTreeMap::new();
        header.insert("config".to_string(), serde_json::to_string(&self.config).expect("serializable"));
        header.insert("shape".to_string(), serde_json::to_string(&self.shape).expect("serializable"));
        write_checkpoint(w, &header, &self.store)?;
        Ok(())
    }

    pub fn load<R: BufRead>(r: &mut R) -> Result<Self> {
        let (header, store) = read_checkpoint(r)?;
        let field = |k: &str| header.get(k).ok_or_else(|| IdmError::Io(format!("checkpoint missing {k}")));
        let config: IdmConfig = serde_json::from_str(field("config")?).map_err(|e| IdmError::Io(e.to_string()))?;
        let s: Shape = serde_json::from_str(field("shape")?).map_err(|e| IdmError::Io(e.to_string()))?;
        let mut model = Self::new(config, s.height, s.width, s.channels, s.dofs, s.grip_dofs)?;
        if model.store.names() != store.names()
            || model.store.tensors().iter().zip(store.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(IdmError::Io("tensor table does not match config".into()));
        }
        model.store = store;
        Ok(model)
    }
}

/// Predicts the `T x D` joint trajectory of a clip; gripper outputs are
/// clamped to `[0, 1]`.
pub fn idm_infer(model: &IdmModel, frames: &VideoTensor, masks: &[bool]) -> Result<JointTrajectory> {
    let mut g = Graph::new();
    let b = model.store.bind(&mut g, false);
    let (y, _) = model.forward(&mut g, &b, &[(frames, masks)])?;
    let d = model.shape.dofs;
    let arm = d - model.shape.grip_dofs;
    let mut data = g.value(y).data().to_vec();
    for row in data.chunks_mut(d) {
        row[arm..].iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    JointTrajectory::new(frames.frames, d, data)
}

fn validation_mae(model: &IdmModel, val: &[RenderedSample]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; model.shape.dofs];
    for s in val {
        let pred = idm_infer(model, &s.frames, &s.masks)?;
        for (a, e) in acc.iter_mut().zip(pred.mae_per_joint(&s.trajectory)) {
            *a += e / val.len() as f64;
        }
    }
    Ok(acc)
}

/// Trains a fresh model for `epochs` shuffled passes over `train` with Adam
/// under cosine decay. Validation MAE per joint is recorded after every
/// epoch when `val` is nonempty.
pub fn idm_train(
    train: &[RenderedSample],
    val: &[RenderedSample],
    grip_dofs: usize,
    config: IdmConfig,
    epochs: usize,
) -> Result<(IdmModel, IdmMetrics)> {
    let first = train.first().ok_or(IdmError::EmptyDataset)?;
    let f = &first.frames;
    let mut model = IdmModel::new(config.clone(), f.height, f.width, f.channels, first.trajectory.dofs, grip_dofs)?;
    let mut metrics = IdmMetrics::default();
    let batches = train.len().div_ceil(config.batch);
    let total = epochs * batches;
    let mut opt = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, &model.store);
    let rng = &mut substream(config.seed, "idm.shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch) {
            let batch: Vec<&RenderedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = model.loss_and_grads(&batch)?;
            if !loss.is_finite() || grads.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                return Err(IdmError::NonFinite(format!("training step {step}")));
            }
            opt.step_with_lr(&mut model.store, &grads, cosine_lr(config.lr, 0.02, step, total));
            epoch_loss += loss / batches as f64;
            step += 1;
        }
        metrics.train_loss.push(epoch_loss);
        if !val.is_empty() {
            metrics.val_mae.push(validation_mae(&model, val)?);
        }
    }
    Ok((model, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::idm::{clutter_background, desk_camera, random_trajectory, render_arm, ArmModel};

    fn sample(seed: u64) -> RenderedSample {
        let arm = ArmModel::desk();
        let k = desk_camera();
        let rng = &mut substream(seed, "sample");
        let traj = random_trajectory(rng, &arm, 4);
        let bg = clutter_background(rng, 4, &k, 1);
        render_arm(&arm, &traj, &k, &bg).unwrap()
    }

    fn model() -> IdmModel {
        IdmModel::new(IdmConfig::default(), 32, 32, 1, 3, 1).unwrap()
    }

    #[test]
    fn untrained_head_outputs_zeros() {
        let s = sample(1);
        let out = idm_infer(&model(), &s.frames, &s.masks).unwrap();
        assert_eq!((out.steps, out.dofs), (4, 3));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inference_deterministic() {
        let mut m = model();
        let rng = &mut substream(2, "head");
        for t in m.store.tensors_mut() {
            *t = Tensor::uniform(rng, t.shape(), -0.3, 0.3);
        }
        let s = sample(3);
        let a = idm_infer(&m, &s.frames, &s.masks).unwrap();
        let b = idm_infer(&m, &s.frames, &s.masks).unwrap();
        assert_eq!(a, b);
        let (lo, hi) = a.data().chunks(3).fold((1.0f64, 0.0f64), |(lo, hi), r| (lo.min(r[2]), hi.max(r[2])));
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn pixels_outside_mask_ignored() {
        let mut m = model();
        let rng = &mut substream(4, "w");
        for t in m.store.tensors_mut() {
            *t = Tensor::uniform(rng, t.shape(), -0.3, 0.3);
        }
        let s = sample(5);
        let mut other = s.frames.clone();
        for (v, &keep) in other.data_mut().iter_mut().zip(&s.masks) {
            if !keep {
                *v = 1.0 - *v * 0.5;
            }
        }
        let a = idm_infer(&m, &s.frames, &s.masks).unwrap();
        let b = idm_infer(&m, &other, &s.masks).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let data = vec![sample(6)];
        let (m, metrics) = idm_train(&data, &data, 1, IdmConfig::default(), 0).unwrap();
        assert_eq!(metrics, IdmMetrics::default());
        let fresh = model();
        assert_eq!(m.store.tensors(), fresh.store.tensors());
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(idm_train(&[], &[], 1, IdmConfig::default(), 1), Err(IdmError::EmptyDataset)));
    }

    #[test]
    fn wrong_resolution_rejected() {
        let v = VideoTensor::zeros(2, 16, 16, 1);
        assert!(matches!(idm_infer(&model(), &v, &[false; 512]), Err(IdmError::ShapeMismatch(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut m = model();
        m.store.tensors_mut()[0].data_mut()[0] = 0.25;
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        let back = IdmModel::load(&mut buf.as_slice()).unwrap();
        assert_eq!(back.store.tensors(), m.store.tensors());
        assert_eq!(back.config, m.config);
    }
}
