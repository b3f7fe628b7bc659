//! One optimisation step of the flow-matching objective.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{ConditioningBundle, DiT, DreamerError, Result, TrainSample};
use crate::autodiff::{Graph, Tensor};
use crate::latent::{codec_encode, LatentTensor, VideoTensor};
use crate::nn::{reduce_grads, Adam};
use crate::rng::StageRng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub flow_loss: f64,
    pub load_loss: f64,
    pub total: f64,
}

/// Draws noise and flow times for every clip, evaluates all items
/// concurrently, averages gradients in batch order and applies one update.
pub fn train_step(
    model: &mut DiT,
    batch: &[(VideoTensor, ConditioningBundle)],
    opt: &mut Adam,
    rng: &mut StageRng,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(DreamerError::EmptyBatch);
    }
    let ratios = model.config().ratios;
    let mut samples = Vec::with_capacity(batch.len());
    for (video, bundle) in batch {
        let z1 = codec_encode(video, ratios)?;
        let z0 = LatentTensor::from_fn(z1.frames, z1.height, z1.width, z1.channels, |_, _, _, _| {
            rng.sample(StandardNormal)
        });
        let t = rng.random_range(0.0..=1.0);
        samples.push(TrainSample { z0, z1, t, bundle: bundle.clone() });
    }
    train_on_samples(model, &samples, opt)
}

/// Same as [`train_step`] with noise and times already drawn.
pub fn train_on_samples(model: &mut DiT, samples: &[TrainSample], opt: &mut Adam) -> Result<StepMetrics> {
    if samples.is_empty() {
        return Err(DreamerError::EmptyBatch);
    }
    let m: &DiT = model;
    let per_item: Vec<(f64, f64, Vec<Tensor>)> = samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let p = m.store.bind(&mut g, true);
            let (flow, load, total) = m.loss(&mut g, &p, s)?;
            g.backward(total)?;
            let (f, l) = (g.value(flow).data()[0], g.value(load).data()[0]);
            Ok((f, l, m.store.grads(&g, &p)))
        })
        .collect::<Result<_>>()?;

    let b = samples.len() as f64;
    let flow_loss = per_item.iter().map(|x| x.0).sum::<f64>() / b;
    let load_loss = per_item.iter().map(|x| x.1).sum::<f64>() / b;
    let grads: Vec<Vec<Tensor>> = per_item.into_iter().map(|x| x.2).collect();
    let grads = reduce_grads(&grads, 1.0 / b);
    for (name, g) in model.store.names().iter().zip(&grads) {
        if !g.is_finite() {
            return Err(DreamerError::NonFinite { tensor: format!("grad of {name}") });
        }
    }
    if !(flow_loss.is_finite() && load_loss.is_finite()) {
        return Err(DreamerError::NonFinite { tensor: "loss".into() });
    }
    opt.step(&mut model.store, &grads);
    Ok(StepMetrics { step: opt.steps_taken(), flow_loss, load_loss, total: flow_loss + load_loss })
}

pub fn write_metrics_csv<W: Write>(w: &mut W, rows: &[StepMetrics]) -> std::io::Result<()> {
    writeln!(w, "step,flow_loss,load_loss,total")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.step, r.flow_loss, r.load_loss, r.total)?;
    }
    Ok(())
}
