//! Parameter storage, dense layers and the Adam optimiser shared by the
//! trainable models.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::autodiff::{snapshot, AutodiffError, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter in `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect())
    }

    /// Registers parameters from an explicit tensor list that mirrors this
    /// store's layout (used by gradient checks that perturb parameters).
    pub fn bind_vars(vars: Vec<Var>) -> Bound {
        Bound(vars)
    }

    pub fn grads(&self, g: &Graph, bound: &Bound) -> Vec<Tensor> {
        bound
            .0
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }
}

/// Sums gradient lists elementwise in list order and scales by `k`.
pub fn reduce_grads(per_item: &[Vec<Tensor>], k: f64) -> Vec<Tensor> {
    let mut acc: Vec<Tensor> = per_item[0].clone();
    for item in &per_item[1..] {
        for (a, g) in acc.iter_mut().zip(item) {
            a.add_assign(g);
        }
    }
    for a in &mut acc {
        a.scale_in_place(k);
    }
    acc
}

/// Dense layer `y = x W + b` on row-major `[n, in]` inputs.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

pub enum Init {
    /// Uniform in ±1/sqrt(fan_in).
    Uniform,
    Zeros,
    /// Identity on the leading `min(in, out)` block, zero elsewhere.
    Identity,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::Uniform => {
                let k = 1.0 / (fan_in as f64).sqrt();
                Tensor::uniform(rng, &[fan_in, fan_out], -k, k)
            }
            Init::Zeros => Tensor::zeros(&[fan_in, fan_out]),
            Init::Identity => {
                Tensor::from_fn(&[fan_in, fan_out], |i| if i / fan_out == i % fan_out { 1.0 } else { 0.0 })
            }
        };
        let w = store.add(format!("{name}.weight"), w);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, AutodiffError> {
        let y = g.matmul(x, p[self.w])?;
        match self.b {
            Some(b) => g.add(y, p[b]),
            None => Ok(y),
        }
    }

    /// Plain forward on a row-major `[n, in]` slice.
    pub fn apply(&self, store: &ParamStore, x: &[f64], n: usize) -> Vec<f64> {
        let mut y = crate::autodiff::matmul_raw(x, store.get(self.w).data(), n, self.fan_in, self.fan_out);
        if let Some(b) = self.b {
            let b = store.get(b).data();
            for row in y.chunks_mut(self.fan_out) {
                for (v, bv) in row.iter_mut().zip(b) {
                    *v += bv;
                }
            }
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { config, v: m.clone(), m, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.step_with_lr(store, grads, self.config.lr);
    }

    pub fn step_with_lr(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in store.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
            }
        }
    }
}

/// Cosine decay from `lr` to `lr * floor` over `total` steps.
pub fn cosine_lr(lr: f64, floor: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let p = (step as f64 / (total - 1) as f64).min(1.0);
    lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Checkpoint: `key=value` config lines, a `---` separator line, then a
/// little-endian `u64` tensor count followed by `(u64 name length, name
/// bytes, tensor snapshot)` per tensor.
pub fn write_checkpoint<W: Write>(
    w: &mut W,
    config: &BTreeMap<String, String>,
    store: &ParamStore,
) -> std::io::Result<()> {
    for (k, v) in config {
        writeln!(w, "{k}={v}")?;
    }
    writeln!(w, "---")?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, t) in store.names().iter().zip(store.tensors()) {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        snapshot::write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(r: &mut R) -> Result<(BTreeMap<String, String>, ParamStore), AutodiffError> {
    let bad = |m: String| AutodiffError::Snapshot(m);
    let mut config = BTreeMap::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(|e| bad(e.to_string()))? == 0 {
            return Err(bad("missing config separator".into()));
        }
        let line = line.trim_end_matches('\n');
        if line == "---" {
            break;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad config line {line:?}")))?;
        config.insert(k.to_string(), v.to_string());
    }
    let n = snapshot::read_u64(r)?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let len = snapshot::read_u64(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| bad(e.to_string()))?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        store.add(name, snapshot::read_tensor(r)?);
    }
    Ok((config, store))
}
