//! The diffusion transformer and its conditioning path.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;

use super::moe::LN_EPS;
use super::{
    neighborhood_mask, rope_tables, rotate_half_matrix, route_topk, DiTConfig, DreamerError, Expert, ExpertBank,
    GateDecision, Result,
};
use crate::autodiff::{Graph, Tensor, Var};
use crate::latent::{patchify, unpatchify, LatentTensor, TokenSequence};
use crate::nn::{read_checkpoint, write_checkpoint, Bound, Init, Linear, ParamId, ParamStore};

/// Text, first-frame and control conditioning for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    pub text_embedding: Vec<f64>,
    /// Single-frame latent of the first video frame.
    pub first_frame_latent: LatentTensor,
    /// Up to `n_controls` latents aligned with the noise latent.
    pub control_latents: Vec<LatentTensor>,
}

/// One flow-matching training example.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub z0: LatentTensor,
    pub z1: LatentTensor,
    pub t: f64,
    pub bundle: ConditioningBundle,
}

/// Concatenates the noise latent with its control latents along channels,
/// filling absent controls with zeros.
pub fn concat_controls(noise: &LatentTensor, bundle: &ConditioningBundle, n_controls: usize) -> Result<LatentTensor> {
    if bundle.control_latents.len() > n_controls {
        return Err(DreamerError::ShapeMismatch(format!(
            "{} control latents, at most {n_controls} supported",
            bundle.control_latents.len()
        )));
    }
    for c in &bundle.control_latents {
        if c.dims() != noise.dims() {
            return Err(DreamerError::ShapeMismatch(format!(
                "control latent {:?} vs noise {:?}",
                c.dims(),
                noise.dims()
            )));
        }
    }
    let ch = noise.channels;
    let total = ch * (1 + n_controls);
    let cells = noise.frames * noise.height * noise.width;
    let mut data = Vec::with_capacity(cells * total);
    for cell in 0..cells {
        data.extend_from_slice(&noise.data()[cell * ch..(cell + 1) * ch]);
        for k in 0..n_controls {
            match bundle.control_latents.get(k) {
                Some(c) => data.extend_from_slice(&c.data()[cell * ch..(cell + 1) * ch]),
                None => data.extend(std::iter::repeat_n(0.0, ch)),
            }
        }
    }
    Ok(LatentTensor::new(noise.frames, noise.height, noise.width, total, data)?)
}

/// Sinusoidal embedding of a flow time in `[0, 1]`.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let (s, c) = (1000.0 * t * freq).sin_cos();
        out[i] = s;
        out[half + i] = c;
    }
    out
}

#[derive(Clone, Debug)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    router: ParamId,
    experts: Vec<(Linear, Linear)>,
}

/// Output of one forward pass on a graph.
pub struct Forward {
    /// `[tokens, token_dim]` velocity in patch-token layout.
    pub velocity: Var,
    /// Sum over layers of the load-balance loss.
    pub load: Var,
    pub decisions: Vec<GateDecision>,
    pub tokens: TokenSequence,
}

/// Flow-matching diffusion transformer with routed MoE feed-forward layers.
#[derive(Clone, Debug)]
pub struct DiT {
    config: DiTConfig,
    pub store: ParamStore,
    fuse: Vec<Linear>,
    time: (Linear, Linear),
    text: Linear,
    first: Linear,
    blocks: Vec<Block>,
    head: Linear,
}

impl DiT {
    pub fn new<R: Rng + ?Sized>(config: DiTConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (dim, td) = (config.dim, config.token_dim());
        let fuse_in = td * (1 + config.n_controls);

        let mut widths = vec![fuse_in];
        widths.extend(&config.fuse_hidden);
        widths.push(dim);
        let mut fuse = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            fuse.push(Linear::new(&mut store, &format!("fuse.{i}"), w[0], w[1], true, Init::Uniform, rng));
        }
        if config.fuse_hidden.is_empty() && dim == td {
            let per = config.latent_channels();
            let stride = per * (1 + config.n_controls);
            let w = store.get_mut(fuse[0].w);
            w.data_mut().fill(0.0);
            for cell in 0..config.patch.volume() {
                for c in 0..per {
                    w.data_mut()[(cell * stride + c) * dim + cell * per + c] = 1.0;
                }
            }
        }

        let time = (
            Linear::new(&mut store, "time.0", config.time_dim, dim, true, Init::Uniform, rng),
            Linear::new(&mut store, "time.1", dim, dim, true, Init::Uniform, rng),
        );
        let text = Linear::new(&mut store, "text", config.text_dim, dim, true, Init::Uniform, rng);
        let first = Linear::new(&mut store, "first_frame", td, dim, false, Init::Uniform, rng);

        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let lin = |name: &str, i: usize, o: usize, store: &mut ParamStore, rng: &mut R| {
                Linear::new(store, &format!("block.{l}.{name}"), i, o, true, Init::Uniform, rng)
            };
            let q = lin("q", dim, dim, &mut store, rng);
            let k = lin("k", dim, dim, &mut store, rng);
            let v = lin("v", dim, dim, &mut store, rng);
            let o = lin("o", dim, dim, &mut store, rng);
            let kr = 1.0 / (dim as f64).sqrt();
            let router =
                store.add(format!("block.{l}.router"), Tensor::uniform(rng, &[dim, config.n_experts], -kr, kr));
            let experts = (0..config.n_experts)
                .map(|e| {
                    (
                        lin(&format!("expert.{e}.0"), dim, config.ffn_hidden, &mut store, rng),
                        lin(&format!("expert.{e}.1"), config.ffn_hidden, dim, &mut store, rng),
                    )
                })
                .collect();
            blocks.push(Block { q, k, v, o, router, experts });
        }
        let head = Linear::new(&mut store, "head", dim, td, true, Init::Zeros, rng);
        Ok(Self { config, store, fuse, time, text, first, blocks, head })
    }

    pub fn config(&self) -> &DiTConfig {
        &self.config
    }

    fn check_latent(&self, z: &LatentTensor) -> Result<()> {
        if z.channels != self.config.latent_channels() {
            return Err(DreamerError::ShapeMismatch(format!(
                "latent has {} channels, model expects {}",
                z.channels,
                self.config.latent_channels()
            )));
        }
        Ok(())
    }

    /// Graph version of [`condition_fuse`].
    fn fuse_graph(&self, g: &mut Graph, p: &Bound, noise: &LatentTensor, c: &ConditioningBundle) -> Result<(Var, TokenSequence)> {
        let cat = concat_controls(noise, c, self.config.n_controls)?;
        let seq = patchify(&cat, self.config.patch)?;
        let mut x = g.constant(seq.to_tensor());
        for (i, l) in self.fuse.iter().enumerate() {
            if i > 0 {
                x = g.silu(x)?;
            }
            x = l.forward(g, p, x)?;
        }
        Ok((x, seq))
    }

    fn first_frame_tokens(&self, noise: &LatentTensor, c: &ConditioningBundle) -> Result<TokenSequence> {
        let ff = &c.first_frame_latent;
        if ff.frames != 1 || ff.height != noise.height || ff.width != noise.width || ff.channels != noise.channels {
            return Err(DreamerError::ShapeMismatch(format!(
                "first-frame latent {:?} vs noise {:?}",
                ff.dims(),
                noise.dims()
            )));
        }
        let pt = self.config.patch.t;
        let mut padded = LatentTensor::zeros(pt, ff.height, ff.width, ff.channels);
        padded.frame_mut(0).copy_from_slice(ff.frame(0));
        Ok(patchify(&padded, self.config.patch)?)
    }

    /// Builds the full forward pass on `g` with parameters `p`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, z_t: &LatentTensor, t: f64, c: &ConditioningBundle) -> Result<Forward> {
        let cfg = &self.config;
        self.check_latent(z_t)?;
        if c.text_embedding.len() != cfg.text_dim {
            return Err(DreamerError::ShapeMismatch(format!(
                "text embedding of {} values, expected {}",
                c.text_embedding.len(),
                cfg.text_dim
            )));
        }
        let (mut x, seq) = self.fuse_graph(g, p, z_t, c)?;
        let n = seq.len();

        let temb = g.constant(Tensor::new(vec![1, cfg.time_dim], timestep_embedding(t, cfg.time_dim))?);
        let h = self.time.0.forward(g, p, temb)?;
        let h = g.silu(h)?;
        let h = self.time.1.forward(g, p, h)?;
        x = g.add(x, h)?;

        let txt = g.constant(Tensor::new(vec![1, cfg.text_dim], c.text_embedding.clone())?);
        let h = self.text.forward(g, p, txt)?;
        x = g.add(x, h)?;

        let ff = self.first_frame_tokens(z_t, c)?;
        let ffv = g.constant(ff.to_tensor());
        let h = self.first.forward(g, p, ffv)?;
        let rows: Vec<usize> = (0..n).filter(|&i| seq.positions[i][0] == 0).collect();
        let h = g.scatter_rows(h, &rows, n)?;
        x = g.add(x, h)?;

        let (cos, sin) = rope_tables(&seq.positions, cfg.heads, &cfg.rope);
        let rope = (g.constant(cos), g.constant(sin), g.constant(rotate_half_matrix(cfg.dim)));
        let mask = neighborhood_mask(&seq.positions, seq.grid, cfg.window);

        let mut load: Option<Var> = None;
        let mut decisions = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = self.attention(g, p, b, x, rope, &mask)?;
            let (y, l, d) = self.moe(g, p, b, x)?;
            x = y;
            load = Some(match load {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
            decisions.push(d);
        }
        let x = g.layer_norm(x, LN_EPS)?;
        let velocity = self.head.forward(g, p, x)?;
        let load = load.expect("depth >= 1");
        Ok(Forward { velocity, load, decisions, tokens: seq })
    }

    fn attention(&self, g: &mut Graph, p: &Bound, b: &Block, x: Var, rope: (Var, Var, Var), mask: &[bool]) -> Result<Var> {
        let (heads, hd) = (self.config.heads, self.config.head_dim());
        let a = g.layer_norm(x, LN_EPS)?;
        let rotate = |g: &mut Graph, l: &Linear| -> Result<Var> {
            let y = l.forward(g, p, a)?;
            let c = g.mul(y, rope.0)?;
            let r = g.matmul(y, rope.2)?;
            let s = g.mul(r, rope.1)?;
            Ok(g.add(c, s)?)
        };
        let q = rotate(g, &b.q)?;
        let k = rotate(g, &b.k)?;
        let v = b.v.forward(g, p, a)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice(q, 1, h * hd, hd)?;
            let kh = g.slice(k, 1, h * hd, hd)?;
            let vh = g.slice(v, 1, h * hd, hd)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, 1.0 / (hd as f64).sqrt())?;
            let w = g.softmax_masked(s, mask)?;
            outs.push(g.matmul(w, vh)?);
        }
        let o = g.concat(&outs, 1)?;
        let o = b.o.forward(g, p, o)?;
        Ok(g.add(x, o)?)
    }

    fn moe(&self, g: &mut Graph, p: &Bound, b: &Block, u: Var) -> Result<(Var, Var, GateDecision)> {
        let cfg = &self.config;
        let n = g.shape(u)[0];
        let ne = cfg.n_experts;
        let logits = g.matmul(u, p[b.router])?;
        let s = g.softmax(logits)?;
        let mut d = route_topk(g.value(s).data(), ne, cfg.top_k)?;
        g.record_branch(d.selected.iter().map(|&i| i as u64));
        let gates = if cfg.renormalize_gates {
            d.renormalize();
            let sel = Tensor::from_fn(&[n, ne], |i| if d.gates[i] != 0.0 { 1.0 } else { 0.0 });
            let sel = g.constant(sel);
            let gs = g.mul(s, sel)?;
            let den = g.sum_axis(gs, 1)?;
            g.div(gs, den)?
        } else {
            s
        };

        let ln = g.layer_norm(u, LN_EPS)?;
        let mut out = u;
        for (i, (l1, l2)) in b.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&r| d.gates(r)[i] != 0.0).collect();
            if rows.is_empty() {
                continue;
            }
            let xi = g.gather_rows(ln, &rows)?;
            let h = l1.forward(g, p, xi)?;
            let h = g.silu(h)?;
            let y = l2.forward(g, p, h)?;
            let gi = g.gather_rows(gates, &rows)?;
            let gi = g.slice(gi, 1, i, 1)?;
            let y = g.mul(y, gi)?;
            let y = g.scatter_rows(y, &rows, n)?;
            out = g.add(out, y)?;
        }

        let z = g.sum_axis(s, 1)?;
        let sp = g.div(s, z)?;
        let psum = g.sum_axis(sp, 0)?;
        let scale = ne as f64 / (cfg.top_k * n) as f64;
        let f = Tensor::from_fn(&[1, ne], |i| scale * d.counts()[i] as f64 / n as f64);
        let f = g.constant(f);
        let fp = g.mul(psum, f)?;
        let l = g.sum(fp)?;
        let l = g.scale(l, cfg.alpha)?;
        Ok((out, l, d))
    }

    /// Flow, load and total losses of one sample.
    pub fn loss(&self, g: &mut Graph, p: &Bound, s: &TrainSample) -> Result<(Var, Var, Var)> {
        if !(0.0..=1.0).contains(&s.t) {
            return Err(DreamerError::BadT(s.t));
        }
        if s.z0.dims() != s.z1.dims() {
            return Err(DreamerError::ShapeMismatch(format!("z0 {:?} vs z1 {:?}", s.z0.dims(), s.z1.dims())));
        }
        let zt = lerp(&s.z0, &s.z1, s.t);
        let fwd = self.forward(g, p, &zt, s.t, &s.bundle)?;
        let mut target = s.z1.clone();
        for (v, a) in target.data_mut().iter_mut().zip(s.z0.data()) {
            *v -= a;
        }
        let target = g.constant(patchify(&target, self.config.patch)?.to_tensor());
        let flow = g.mse(fwd.velocity, target)?;
        let total = g.add(flow, fwd.load)?;
        Ok((flow, fwd.load, total))
    }

    /// Predicted velocity at `(z_t, t)`.
    pub fn velocity(&self, z_t: &LatentTensor, t: f64, c: &ConditioningBundle) -> Result<LatentTensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let fwd = self.forward(&mut g, &p, z_t, t, c)?;
        let mut seq = fwd.tokens;
        seq.dim = self.config.token_dim();
        seq.tokens = g.value(fwd.velocity).data().to_vec();
        Ok(unpatchify(&seq, self.config.patch, self.config.latent_channels())?)
    }

    /// Plain copy of one layer's experts and router.
    pub fn expert_bank(&self, layer: usize) -> ExpertBank {
        let b = &self.blocks[layer];
        let experts = b
            .experts
            .iter()
            .map(|(l1, l2)| Expert {
                dim: self.config.dim,
                hidden: self.config.ffn_hidden,
                w1: self.store.get(l1.w).data().to_vec(),
                b1: self.store.get(l1.b.expect("bias")).data().to_vec(),
                w2: self.store.get(l2.w).data().to_vec(),
                b2: self.store.get(l2.b.expect("bias")).data().to_vec(),
                activation: super::moe::Activation::Silu,
            })
            .collect();
        ExpertBank {
            experts,
            router: self.store.get(b.router).data().to_vec(),
            pre_norm: true,
            renormalize: self.config.renormalize_gates,
        }
    }

    /// Runs only the MoE sub-layer of `layer` on `tokens`.
    pub fn moe_layer(&self, layer: usize, tokens: &TokenSequence) -> Result<(TokenSequence, GateDecision, f64)> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let u = g.constant(tokens.to_tensor());
        let (y, l, d) = self.moe(&mut g, &p, &self.blocks[layer], u)?;
        let mut out = tokens.clone();
        out.tokens = g.value(y).data().to_vec();
        Ok((out, d, g.value(l).data()[0]))
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let value = serde_json::to_value(&self.config).map_err(|e| DreamerError::Checkpoint(e.to_string()))?;
        let header: BTreeMap<String, String> = value
            .as_object()
            .expect("config serialises to an object")
            .iter()
            .map(|(k, v)| (k.clone(), v.to_string()))
            .collect();
        write_checkpoint(w, &header, &self.store).map_err(|e| DreamerError::Checkpoint(e.to_string()))
    }

    pub fn load<R: BufRead>(r: &mut R) -> Result<Self> {
        let (header, store) = read_checkpoint(r)?;
        let mut obj = serde_json::Map::new();
        for (k, v) in header {
            let v = serde_json::from_str(&v).map_err(|e| DreamerError::Checkpoint(format!("{k}: {e}")))?;
            obj.insert(k, v);
        }
        let config: DiTConfig =
            serde_json::from_value(obj.into()).map_err(|e| DreamerError::Checkpoint(e.to_string()))?;
        let mut model = Self::new(config, &mut crate::rng::substream(0, "checkpoint"))?;
        if model.store.names() != store.names()
            || model.store.tensors().iter().zip(store.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(DreamerError::Checkpoint("tensor table does not match config".into()));
        }
        model.store = store;
        Ok(model)
    }
}

pub(crate) fn lerp(z0: &LatentTensor, z1: &LatentTensor, t: f64) -> LatentTensor {
    let mut out = z0.clone();
    for (o, b) in out.data_mut().iter_mut().zip(z1.data()) {
        *o = (1.0 - t) * *o + t * b;
    }
    out
}

/// Channel-concatenates the controls with `noise`, patchifies and compresses
/// each token to the model width.
pub fn condition_fuse(model: &DiT, noise: &LatentTensor, bundle: &ConditioningBundle) -> Result<TokenSequence> {
    model.check_latent(noise)?;
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false);
    let (x, mut seq) = model.fuse_graph(&mut g, &p, noise, bundle)?;
    seq.dim = model.config.dim;
    seq.tokens = g.value(x).data().to_vec();
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dreamer::{moe_ffn, Window};
    use crate::rng::substream;

    fn latent<R: Rng>(rng: &mut R, cfg: &DiTConfig, frames: usize) -> LatentTensor {
        LatentTensor::from_fn(frames, 4, 4, cfg.latent_channels(), |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn bundle<R: Rng>(rng: &mut R, cfg: &DiTConfig) -> ConditioningBundle {
        ConditioningBundle {
            text_embedding: (0..cfg.text_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            first_frame_latent: latent(rng, cfg, 1),
            control_latents: Vec::new(),
        }
    }

    #[test]
    fn identity_fuser_passes_noise_tokens() {
        let cfg = DiTConfig::desk();
        let mut rng = substream(1, "fuse");
        let model = DiT::new(cfg.clone(), &mut rng).unwrap();
        let z = latent(&mut rng, &cfg, 3);
        let c = bundle(&mut rng, &cfg);
        let fused = condition_fuse(&model, &z, &c).unwrap();
        let want = patchify(&z, cfg.patch).unwrap();
        for (a, b) in fused.tokens.iter().zip(&want.tokens) {
            assert!((a - b).abs() < 1e-15);
        }
        let again = condition_fuse(&model, &z, &c).unwrap();
        assert_eq!(fused, again);
    }

    #[test]
    fn two_controls_triple_channels() {
        let cfg = DiTConfig::desk();
        let mut rng = substream(2, "fuse");
        let z = latent(&mut rng, &cfg, 3);
        let mut c = bundle(&mut rng, &cfg);
        c.control_latents = vec![latent(&mut rng, &cfg, 3), latent(&mut rng, &cfg, 3)];
        let cat = concat_controls(&z, &c, 2).unwrap();
        assert_eq!(cat.channels, 3 * cfg.latent_channels());
        c.control_latents.push(z.clone());
        assert!(concat_controls(&z, &c, 2).is_err());
    }

    #[test]
    fn misaligned_control_rejected() {
        let cfg = DiTConfig::desk();
        let mut rng = substream(3, "fuse");
        let z = latent(&mut rng, &cfg, 3);
        let mut c = bundle(&mut rng, &cfg);
        c.control_latents = vec![latent(&mut rng, &cfg, 2)];
        assert!(matches!(concat_controls(&z, &c, 2), Err(DreamerError::ShapeMismatch(_))));
    }

    #[test]
    fn zero_head_gives_zero_velocity() {
        let cfg = DiTConfig::desk();
        let mut rng = substream(4, "vel");
        let model = DiT::new(cfg.clone(), &mut rng).unwrap();
        let z = latent(&mut rng, &cfg, 3);
        let v = model.velocity(&z, 0.3, &bundle(&mut rng, &cfg)).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert_eq!(v.dims(), z.dims());
    }

    #[test]
    fn graph_moe_matches_plain_kernel() {
        for renormalize in [false, true] {
            let cfg = DiTConfig { renormalize_gates: renormalize, ..DiTConfig::desk() };
            let mut rng = substream(5, "moe-graph");
            let model = DiT::new(cfg.clone(), &mut rng).unwrap();
            let grid = [2, 2, 3];
            let toks = TokenSequence::new(
                cfg.dim,
                (0..12 * cfg.dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                TokenSequence::grid_positions(grid),
                grid,
            )
            .unwrap();
            let (a, da, la) = model.moe_layer(1, &toks).unwrap();
            let (b, db) = moe_ffn(&toks, &model.expert_bank(1), cfg.top_k).unwrap();
            assert_eq!(da.selected, db.selected);
            for (x, y) in a.tokens.iter().zip(&b.tokens) {
                assert!((x - y).abs() < 1e-12);
            }
            let lb = crate::dreamer::load_balance_loss(&db, cfg.alpha).unwrap();
            assert!((la - lb).abs() < 1e-15);
        }
    }

    #[test]
    fn every_token_uses_k_experts() {
        let cfg = DiTConfig { window: Window::new(1, 3, 3), ..DiTConfig::desk() };
        let mut rng = substream(6, "routing");
        let model = DiT::new(cfg.clone(), &mut rng).unwrap();
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, false);
        let z = latent(&mut rng, &cfg, 3);
        let fwd = model.forward(&mut g, &p, &z, 0.5, &bundle(&mut rng, &cfg)).unwrap();
        assert_eq!(fwd.decisions.len(), cfg.depth);
        for d in &fwd.decisions {
            for t in 0..d.tokens() {
                assert_eq!(d.gates(t).iter().filter(|&&x| x != 0.0).count(), cfg.top_k);
            }
        }
    }

    #[test]
    fn bad_t_rejected() {
        let cfg = DiTConfig::desk();
        let mut rng = substream(7, "t");
        let model = DiT::new(cfg.clone(), &mut rng).unwrap();
        let s = TrainSample { z0: latent(&mut rng, &cfg, 3), z1: latent(&mut rng, &cfg, 3), t: 1.5, bundle: bundle(&mut rng, &cfg) };
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, true);
        assert!(matches!(model.loss(&mut g, &p, &s), Err(DreamerError::BadT(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = DiTConfig { renormalize_gates: true, ..DiTConfig::desk() };
        let model = DiT::new(cfg, &mut substream(8, "ckpt")).unwrap();
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let back = DiT::load(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.store, model.store);
    }

    #[test]
    fn config_invariants_enforced() {
        let mut rng = substream(9, "cfg");
        let bad = [
            DiTConfig { top_k: 5, ..DiTConfig::desk() },
            DiTConfig { heads: 3, ..DiTConfig::desk() },
            DiTConfig { alpha: -0.1, ..DiTConfig::desk() },
            DiTConfig { window: Window::new(0, 3, 3), ..DiTConfig::desk() },
        ];
        for c in bad {
            assert!(DiT::new(c, &mut rng).is_err());
        }
    }
}
