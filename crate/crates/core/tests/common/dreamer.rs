use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use worldforge::autodiff::{grad_check_multi, GradCheckReport, Tensor};
use worldforge::dreamer::{
    dense_attention, euler_sample, flow_matching_loss, load_balance_loss, moving_squares, route_topk, toy_bundle,
    train_step, windowed_attention, ConditioningBundle, DiT, DiTConfig, FnField, StepMetrics, TrainSample, Window,
};
use worldforge::latent::{codec_encode, LatentTensor, TokenSequence, VideoTensor};
use worldforge::nn::{Adam, AdamConfig, ParamStore};
use worldforge::rng::{substream, StageRng};

pub const TOY_LR: f64 = 3e-3;

pub fn noise_like(rng: &mut StageRng, z: &LatentTensor) -> LatentTensor {
    LatentTensor::from_fn(z.frames, z.height, z.width, z.channels, |_, _, _, _| rng.sample(StandardNormal))
}

pub fn toy_samples(cfg: &DiTConfig, n: usize, seed: u64) -> Vec<TrainSample> {
    let mut rng = substream(seed, "samples");
    moving_squares(&mut substream(seed, "toy"), n, 5, 8, 3)
        .into_iter()
        .map(|c| {
            let z1 = codec_encode(&c.video, cfg.ratios).unwrap();
            let z0 = noise_like(&mut rng, &z1);
            let t = rng.random_range(0.05..0.95);
            TrainSample { z0, z1, t, bundle: toy_bundle(&c.video, &c.prompt, cfg).unwrap() }
        })
        .collect()
}

/// Gradient check of the total training loss (flow + load balance) of a
/// depth-2, dim-32 model with respect to a seeded subset of its parameters.
pub fn dreamer_loss_grad_check(seed: u64) -> GradCheckReport {
    let cfg = DiTConfig::desk();
    assert_eq!((cfg.depth, cfg.dim), (2, 32));
    let mut rng = substream(seed, "gc-init");
    let mut model = DiT::new(cfg.clone(), &mut rng).unwrap();
    for (name, t) in model.store.names().to_vec().iter().zip(model.store.tensors_mut()) {
        if name.starts_with("head") {
            *t = Tensor::uniform(&mut rng, t.shape(), -0.2, 0.2);
        }
    }
    let item = toy_samples(&cfg, 1, seed).remove(0);
    let xs: Vec<Tensor> = model.store.tensors().to_vec();
    let mut coords = Vec::new();
    for (i, t) in xs.iter().enumerate() {
        let n = t.numel();
        for j in sample(&mut rng, n, n.min(32)) {
            coords.push((i, j));
        }
    }
    grad_check_multi(
        |g, vars| {
            let p = ParamStore::bind_vars(vars.to_vec());
            let (_, _, total) = model.loss(g, &p, &item).map_err(|e| match e {
                worldforge::dreamer::DreamerError::Autodiff(a) => a,
                other => panic!("{other}"),
            })?;
            Ok(total)
        },
        &xs,
        1e-6,
        Some(&coords),
    )
    .unwrap()
}

pub struct ToyRun {
    pub eval_before: f64,
    pub eval_after: f64,
    pub metrics: Vec<StepMetrics>,
}

/// 200 Adam steps (batch 8) on a 64-clip moving-square set; flow loss is
/// measured on a fixed held-out set of `(z0, t)` draws before and after.
pub fn toy_training_run(seed: u64, steps: usize, lr: f64) -> ToyRun {
    let cfg = DiTConfig::desk();
    let data: Vec<(VideoTensor, _)> = moving_squares(&mut substream(seed, "toy"), 64, 5, 8, 3)
        .into_iter()
        .map(|c| {
            let b = toy_bundle(&c.video, &c.prompt, &cfg).unwrap();
            (c.video, b)
        })
        .collect();
    let mut erng = substream(seed, "eval");
    let eval: Vec<TrainSample> = data
        .iter()
        .take(32)
        .map(|(v, b)| {
            let z1 = codec_encode(v, cfg.ratios).unwrap();
            let z0 = noise_like(&mut erng, &z1);
            TrainSample { z0, z1, t: erng.random_range(0.0..=1.0), bundle: b.clone() }
        })
        .collect();
    let ev = |m: &DiT| {
        eval.iter().map(|s| flow_matching_loss(m, &s.z0, &s.z1, s.t, &s.bundle).unwrap()).sum::<f64>()
            / eval.len() as f64
    };
    let mut model = DiT::new(cfg, &mut substream(seed, "init")).unwrap();
    let eval_before = ev(&model);
    let mut opt = Adam::new(AdamConfig { lr, ..Default::default() }, &model.store);
    let mut rng = substream(seed, "train");
    let metrics = (0..steps)
        .map(|_| {
            let batch: Vec<_> = (0..8).map(|_| data[rng.random_range(0..data.len())].clone()).collect();
            train_step(&mut model, &batch, &mut opt, &mut rng).unwrap()
        })
        .collect();
    ToyRun { eval_before, eval_after: ev(&model), metrics }
}

fn random_seq(rng: &mut StageRng, grid: [usize; 3], dim: usize) -> TokenSequence {
    let positions = TokenSequence::grid_positions(grid);
    let tokens = (0..positions.len() * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    TokenSequence::new(dim, tokens, positions, grid).unwrap()
}

/// Windowed attention with a window covering the whole grid against dense
/// attention on random grids, head counts and window sizes; returns the
/// largest absolute difference over all cases.
pub fn attention_equivalence(cases: usize, seed: u64) -> f64 {
    let mut rng = substream(seed, "attn-equiv");
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let grid = [rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..6)];
        let heads = rng.random_range(1..4);
        let dim = heads * 2 * rng.random_range(1..4);
        let (q, k, v) = (random_seq(&mut rng, grid, dim), random_seq(&mut rng, grid, dim), random_seq(&mut rng, grid, dim));
        let cover = Window::covering(grid);
        let window = if rng.random_bool(0.5) {
            cover
        } else {
            let odd = |m: usize, r: &mut StageRng| m + 2 * r.random_range(0..3);
            Window { t: odd(cover.t, &mut rng), h: odd(cover.h, &mut rng), w: odd(cover.w, &mut rng) }
        };
        let a = windowed_attention(&q, &k, &v, window, heads).unwrap();
        let b = dense_attention(&q, &k, &v, heads).unwrap();
        for (x, y) in a.tokens.iter().zip(&b.tokens) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

/// Compares `route_topk` with a rank-counting oracle on random score
/// matrices (a quarter of them with heavy ties). Returns mismatching cases.
pub fn topk_oracle_mismatches(cases: usize, seed: u64) -> usize {
    let mut rng = substream(seed, "topk-oracle");
    let mut bad = 0;
    for _ in 0..cases {
        let n = rng.random_range(1..10);
        let k = rng.random_range(1..=n);
        let t = rng.random_range(1..8);
        let ties = rng.random_bool(0.25);
        let scores: Vec<f64> = (0..t * n)
            .map(|_| if ties { rng.random_range(0..3) as f64 / 2.0 } else { rng.random_range(0.0..1.0) })
            .collect();
        let d = route_topk(&scores, n, k).unwrap();
        let ok = (0..t).all(|row| {
            let s = &scores[row * n..(row + 1) * n];
            let mut want: Vec<usize> = (0..n)
                .filter(|&i| (0..n).filter(|&j| s[j] > s[i] || (s[j] == s[i] && j < i)).count() < k)
                .collect();
            let mut got = d.selected(row).to_vec();
            got.sort_unstable();
            want.sort_unstable();
            let gates_ok = (0..n).all(|i| d.gates(row)[i] == if want.contains(&i) { s[i] } else { 0.0 });
            got == want && gates_ok
        });
        if !ok {
            bad += 1;
        }
    }
    bad
}

/// `T = N` tokens, token `t` strongly prefers experts `t..t+K` (mod N):
/// every expert is picked `K` times and mean scores are uniform, so the
/// loss equals `alpha`. Returns the largest deviation over (N, K) pairs.
pub fn rotating_selection_deviation(alpha: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for n in 2..=8 {
        for k in 1..=n {
            let mut scores = vec![0.1; n * n];
            for t in 0..n {
                for j in 0..k {
                    scores[t * n + (t + j) % n] = 0.5;
                }
            }
            let d = route_topk(&scores, n, k).unwrap();
            worst = worst.max((load_balance_loss(&d, alpha).unwrap() - alpha).abs());
        }
    }
    worst
}

/// Euler sampling of a constant velocity field; returns the largest error
/// against `z + v` over several step counts.
pub fn constant_field_euler_error(seed: u64) -> f64 {
    let mut rng = substream(seed, "euler");
    let z = LatentTensor::from_fn(2, 2, 3, 2, |_, _, _, _| rng.random_range(-2.0..2.0));
    let v = LatentTensor::from_fn(2, 2, 3, 2, |_, _, _, _| rng.random_range(-2.0..2.0));
    let bundle = ConditioningBundle {
        text_embedding: vec![],
        first_frame_latent: LatentTensor::zeros(1, 1, 1, 1),
        control_latents: vec![],
    };
    let field = FnField(|_: &LatentTensor, _: f64, _: &ConditioningBundle| Ok(v.clone()));
    let mut worst: f64 = 0.0;
    for steps in [1, 2, 3, 5, 8, 17, 50, 128] {
        let out = euler_sample(&field, &z, &bundle, steps).unwrap();
        for ((o, a), b) in out.data().iter().zip(z.data()).zip(v.data()) {
            worst = worst.max((o - (a + b)).abs());
        }
    }
    worst
}
