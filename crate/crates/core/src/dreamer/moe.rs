//! Routed mixture-of-experts feed-forward layer and its balance loss.

use rand::Rng;

use super::{DreamerError, Result};
use crate::autodiff::{matmul_raw, sigmoid, softmax_in_place};
use crate::latent::TokenSequence;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Per-token routing outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub n_experts: usize,
    pub top_k: usize,
    /// `T * top_k` expert indices, highest score first.
    pub selected: Vec<usize>,
    /// `T * n_experts` gate values; zero off the selection.
    pub gates: Vec<f64>,
    /// `T * n_experts` softmax scores.
    pub scores: Vec<f64>,
}

impl GateDecision {
    pub fn tokens(&self) -> usize {
        self.scores.len() / self.n_experts.max(1)
    }

    pub fn selected(&self, t: usize) -> &[usize] {
        &self.selected[t * self.top_k..(t + 1) * self.top_k]
    }

    pub fn gates(&self, t: usize) -> &[f64] {
        &self.gates[t * self.n_experts..(t + 1) * self.n_experts]
    }

    pub fn scores(&self, t: usize) -> &[f64] {
        &self.scores[t * self.n_experts..(t + 1) * self.n_experts]
    }

    /// Number of tokens routed to each expert.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_experts];
        for &i in &self.selected {
            c[i] += 1;
        }
        c
    }

    /// Rescales each token's gates to sum to one over its selection.
    pub fn renormalize(&mut self) {
        let n = self.n_experts;
        for row in self.gates.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|g| *g /= s);
            }
        }
    }
}

/// Keeps the `k` largest scores per token (ties go to the lower index).
/// `scores` is row-major `[T, n_experts]`.
pub fn route_topk(scores: &[f64], n_experts: usize, k: usize) -> Result<GateDecision> {
    if k > n_experts || k == 0 {
        return Err(DreamerError::KTooLarge { k, n: n_experts });
    }
    if scores.len() % n_experts != 0 {
        return Err(DreamerError::ShapeMismatch(format!("{} scores for {n_experts} experts", scores.len())));
    }
    let mut selected = Vec::with_capacity(scores.len() / n_experts * k);
    let mut gates = vec![0.0; scores.len()];
    let mut order: Vec<usize> = Vec::with_capacity(n_experts);
    for (row, g) in scores.chunks(n_experts).zip(gates.chunks_mut(n_experts)) {
        order.clear();
        order.extend(0..n_experts);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &i in &order[..k] {
            g[i] = row[i];
            selected.push(i);
        }
    }
    Ok(GateDecision { n_experts, top_k: k, selected, gates, scores: scores.to_vec() })
}

/// Softmax over router logits followed by [`route_topk`].
pub fn route_logits(logits: &[f64], n_experts: usize, k: usize) -> Result<GateDecision> {
    let mut s = logits.to_vec();
    for row in s.chunks_mut(n_experts) {
        softmax_in_place(row, None);
    }
    route_topk(&s, n_experts, k)
}

/// `L = alpha * sum_i f_i P_i` with `f_i = N/(K T) * count_i` and `P_i` the
/// mean over tokens of the row-normalised scores.
pub fn load_balance_loss(d: &GateDecision, alpha: f64) -> Result<f64> {
    let t = d.tokens();
    if t == 0 {
        return Err(DreamerError::EmptySequence);
    }
    let n = d.n_experts;
    let scale = n as f64 / (d.top_k * t) as f64;
    let f: Vec<f64> = d.counts().into_iter().map(|c| scale * c as f64).collect();
    let mut p = vec![0.0; n];
    for row in d.scores.chunks(n) {
        let z: f64 = row.iter().sum();
        for (pi, s) in p.iter_mut().zip(row) {
            *pi += s / z;
        }
    }
    Ok(alpha * f.iter().zip(&p).map(|(fi, pi)| fi * pi / t as f64).sum::<f64>())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Identity,
}

/// Two-layer feed-forward expert `W2 act(W1 x + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub dim: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub activation: Activation,
}

impl Expert {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            dim,
            hidden,
            w1: vec![0.0; dim * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * dim],
            b2: vec![0.0; dim],
            activation: Activation::Silu,
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, dim: usize, hidden: usize) -> Self {
        let (k1, k2) = (1.0 / (dim as f64).sqrt(), 1.0 / (hidden as f64).sqrt());
        Self {
            w1: (0..dim * hidden).map(|_| rng.random_range(-k1..k1)).collect(),
            b1: (0..hidden).map(|_| rng.random_range(-k1..k1)).collect(),
            w2: (0..hidden * dim).map(|_| rng.random_range(-k2..k2)).collect(),
            b2: (0..dim).map(|_| rng.random_range(-k2..k2)).collect(),
            ..Self::zeros(dim, hidden)
        }
    }

    /// Applies the expert to `n` row-major inputs.
    pub fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut h = matmul_raw(x, &self.w1, n, self.dim, self.hidden);
        for row in h.chunks_mut(self.hidden) {
            for (v, b) in row.iter_mut().zip(&self.b1) {
                *v += b;
                if self.activation == Activation::Silu {
                    *v *= sigmoid(*v);
                }
            }
        }
        let mut y = matmul_raw(&h, &self.w2, n, self.hidden, self.dim);
        for row in y.chunks_mut(self.dim) {
            for (v, b) in row.iter_mut().zip(&self.b2) {
                *v += b;
            }
        }
        y
    }
}

/// Routed experts plus their router vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank {
    pub experts: Vec<Expert>,
    /// Row-major `[dim, n_experts]`; column `i` is the router vector `e_i`.
    pub router: Vec<f64>,
    /// Normalise expert inputs (layer norm without affine) before the FFN.
    pub pre_norm: bool,
    /// Rescale the selected gates to sum to one.
    pub renormalize: bool,
}

impl ExpertBank {
    pub fn new(experts: Vec<Expert>, router: Vec<f64>) -> Result<Self> {
        let bank = Self { experts, router, pre_norm: false, renormalize: false };
        bank.check()?;
        Ok(bank)
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn dim(&self) -> usize {
        self.experts.first().map_or(0, |e| e.dim)
    }

    fn check(&self) -> Result<()> {
        let d = self.dim();
        if self.experts.is_empty() || self.experts.iter().any(|e| e.dim != d) {
            return Err(DreamerError::ShapeMismatch("experts must share one nonzero count and dim".into()));
        }
        if self.router.len() != d * self.n_experts() {
            return Err(DreamerError::ShapeMismatch(format!(
                "router has {} values, expected {}",
                self.router.len(),
                d * self.n_experts()
            )));
        }
        if self.router.iter().any(|v| !v.is_finite()) {
            return Err(DreamerError::NonFinite { tensor: "router".into() });
        }
        Ok(())
    }
}

fn layer_norm_rows(x: &[f64], dim: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(dim) {
        let mu = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / dim as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mu) * r);
    }
    out
}

/// `h'_t = u_t + sum_i g_{i,t} FFN_i(u_t)`, evaluating each expert only on
/// the tokens routed to it.
pub fn moe_ffn(tokens: &TokenSequence, bank: &ExpertBank, k: usize) -> Result<(TokenSequence, GateDecision)> {
    bank.check()?;
    let (dim, n) = (bank.dim(), bank.n_experts());
    if tokens.dim != dim {
        return Err(DreamerError::ShapeMismatch(format!("token dim {} vs expert dim {dim}", tokens.dim)));
    }
    let t = tokens.len();
    let logits = matmul_raw(&tokens.tokens, &bank.router, t, dim, n);
    let mut decision = route_logits(&logits, n, k)?;
    if bank.renormalize {
        decision.renormalize();
    }
    let input = if bank.pre_norm { layer_norm_rows(&tokens.tokens, dim) } else { tokens.tokens.clone() };
    let mut out = tokens.clone();
    for (i, expert) in bank.experts.iter().enumerate() {
        let rows: Vec<usize> = (0..t).filter(|&r| decision.gates(r)[i] != 0.0).collect();
        if rows.is_empty() {
            continue;
        }
        let x: Vec<f64> = rows.iter().flat_map(|&r| input[r * dim..(r + 1) * dim].iter().copied()).collect();
        let y = expert.forward(&x, rows.len());
        for (j, &r) in rows.iter().enumerate() {
            let g = decision.gates(r)[i];
            for (o, v) in out.token_mut(r).iter_mut().zip(&y[j * dim..(j + 1) * dim]) {
                *o += g * v;
            }
        }
    }
    Ok((out, decision))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand_distr::{Distribution, StandardNormal};

    const SOFTMAX_2_1_0_M1: [f64; 4] =
        [0.6439142598879724, 0.23688281808991013, 0.08714431874203257, 0.03205860328008499];

    #[test]
    fn reference_logits_select_first_two() {
        let d = route_logits(&[2.0, 1.0, 0.0, -1.0], 4, 2).unwrap();
        assert_eq!(d.selected(0), &[0, 1]);
        for (g, want) in d.gates(0).iter().zip([SOFTMAX_2_1_0_M1[0], SOFTMAX_2_1_0_M1[1], 0.0, 0.0]) {
            assert!((g - want).abs() < 1e-15);
        }
    }

    #[test]
    fn ties_prefer_lower_index() {
        let d = route_topk(&[0.25; 4], 4, 2).unwrap();
        assert_eq!(d.selected(0), &[0, 1]);
    }

    #[test]
    fn full_selection_gates_sum_to_one() {
        let d = route_logits(&[0.3, -1.2, 2.0, 0.1], 4, 4).unwrap();
        assert!(d.gates(0).iter().all(|&g| g > 0.0));
        assert!((d.gates(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn k_too_large_rejected() {
        assert!(matches!(route_topk(&[0.5, 0.5], 2, 3), Err(DreamerError::KTooLarge { .. })));
    }

    fn rotating() -> GateDecision {
        let mut scores = vec![0.1; 16];
        for t in 0..4 {
            scores[t * 4 + t] = 0.4;
            scores[t * 4 + (t + 1) % 4] = 0.4;
        }
        route_topk(&scores, 4, 2).unwrap()
    }

    #[test]
    fn rotating_selection_is_balanced() {
        let d = rotating();
        assert_eq!(d.counts(), vec![2; 4]);
        assert!((load_balance_loss(&d, 0.01).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(load_balance_loss(&d, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn collapsed_routing_doubles_loss() {
        let eps = 1e-6;
        let row = [0.5 - eps, 0.5 - eps, eps, eps];
        let scores: Vec<f64> = row.iter().cycle().take(16).copied().collect();
        let d = route_topk(&scores, 4, 2).unwrap();
        let l = load_balance_loss(&d, 0.01).unwrap();
        // f = (2, 2, 0, 0), P ~ (0.5, 0.5, 0, 0)
        assert!((l - 0.01 * 2.0 * (1.0 - 2.0 * eps)).abs() < 1e-12);
        assert!(l > 0.01);
    }

    #[test]
    fn empty_sequence_rejected() {
        let d = route_topk(&[], 4, 2).unwrap();
        assert!(matches!(load_balance_loss(&d, 0.01), Err(DreamerError::EmptySequence)));
    }

    #[test]
    fn single_token_bound_holds_on_random_scores() {
        // With one token, f_i = N/K on the selection and the selection
        // carries at least K/N of the mass, so L >= alpha.
        let mut rng = substream(21, "lb-bound");
        for _ in 0..1000 {
            let logits: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
            let d = route_logits(&logits, 4, 2).unwrap();
            assert!(load_balance_loss(&d, 0.01).unwrap() >= 0.01 - 1e-15);
        }
    }

    #[test]
    fn multi_token_bound_holds_on_average() {
        let mut rng = substream(22, "lb-bound");
        let mut total = 0.0;
        for _ in 0..1000 {
            let logits: Vec<f64> = (0..16 * 4).map(|_| StandardNormal.sample(&mut rng)).collect();
            let d = route_logits(&logits, 4, 2).unwrap();
            total += load_balance_loss(&d, 0.01).unwrap();
        }
        assert!(total / 1000.0 >= 0.01);
    }

    #[test]
    fn multi_token_bound_fails_pointwise() {
        // Every token's runner-up is expert 3, which never dominates: it is
        // selected most often while carrying little score mass.
        let rows = [[0.97, 0.005, 0.005, 0.02], [0.97, 0.005, 0.005, 0.02], [0.005, 0.97, 0.005, 0.02], [0.005, 0.005, 0.97, 0.02]];
        let scores: Vec<f64> = rows.iter().flatten().copied().collect();
        let d = route_topk(&scores, 4, 2).unwrap();
        assert_eq!(d.counts(), vec![2, 1, 1, 4]);
        let l = load_balance_loss(&d, 0.01).unwrap();
        assert!((l - 0.0077375).abs() < 1e-12);
    }

    #[test]
    fn zero_experts_are_identity() {
        let mut rng = substream(5, "moe");
        let experts = vec![Expert::zeros(3, 4); 4];
        let router = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bank = ExpertBank::new(experts, router).unwrap();
        let toks = TokenSequence::new(3, (0..6).map(|i| i as f64 * 0.3).collect(), vec![[0, 0, 0], [0, 0, 1]], [1, 1, 2])
            .unwrap();
        let (out, _) = moe_ffn(&toks, &bank, 2).unwrap();
        assert_eq!(out.tokens, toks.tokens);
    }

    #[test]
    fn single_expert_has_unit_gate() {
        let mut rng = substream(6, "moe");
        let e = Expert::random(&mut rng, 3, 5);
        let bank = ExpertBank::new(vec![e.clone()], vec![0.2, -0.1, 0.4]).unwrap();
        let u = vec![0.5, -1.0, 2.0];
        let toks = TokenSequence::new(3, u.clone(), vec![[0, 0, 0]], [1, 1, 1]).unwrap();
        let (out, d) = moe_ffn(&toks, &bank, 1).unwrap();
        assert_eq!(d.gates(0), &[1.0]);
        let f = e.forward(&u, 1);
        for j in 0..3 {
            assert!((out.tokens[j] - (u[j] + f[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_experts_match_dense_oracle() {
        let mut rng = substream(7, "moe");
        let dim = 3;
        let experts: Vec<Expert> = (0..4)
            .map(|_| Expert { activation: Activation::Identity, ..Expert::random(&mut rng, dim, dim) })
            .collect();
        let router: Vec<f64> = (0..dim * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bank = ExpertBank::new(experts.clone(), router.clone()).unwrap();
        let t = 6;
        let u: Vec<f64> = (0..t * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let toks = TokenSequence::new(dim, u.clone(), TokenSequence::grid_positions([1, 2, 3]), [1, 2, 3]).unwrap();
        let (out, _) = moe_ffn(&toks, &bank, 2).unwrap();
        for r in 0..t {
            let x = &u[r * dim..(r + 1) * dim];
            let mut logits: Vec<f64> =
                (0..4).map(|i| (0..dim).map(|c| x[c] * router[c * 4 + i]).sum()).collect();
            softmax_in_place(&mut logits, None);
            let mut idx: Vec<usize> = (0..4).collect();
            idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
            let mut want = x.to_vec();
            for &i in &idx[..2] {
                let e = &experts[i];
                let h: Vec<f64> = (0..dim).map(|j| (0..dim).map(|c| x[c] * e.w1[c * dim + j]).sum::<f64>() + e.b1[j]).collect();
                for j in 0..dim {
                    want[j] += logits[i] * ((0..dim).map(|c| h[c] * e.w2[c * dim + j]).sum::<f64>() + e.b2[j]);
                }
            }
            for j in 0..dim {
                assert!((out.tokens[r * dim + j] - want[j]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn exactly_k_nonzero_gates(logits in proptest::collection::vec(-5.0f64..5.0, 4 * 8), k in 1usize..=4) {
            let d = route_logits(&logits, 4, k).unwrap();
            for t in 0..8 {
                prop_assert_eq!(d.gates(t).iter().filter(|&&g| g != 0.0).count(), k);
                prop_assert!((d.scores(t).iter().sum::<f64>() - 1.0).abs() < 1e-10);
                for &i in d.selected(t) {
                    prop_assert_eq!(d.gates(t)[i], d.scores(t)[i]);
                }
            }
        }
    }
}
