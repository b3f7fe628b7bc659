//! Neighborhood (windowed) attention over a `(t, h, w)` token grid.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DreamerError, Result};
use crate::latent::TokenSequence;

/// Odd neighborhood extents along `(t, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Window {
    pub const fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }

    pub fn check(&self) -> Result<()> {
        if self.extents().iter().any(|&e| e == 0 || e % 2 == 0) {
            return Err(DreamerError::BadWindow(self.extents()));
        }
        Ok(())
    }

    /// A window that covers any grid up to `grid`.
    pub fn covering(grid: [usize; 3]) -> Self {
        let odd = |n: usize| if n % 2 == 0 { n + 1 } else { n.max(1) };
        Self::new(odd(grid[0]), odd(grid[1]), odd(grid[2]))
    }
}

impl Default for Window {
    fn default() -> Self {
        Self::new(3, 7, 7)
    }
}

/// Key ranges per axis for a query at `pos`. Near a border the window is
/// shifted inward rather than truncated, so interior and border queries see
/// the same number of keys whenever the grid is large enough.
pub fn neighborhood(pos: [usize; 3], grid: [usize; 3], window: Window) -> [Range<usize>; 3] {
    let ext = window.extents();
    std::array::from_fn(|a| {
        let w = ext[a].min(grid[a]);
        let r = ext[a] / 2;
        let start = pos[a].saturating_sub(r).min(grid[a] - w);
        start..start + w
    })
}

/// Dense `n x n` admissibility mask (row = query).
pub fn neighborhood_mask(positions: &[[usize; 3]], grid: [usize; 3], window: Window) -> Vec<bool> {
    let n = positions.len();
    let mut mask = vec![false; n * n];
    for (i, &p) in positions.iter().enumerate() {
        let nb = neighborhood(p, grid, window);
        for (j, k) in positions.iter().enumerate() {
            mask[i * n + j] = (0..3).all(|a| nb[a].contains(&k[a]));
        }
    }
    mask
}

fn check_qkv(q: &TokenSequence, k: &TokenSequence, v: &TokenSequence, heads: usize) -> Result<usize> {
    if q.dim != k.dim || q.dim != v.dim || q.positions != k.positions || k.positions != v.positions {
        return Err(DreamerError::ShapeMismatch("q, k, v disagree on dim or positions".into()));
    }
    if heads == 0 || q.dim % heads != 0 {
        return Err(DreamerError::ShapeMismatch(format!("dim {} not divisible by {heads} heads", q.dim)));
    }
    Ok(q.dim / heads)
}

fn grid_lookup(seq: &TokenSequence) -> Result<Vec<Option<usize>>> {
    let [gt, gh, gw] = seq.grid;
    let mut lut = vec![None; gt * gh * gw];
    for (i, &[t, h, w]) in seq.positions.iter().enumerate() {
        if t >= gt || h >= gh || w >= gw {
            return Err(DreamerError::ShapeMismatch(format!("position {:?} outside grid", [t, h, w])));
        }
        lut[(t * gh + h) * gw + w] = Some(i);
    }
    Ok(lut)
}

fn attend(
    q: &TokenSequence,
    k: &TokenSequence,
    v: &TokenSequence,
    heads: usize,
    keys_of: impl Fn(usize) -> Vec<usize> + Sync,
) -> Result<TokenSequence> {
    let hd = check_qkv(q, k, v, heads)?;
    let dim = q.dim;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; q.tokens.len()];
    out.par_chunks_mut(dim).enumerate().try_for_each(|(i, row)| {
        let keys = keys_of(i);
        if keys.is_empty() {
            return Err(DreamerError::EmptyNeighborhood(i));
        }
        let qi = q.token(i);
        let mut w = vec![0.0; keys.len()];
        for h in 0..heads {
            let r = h * hd..(h + 1) * hd;
            let mut m = f64::NEG_INFINITY;
            for (s, &j) in w.iter_mut().zip(&keys) {
                *s = qi[r.clone()].iter().zip(&k.token(j)[r.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale;
                m = m.max(*s);
            }
            let mut z = 0.0;
            for s in &mut w {
                *s = (*s - m).exp();
                z += *s;
            }
            for (s, &j) in w.iter().zip(&keys) {
                let p = s / z;
                for (o, x) in row[r.clone()].iter_mut().zip(&v.token(j)[r.clone()]) {
                    *o += p * x;
                }
            }
        }
        Ok(())
    })?;
    Ok(TokenSequence { dim, tokens: out, positions: q.positions.clone(), grid: q.grid })
}

/// Multi-head scaled dot-product attention restricted to each query's
/// clamped neighborhood.
pub fn windowed_attention(
    q: &TokenSequence,
    k: &TokenSequence,
    v: &TokenSequence,
    window: Window,
    heads: usize,
) -> Result<TokenSequence> {
    window.check()?;
    let lut = grid_lookup(k)?;
    let [_, gh, gw] = k.grid;
    attend(q, k, v, heads, |i| {
        let [rt, rh, rw] = neighborhood(q.positions[i], q.grid, window);
        let mut keys = Vec::with_capacity(rt.len() * rh.len() * rw.len());
        for t in rt {
            for h in rh.clone() {
                for w in rw.clone() {
                    if let Some(j) = lut[(t * gh + h) * gw + w] {
                        keys.push(j);
                    }
                }
            }
        }
        keys
    })
}

/// Full attention over all tokens.
pub fn dense_attention(q: &TokenSequence, k: &TokenSequence, v: &TokenSequence, heads: usize) -> Result<TokenSequence> {
    let n = k.len();
    attend(q, k, v, heads, |_| (0..n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn random_seq<R: Rng>(rng: &mut R, grid: [usize; 3], dim: usize) -> TokenSequence {
        let positions = TokenSequence::grid_positions(grid);
        let tokens = (0..positions.len() * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        TokenSequence::new(dim, tokens, positions, grid).unwrap()
    }

    #[test]
    fn covering_window_equals_dense() {
        let mut rng = substream(9, "attn");
        let grid = [2, 3, 4];
        let (q, k, v) = (random_seq(&mut rng, grid, 8), random_seq(&mut rng, grid, 8), random_seq(&mut rng, grid, 8));
        let a = windowed_attention(&q, &k, &v, Window::new(3, 7, 7), 2).unwrap();
        let b = dense_attention(&q, &k, &v, 2).unwrap();
        for (x, y) in a.tokens.iter().zip(&b.tokens) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_window_returns_values() {
        let mut rng = substream(10, "attn");
        let grid = [2, 3, 3];
        let (q, k, v) = (random_seq(&mut rng, grid, 4), random_seq(&mut rng, grid, 4), random_seq(&mut rng, grid, 4));
        let a = windowed_attention(&q, &k, &v, Window::new(1, 1, 1), 1).unwrap();
        assert_eq!(a.tokens, v.tokens);
    }

    #[test]
    fn hand_set_grid_matches_brute_force() {
        // 1x3x3 grid, one head of dim 2, window (1,3,3) restricted further
        // by clamping: every query sees all nine keys.
        let grid = [1, 3, 3];
        let positions = TokenSequence::grid_positions(grid);
        let q: Vec<f64> = (0..9).flat_map(|i| [i as f64 * 0.1, 1.0 - i as f64 * 0.05]).collect();
        let k: Vec<f64> = (0..9).flat_map(|i| [(i % 3) as f64 * 0.3, (i / 3) as f64 * -0.2]).collect();
        let v: Vec<f64> = (0..9).flat_map(|i| [i as f64, (i * i) as f64 * 0.1]).collect();
        let mk = |d: Vec<f64>| TokenSequence::new(2, d, positions.clone(), grid).unwrap();
        let out = windowed_attention(&mk(q.clone()), &mk(k.clone()), &mk(v.clone()), Window::new(1, 3, 3), 1).unwrap();
        for i in 0..9 {
            let s: Vec<f64> = (0..9)
                .map(|j| (q[2 * i] * k[2 * j] + q[2 * i + 1] * k[2 * j + 1]) / 2f64.sqrt())
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for c in 0..2 {
                let want: f64 = (0..9).map(|j| s[j].exp() / z * v[2 * j + c]).sum();
                assert!((out.tokens[2 * i + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn window_is_clamped_inside_grid() {
        let nb = neighborhood([0, 0, 9], [4, 10, 10], Window::new(3, 5, 5));
        assert_eq!(nb, [0..3, 0..5, 5..10]);
        let nb = neighborhood([2, 5, 5], [4, 10, 10], Window::new(3, 5, 5));
        assert_eq!(nb, [1..4, 3..8, 3..8]);
    }

    #[test]
    fn even_window_rejected() {
        let mut rng = substream(1, "attn");
        let s = random_seq(&mut rng, [1, 2, 2], 2);
        assert!(matches!(
            windowed_attention(&s, &s, &s, Window::new(1, 2, 3), 1),
            Err(DreamerError::BadWindow(_))
        ));
    }

    #[test]
    fn mask_contains_self() {
        let grid = [3, 4, 5];
        let pos = TokenSequence::grid_positions(grid);
        let m = neighborhood_mask(&pos, grid, Window::new(1, 3, 3));
        let n = pos.len();
        assert!((0..n).all(|i| m[i * n + i]));
        assert_eq!(m[..n].iter().filter(|&&b| b).count(), 9);
    }
}
