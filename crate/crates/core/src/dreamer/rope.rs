//! Three-axis rotary position embedding.

use serde::{Deserialize, Serialize};

use super::{DreamerError, Result};
use crate::autodiff::Tensor;
use crate::latent::TokenSequence;

/// Per-head channel split between the `t`, `h` and `w` axes. Each part must
/// be even; together they must equal the head dim.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeAxes {
    pub dims: [usize; 3],
    pub base: f64,
}

impl RopeAxes {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { dims: [t, h, w], base: 100.0 }
    }

    pub fn head_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn check(&self, head_dim: usize) -> Result<()> {
        if self.head_dim() != head_dim || self.dims.iter().any(|d| d % 2 != 0) {
            return Err(DreamerError::BadHeadDim { head_dim, axes: self.dims });
        }
        Ok(())
    }

    /// Rotation angle for every channel pair of one head at `pos`.
    fn angles(&self, pos: [usize; 3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.head_dim() / 2);
        for (axis, &d) in self.dims.iter().enumerate() {
            for i in 0..d / 2 {
                let freq = self.base.powf(-2.0 * i as f64 / d as f64);
                out.push(pos[axis] as f64 * freq);
            }
        }
        out
    }
}

/// Rotates each adjacent channel pair of every head by its position angle.
pub fn rope3d_apply(seq: &TokenSequence, heads: usize, axes: &RopeAxes) -> Result<TokenSequence> {
    if heads == 0 || seq.dim % heads != 0 {
        return Err(DreamerError::BadHeadDim { head_dim: seq.dim, axes: axes.dims });
    }
    let hd = seq.dim / heads;
    axes.check(hd)?;
    let mut out = seq.clone();
    for i in 0..seq.len() {
        let ang = axes.angles(seq.positions[i]);
        let tok = out.token_mut(i);
        for h in 0..heads {
            for (p, &a) in ang.iter().enumerate() {
                let j = h * hd + 2 * p;
                let (s, c) = a.sin_cos();
                let (x0, x1) = (tok[j], tok[j + 1]);
                tok[j] = x0 * c - x1 * s;
                tok[j + 1] = x0 * s + x1 * c;
            }
        }
    }
    Ok(out)
}

/// `(cos, sin)` tables of shape `[n, heads * head_dim]` such that the
/// rotation is `x * cos + (x R) * sin` with `R` from [`rotate_half_matrix`].
pub fn rope_tables(positions: &[[usize; 3]], heads: usize, axes: &RopeAxes) -> (Tensor, Tensor) {
    let hd = axes.head_dim();
    let dim = heads * hd;
    let mut cos = Vec::with_capacity(positions.len() * dim);
    let mut sin = Vec::with_capacity(positions.len() * dim);
    for &pos in positions {
        let ang = axes.angles(pos);
        for _ in 0..heads {
            for &a in &ang {
                let (s, c) = a.sin_cos();
                cos.extend([c, c]);
                sin.extend([s, s]);
            }
        }
    }
    let n = positions.len();
    (
        Tensor::new(vec![n, dim], cos).expect("finite"),
        Tensor::new(vec![n, dim], sin).expect("finite"),
    )
}

/// Block-diagonal matrix mapping each pair `(x0, x1)` to `(-x1, x0)`.
pub fn rotate_half_matrix(dim: usize) -> Tensor {
    let mut r = Tensor::zeros(&[dim, dim]);
    let d = r.data_mut();
    for i in 0..dim / 2 {
        d[(2 * i + 1) * dim + 2 * i] = -1.0;
        d[2 * i * dim + 2 * i + 1] = 1.0;
    }
    r
}
