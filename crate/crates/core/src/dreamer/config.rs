use serde::{Deserialize, Serialize};

use super::{DreamerError, Result, RopeAxes, Window};
use crate::latent::{Patch, Ratios};

/// Architecture of a [`DiT`](super::DiT).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiTConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub window: Window,
    pub n_experts: usize,
    pub top_k: usize,
    pub alpha: f64,
    pub renormalize_gates: bool,
    pub ffn_hidden: usize,
    pub rope: RopeAxes,
    pub ratios: Ratios,
    pub patch: Patch,
    /// Channels of the pixel-space video.
    pub video_channels: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    /// Hidden widths of the condition compressor; empty means one linear map.
    pub fuse_hidden: Vec<usize>,
    pub n_controls: usize,
}

impl DiTConfig {
    /// Two-layer, 32-wide configuration for 8x8 single-channel clips.
    pub fn desk() -> Self {
        Self {
            depth: 2,
            dim: 32,
            heads: 2,
            window: Window::default(),
            n_experts: 4,
            top_k: 2,
            alpha: 0.01,
            renormalize_gates: false,
            ffn_hidden: 64,
            rope: RopeAxes::new(4, 6, 6),
            ratios: Ratios::new(2, 2, 2),
            patch: Patch::new(1, 2, 2),
            video_channels: 1,
            text_dim: 16,
            time_dim: 16,
            fuse_hidden: Vec::new(),
            n_controls: 2,
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.video_channels * self.ratios.volume()
    }

    /// Width of one patch token before compression.
    pub fn token_dim(&self) -> usize {
        self.latent_channels() * self.patch.volume()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DreamerError::BadConfig(m));
        if self.depth == 0 || self.dim == 0 {
            return bad("depth and dim must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return bad(format!("top_k {} with {} experts", self.top_k, self.n_experts));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha {}", self.alpha));
        }
        if self.ffn_hidden == 0 || self.time_dim % 2 != 0 || self.time_dim == 0 || self.text_dim == 0 {
            return bad("ffn_hidden, text_dim and an even time_dim must be positive".into());
        }
        if self.ratios.volume() == 0 || self.patch.volume() == 0 || self.video_channels == 0 {
            return bad("ratios, patch and channels must be positive".into());
        }
        self.window.check()?;
        self.rope.check(self.head_dim())?;
        Ok(())
    }
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self::desk()
    }
}
