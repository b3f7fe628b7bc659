//! Hashed text embeddings and the moving-square toy video set.

use rand::Rng;

use super::{ConditioningBundle, DiTConfig, Result};
use crate::latent::{codec_encode, LatentTensor, VideoTensor};

/// Deterministic bag-of-words embedding: each lowercase alphanumeric word
/// adds `±1` to a hashed slot; the result is L2-normalised.
pub fn text_embedding(prompt: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    if dim == 0 {
        return v;
    }
    for word in prompt.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.to_lowercase().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Latent of the clip's first frame alone.
pub fn first_frame_latent(video: &VideoTensor, cfg: &DiTConfig) -> Result<LatentTensor> {
    let first = VideoTensor::new(1, video.height, video.width, video.channels, video.frame(0).to_vec())?;
    Ok(codec_encode(&first, cfg.ratios)?)
}

/// Conditioning with text and first frame but no control latents.
pub fn toy_bundle(video: &VideoTensor, prompt: &str, cfg: &DiTConfig) -> Result<ConditioningBundle> {
    Ok(ConditioningBundle {
        text_embedding: text_embedding(prompt, cfg.text_dim),
        first_frame_latent: first_frame_latent(video, cfg)?,
        control_latents: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyClip {
    pub video: VideoTensor,
    pub prompt: String,
}

/// `n` clips of a bright `side x side` square sliding one pixel per frame
/// in one of eight directions (clamped at the border) on a dark background.
pub fn moving_squares<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    frames: usize,
    size: usize,
    side: usize,
) -> Vec<ToyClip> {
    let dirs: [(i64, i64, &str); 8] = [
        (1, 0, "right"),
        (-1, 0, "left"),
        (0, 1, "down"),
        (0, -1, "up"),
        (1, 1, "down right"),
        (-1, 1, "down left"),
        (1, -1, "up right"),
        (-1, -1, "up left"),
    ];
    let span = size.saturating_sub(side) as i64;
    (0..n)
        .map(|_| {
            let (dx, dy, name) = dirs[rng.random_range(0..dirs.len())];
            let x0 = rng.random_range(0..=span);
            let y0 = rng.random_range(0..=span);
            let video = VideoTensor::from_fn(frames, size, size, 1, |t, y, x, _| {
                let sx = (x0 + dx * t as i64).clamp(0, span) as usize;
                let sy = (y0 + dy * t as i64).clamp(0, span) as usize;
                if (sx..sx + side).contains(&x) && (sy..sy + side).contains(&y) {
                    1.0
                } else {
                    0.0
                }
            });
            ToyClip { video, prompt: format!("a square moves {name}") }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn embedding_is_deterministic_and_unit() {
        let a = text_embedding("A square moves LEFT", 16);
        assert_eq!(a, text_embedding("a square moves left", 16));
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_ne!(a, text_embedding("a square moves right", 16));
        assert!(text_embedding("", 8).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn squares_have_constant_area() {
        let clips = moving_squares(&mut substream(1, "toy"), 20, 5, 8, 3);
        for c in &clips {
            for t in 0..5 {
                assert_eq!(c.video.frame(t).iter().sum::<f64>(), 9.0);
            }
        }
    }

    #[test]
    fn first_frame_latent_has_one_frame() {
        let cfg = DiTConfig::desk();
        let clip = &moving_squares(&mut substream(2, "toy"), 1, 5, 8, 3)[0];
        let l = first_frame_latent(&clip.video, &cfg).unwrap();
        assert_eq!(l.dims(), [1, 4, 4, cfg.latent_channels()]);
    }
}
