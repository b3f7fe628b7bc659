//! Invertible video codec, patchification and multi-view layout.
//!
//! The codec is a lossless space-to-depth rearrangement standing in for a
//! learned video autoencoder: latent frame 0 holds video frame 0 alone and
//! every later latent frame folds `r_t` consecutive frames. Each spatial
//! `r_h x r_w` block is folded into channels, so a latent has
//! `C * r_t * r_h * r_w` channels. The unused temporal slots of latent frame
//! 0 are zero.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::nn::{Init, Linear, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum LatentError {
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("views disagree on {0}")]
    InconsistentViews(String),
    #[error("video file: {0}")]
    Io(String),
}

impl From<std::io::Error> for LatentError {
    fn from(e: std::io::Error) -> Self {
        LatentError::Io(e.to_string())
    }
}

type Result<T> = std::result::Result<T, LatentError>;

/// Temporal, height and width compression ratios.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratios {
    pub temporal: usize,
    pub height: usize,
    pub width: usize,
}

impl Ratios {
    pub const fn new(temporal: usize, height: usize, width: usize) -> Self {
        Self { temporal, height, width }
    }

    pub fn volume(&self) -> usize {
        self.temporal * self.height * self.width
    }
}

/// Patch extents `(t, h, w)` in latent cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Patch {
    pub const fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn volume(&self) -> usize {
        self.t * self.h * self.w
    }
}

macro_rules! grid_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            pub frames: usize,
            pub height: usize,
            pub width: usize,
            pub channels: usize,
            data: Vec<f64>,
        }

        impl $name {
            pub fn new(frames: usize, height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
                if frames * height * width * channels != data.len() {
                    return Err(LatentError::BadShape(format!(
                        "{}x{}x{}x{} does not hold {} values",
                        frames, height, width, channels, data.len()
                    )));
                }
                Ok(Self { frames, height, width, channels, data })
            }

            pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
                Self { frames, height, width, channels, data: vec![0.0; frames * height * width * channels] }
            }

            pub fn from_fn(
                frames: usize,
                height: usize,
                width: usize,
                channels: usize,
                mut f: impl FnMut(usize, usize, usize, usize) -> f64,
            ) -> Self {
                let mut data = Vec::with_capacity(frames * height * width * channels);
                for t in 0..frames {
                    for y in 0..height {
                        for x in 0..width {
                            for c in 0..channels {
                                data.push(f(t, y, x, c));
                            }
                        }
                    }
                }
                Self { frames, height, width, channels, data }
            }

            pub fn dims(&self) -> [usize; 4] {
                [self.frames, self.height, self.width, self.channels]
            }

            pub fn data(&self) -> &[f64] {
                &self.data
            }

            pub fn data_mut(&mut self) -> &mut [f64] {
                &mut self.data
            }

            pub fn into_data(self) -> Vec<f64> {
                self.data
            }

            #[inline]
            pub fn offset(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
                ((t * self.height + y) * self.width + x) * self.channels + c
            }

            pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f64 {
                self.data[self.offset(t, y, x, c)]
            }

            pub fn set(&mut self, t: usize, y: usize, x: usize, c: usize, v: f64) {
                let o = self.offset(t, y, x, c);
                self.data[o] = v;
            }

            /// Values of one frame, `(H, W, C)` row-major.
            pub fn frame(&self, t: usize) -> &[f64] {
                let n = self.height * self.width * self.channels;
                &self.data[t * n..(t + 1) * n]
            }

            pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
                let n = self.height * self.width * self.channels;
                &mut self.data[t * n..(t + 1) * n]
            }

            pub fn to_tensor(&self) -> Tensor {
                Tensor::new_allow_nonfinite(self.dims().to_vec(), self.data.clone()).expect("dims match data")
            }

            pub fn from_tensor(t: &Tensor) -> Result<Self> {
                match *t.shape() {
                    [a, b, c, d] => Self::new(a, b, c, d, t.data().to_vec()),
                    ref s => Err(LatentError::BadShape(format!("expected rank-4 tensor, got {s:?}"))),
                }
            }
        }
    };
}

grid_type!(
    /// Video frames `(T, H, W, C)` with values in `[0, 1]`.
    VideoTensor
);
grid_type!(
    /// Compressed video `(T', H', W', C')`.
    LatentTensor
);

impl VideoTensor {
    /// Clamps every value into `[0, 1]`.
    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Latent dimensions produced by [`codec_encode`].
pub fn latent_dims(video: [usize; 4], r: Ratios) -> Result<[usize; 4]> {
    let [t, h, w, c] = video;
    if r.temporal == 0 || r.height == 0 || r.width == 0 {
        return Err(LatentError::BadShape("ratios must be positive".into()));
    }
    if t == 0 || (t - 1) % r.temporal != 0 {
        return Err(LatentError::BadShape(format!("T={t} is not 1 mod {}", r.temporal)));
    }
    if h % r.height != 0 || w % r.width != 0 {
        return Err(LatentError::BadShape(format!("{h}x{w} not divisible by {}x{}", r.height, r.width)));
    }
    Ok([(t - 1) / r.temporal + 1, h / r.height, w / r.width, c * r.volume()])
}

/// Video frame index stored in temporal slot `dt` of latent frame `j`, or
/// `None` for the padding slots of latent frame 0.
fn source_frame(j: usize, dt: usize, r_t: usize) -> Option<usize> {
    match (j, dt) {
        (0, 0) => Some(0),
        (0, _) => None,
        _ => Some(1 + (j - 1) * r_t + dt),
    }
}

pub fn codec_encode(video: &VideoTensor, r: Ratios) -> Result<LatentTensor> {
    let [lt, lh, lw, lc] = latent_dims(video.dims(), r)?;
    let c = video.channels;
    let mut out = LatentTensor::zeros(lt, lh, lw, lc);
    for j in 0..lt {
        for dt in 0..r.temporal {
            let Some(t) = source_frame(j, dt, r.temporal) else { continue };
            for y in 0..lh {
                for x in 0..lw {
                    for dy in 0..r.height {
                        for dx in 0..r.width {
                            let ch0 = ((dt * r.height + dy) * r.width + dx) * c;
                            let src = video.offset(t, y * r.height + dy, x * r.width + dx, 0);
                            let dst = out.offset(j, y, x, ch0);
                            out.data[dst..dst + c].copy_from_slice(&video.data[src..src + c]);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn codec_decode(latent: &LatentTensor, r: Ratios) -> Result<VideoTensor> {
    if latent.frames == 0 || r.volume() == 0 || latent.channels % r.volume() != 0 {
        return Err(LatentError::BadShape(format!(
            "{} latent channels not divisible by {}",
            latent.channels,
            r.volume()
        )));
    }
    let c = latent.channels / r.volume();
    let t_out = (latent.frames - 1) * r.temporal + 1;
    let mut out = VideoTensor::zeros(t_out, latent.height * r.height, latent.width * r.width, c);
    for j in 0..latent.frames {
        for dt in 0..r.temporal {
            let Some(t) = source_frame(j, dt, r.temporal) else { continue };
            for y in 0..latent.height {
                for x in 0..latent.width {
                    for dy in 0..r.height {
                        for dx in 0..r.width {
                            let ch0 = ((dt * r.height + dy) * r.width + dx) * c;
                            let src = latent.offset(j, y, x, ch0);
                            let dst = out.offset(t, y * r.height + dy, x * r.width + dx, 0);
                            out.data[dst..dst + c].copy_from_slice(&latent.data[src..src + c]);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Flattened patch tokens with their `(t, h, w)` grid positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub dim: usize,
    /// `len * dim` values, token-major.
    pub tokens: Vec<f64>,
    pub positions: Vec<[usize; 3]>,
    /// Token grid extents `(t, h, w)`.
    pub grid: [usize; 3],
}

impl TokenSequence {
    pub fn new(dim: usize, tokens: Vec<f64>, positions: Vec<[usize; 3]>, grid: [usize; 3]) -> Result<Self> {
        if tokens.len() != dim * positions.len() || positions.len() != grid.iter().product::<usize>() {
            return Err(LatentError::BadShape(format!(
                "{} values, {} positions, dim {dim}, grid {grid:?}",
                tokens.len(),
                positions.len()
            )));
        }
        Ok(Self { dim, tokens, positions, grid })
    }

    /// Row-major positions over `grid`.
    pub fn grid_positions(grid: [usize; 3]) -> Vec<[usize; 3]> {
        let mut out = Vec::with_capacity(grid.iter().product());
        for t in 0..grid[0] {
            for h in 0..grid[1] {
                for w in 0..grid[2] {
                    out.push([t, h, w]);
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }

    pub fn token_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.tokens[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new_allow_nonfinite(vec![self.len(), self.dim], self.tokens.clone()).expect("consistent")
    }
}

pub fn patchify(latent: &LatentTensor, p: Patch) -> Result<TokenSequence> {
    if p.volume() == 0 || latent.frames % p.t != 0 || latent.height % p.h != 0 || latent.width % p.w != 0 {
        return Err(LatentError::BadShape(format!(
            "latent {:?} not divisible by patch {:?}",
            latent.dims(),
            p
        )));
    }
    let grid = [latent.frames / p.t, latent.height / p.h, latent.width / p.w];
    let c = latent.channels;
    let dim = c * p.volume();
    let positions = TokenSequence::grid_positions(grid);
    let mut tokens = Vec::with_capacity(positions.len() * dim);
    for &[t, h, w] in &positions {
        for dt in 0..p.t {
            for dy in 0..p.h {
                for dx in 0..p.w {
                    let o = latent.offset(t * p.t + dt, h * p.h + dy, w * p.w + dx, 0);
                    tokens.extend_from_slice(&latent.data[o..o + c]);
                }
            }
        }
    }
    Ok(TokenSequence { dim, tokens, positions, grid })
}

pub fn unpatchify(seq: &TokenSequence, p: Patch, channels: usize) -> Result<LatentTensor> {
    if channels * p.volume() != seq.dim {
        return Err(LatentError::BadShape(format!(
            "token dim {} != {channels} channels x patch {:?}",
            seq.dim, p
        )));
    }
    let [gt, gh, gw] = seq.grid;
    let mut out = LatentTensor::zeros(gt * p.t, gh * p.h, gw * p.w, channels);
    for (i, &[t, h, w]) in seq.positions.iter().enumerate() {
        let tok = seq.token(i);
        let mut k = 0;
        for dt in 0..p.t {
            for dy in 0..p.h {
                for dx in 0..p.w {
                    let o = out.offset(t * p.t + dt, h * p.h + dy, w * p.w + dx, 0);
                    out.data[o..o + channels].copy_from_slice(&tok[k..k + channels]);
                    k += channels;
                }
            }
        }
    }
    Ok(out)
}

/// Lays views side by side along the width axis.
pub fn view_concat(views: &[VideoTensor]) -> Result<VideoTensor> {
    let first = views.first().ok_or_else(|| LatentError::InconsistentViews("empty view list".into()))?;
    for v in views {
        if (v.frames, v.height, v.channels) != (first.frames, first.height, first.channels) {
            return Err(LatentError::InconsistentViews(format!(
                "T/H/C {:?} vs {:?}",
                (v.frames, v.height, v.channels),
                (first.frames, first.height, first.channels)
            )));
        }
    }
    let width: usize = views.iter().map(|v| v.width).sum();
    let c = first.channels;
    let mut data = Vec::with_capacity(first.frames * first.height * width * c);
    for t in 0..first.frames {
        for y in 0..first.height {
            for v in views {
                let o = v.offset(t, y, 0, 0);
                data.extend_from_slice(&v.data[o..o + v.width * c]);
            }
        }
    }
    VideoTensor::new(first.frames, first.height, width, c, data)
}

/// Inverse of [`view_concat`] given the per-view widths.
pub fn view_split(video: &VideoTensor, widths: &[usize]) -> Result<Vec<VideoTensor>> {
    if widths.iter().sum::<usize>() != video.width || widths.is_empty() {
        return Err(LatentError::InconsistentViews(format!(
            "widths {widths:?} do not sum to {}",
            video.width
        )));
    }
    let c = video.channels;
    let mut start = 0;
    let mut out = Vec::with_capacity(widths.len());
    for &w in widths {
        let mut data = Vec::with_capacity(video.frames * video.height * w * c);
        for t in 0..video.frames {
            for y in 0..video.height {
                let o = video.offset(t, y, start, 0);
                data.extend_from_slice(&video.data[o..o + w * c]);
            }
        }
        out.push(VideoTensor::new(video.frames, video.height, w, c, data)?);
        start += w;
    }
    Ok(out)
}

/// Optional learned per-cell linear map from codec channels to a compact
/// channel count (16 in the reference configuration).
#[derive(Clone, Debug)]
pub struct ChannelProjection {
    pub linear: Linear,
}

impl ChannelProjection {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self { linear: Linear::new(store, "latent_proj", in_channels, out_channels, false, Init::Uniform, rng) }
    }

    pub fn project(&self, store: &ParamStore, latent: &LatentTensor) -> Result<LatentTensor> {
        if latent.channels != self.linear.fan_in {
            return Err(LatentError::BadShape(format!(
                "projection expects {} channels, got {}",
                self.linear.fan_in, latent.channels
            )));
        }
        let n = latent.frames * latent.height * latent.width;
        let data = self.linear.apply(store, latent.data(), n);
        LatentTensor::new(latent.frames, latent.height, latent.width, self.linear.fan_out, data)
    }
}

// ---- portable pixmap IO ---------------------------------------------

#[derive(Serialize, Deserialize)]
struct VideoManifest {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
}

/// Writes one 8-bit frame: `P6` for 3 channels, `P5` for 1 channel.
pub fn write_pnm<W: Write>(w: &mut W, frame: &[f64], height: usize, width: usize, channels: usize) -> Result<()> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return Err(LatentError::Io(format!("pixmaps support 1 or 3 channels, got {c}"))),
    };
    write!(w, "{magic}\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = frame.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads a binary `P5`/`P6` pixmap, returning `(height, width, channels, values)`.
pub fn read_pnm<R: Read>(r: R) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut r = BufReader::new(r);
    let mut header = Vec::new();
    while header.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(LatentError::Io("truncated pixmap header".into()));
        }
        let line = line.split('#').next().unwrap_or("");
        header.extend(line.split_whitespace().map(str::to_string));
    }
    let channels = match header[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(LatentError::Io(format!("unsupported pixmap magic {m}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|e| LatentError::Io(format!("pixmap header: {e}")));
    let (width, height, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
    if maxval != 255 {
        return Err(LatentError::Io(format!("only 8-bit pixmaps are supported, maxval {maxval}")));
    }
    let mut bytes = vec![0u8; width * height * channels];
    r.read_exact(&mut bytes)?;
    Ok((height, width, channels, bytes.into_iter().map(|b| b as f64 / 255.0).collect()))
}

/// Writes `frame_0000.ppm`, ... plus a `video.json` manifest into `dir`.
pub fn write_video_dir(dir: &Path, video: &VideoTensor) -> Result<()> {
    fs::create_dir_all(dir)?;
    let ext = if video.channels == 1 { "pgm" } else { "ppm" };
    for t in 0..video.frames {
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join(format!("frame_{t:04}.{ext}")))?);
        write_pnm(&mut f, video.frame(t), video.height, video.width, video.channels)?;
        f.flush()?;
    }
    let m = VideoManifest { frames: video.frames, height: video.height, width: video.width, channels: video.channels };
    fs::write(dir.join("video.json"), serde_json::to_string_pretty(&m).expect("serialisable"))?;
    Ok(())
}

pub fn read_video_dir(dir: &Path) -> Result<VideoTensor> {
    let m: VideoManifest = serde_json::from_str(&fs::read_to_string(dir.join("video.json"))?)
        .map_err(|e| LatentError::Io(format!("video.json: {e}")))?;
    let ext = if m.channels == 1 { "pgm" } else { "ppm" };
    let mut data = Vec::with_capacity(m.frames * m.height * m.width * m.channels);
    for t in 0..m.frames {
        let (h, w, c, px) = read_pnm(fs::File::open(dir.join(format!("frame_{t:04}.{ext}")))?)?;
        if (h, w, c) != (m.height, m.width, m.channels) {
            return Err(LatentError::Io(format!("frame {t} is {h}x{w}x{c}, manifest says otherwise")));
        }
        data.extend(px);
    }
    VideoTensor::new(m.frames, m.height, m.width, m.channels, data)
}
