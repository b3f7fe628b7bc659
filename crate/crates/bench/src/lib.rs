//! Fixture builders shared by the criterion benches.

use rand::Rng;
use rand_distr::StandardNormal;
use worldforge::dreamer::{moving_squares, toy_bundle, DiT, DiTConfig, TrainSample};
use worldforge::geometry::{CameraIntrinsics, DepthMap, Image};
use worldforge::latent::{codec_encode, LatentTensor, TokenSequence};
use worldforge::rng::substream;

/// Random token grid with values in `[-1, 1)`.
pub fn token_grid(seed: u64, grid: [usize; 3], dim: usize) -> TokenSequence {
    let mut rng = substream(seed, "bench.tokens");
    let positions = TokenSequence::grid_positions(grid);
    let tokens = (0..positions.len() * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    TokenSequence::new(dim, tokens, positions, grid).expect("consistent grid")
}

pub fn desk_model(seed: u64) -> DiT {
    DiT::new(DiTConfig::desk(), &mut substream(seed, "bench.model")).expect("desk config is valid")
}

/// One moving-square training sample for `model`.
pub fn train_sample(model: &DiT, seed: u64) -> TrainSample {
    let cfg = model.config();
    let clip = moving_squares(&mut substream(seed, "bench.toy"), 1, 5, 8, 3).remove(0);
    let z1 = codec_encode(&clip.video, cfg.ratios).expect("toy clip encodes");
    let mut rng = substream(seed, "bench.noise");
    let z0 = LatentTensor::from_fn(z1.frames, z1.height, z1.width, z1.channels, |_, _, _, _| rng.sample(StandardNormal));
    let bundle = toy_bundle(&clip.video, &clip.prompt, cfg).expect("toy bundle");
    TrainSample { z0, z1, t: 0.5, bundle }
}

pub struct Scene {
    pub camera: CameraIntrinsics,
    pub frame: Image,
    pub depth: DepthMap,
    pub arm: Vec<bool>,
}

/// Textured frame over a tilted plane, with a rectangular arm region.
pub fn scene(width: usize, height: usize) -> Scene {
    let (w, h) = (width as f64, height as f64);
    let camera = CameraIntrinsics::new(w, w, (w - 1.0) / 2.0, (h - 1.0) / 2.0, width, height).expect("camera");
    let frame = Image::from_fn(width, height, 3, |x, y, c| ((x * 7 + y * 13 + c * 5) % 17) as f64 / 16.0);
    let depth = (0..width * height).map(|i| 2.0 + (i / width) as f64 / h).collect();
    let depth = DepthMap::new(width, height, depth).expect("depth");
    let arm = (0..width * height).map(|i| (i % width) < width / 4 && (i / width) > height / 2).collect();
    Scene { camera, frame, depth, arm }
}
