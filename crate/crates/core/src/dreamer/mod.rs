//! Flow-matching mixture-of-experts diffusion transformer over video
//! latents.
//!
//! The standalone kernels ([`rope3d_apply`], [`windowed_attention`],
//! [`route_topk`], [`moe_ffn`], [`load_balance_loss`]) operate on plain
//! token sequences; [`DiT`] builds the same computations on an autodiff
//! [`Graph`](crate::Graph) for training.

mod attention;
mod config;
mod flow;
mod model;
mod moe;
mod rope;
mod toy;
mod train;

pub use attention::{dense_attention, neighborhood, neighborhood_mask, windowed_attention, Window};
pub use config::DiTConfig;
pub use flow::{euler_sample, flow_matching_loss, FnField, VelocityField};
pub use model::{concat_controls, condition_fuse, timestep_embedding, ConditioningBundle, DiT, Forward, TrainSample};
pub use moe::{load_balance_loss, moe_ffn, route_logits, route_topk, Activation, Expert, ExpertBank, GateDecision};
pub use rope::{rope3d_apply, rope_tables, rotate_half_matrix, RopeAxes};
pub use toy::{first_frame_latent, moving_squares, text_embedding, toy_bundle, ToyClip};
pub use train::{train_on_samples, train_step, write_metrics_csv, StepMetrics};

use crate::autodiff::AutodiffError;
use crate::latent::LatentError;

#[derive(Debug, thiserror::Error)]
pub enum DreamerError {
    #[error("head dim {head_dim} cannot be split into even rope partitions {axes:?}")]
    BadHeadDim { head_dim: usize, axes: [usize; 3] },
    #[error("window extents must be odd and >= 1, got {0:?}")]
    BadWindow([usize; 3]),
    #[error("query {0} has an empty attention neighborhood")]
    EmptyNeighborhood(usize),
    #[error("top-k of {k} requested from {n} experts")]
    KTooLarge { k: usize, n: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("load balance loss over an empty sequence")]
    EmptySequence,
    #[error("flow time {0} outside [0, 1]")]
    BadT(f64),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("non-finite value in {tensor}")]
    NonFinite { tensor: String },
    #[error("empty training batch")]
    EmptyBatch,
    #[error("sampling needs at least one step")]
    ZeroSteps,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(AutodiffError),
    #[error(transparent)]
    Latent(#[from] LatentError),
}

impl From<AutodiffError> for DreamerError {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::NonFinite { op } => DreamerError::NonFinite { tensor: op.to_string() },
            other => DreamerError::Autodiff(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, DreamerError>;
