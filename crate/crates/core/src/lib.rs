//! Desk-scale world-model data engine.
//!
//! The crate bundles the pieces needed to synthesise and vet robot-learning
//! data: a flow-matching mixture-of-experts video transformer over toy
//! latents, SE(3) view/action transfer with double reprojection, an inverse
//! dynamics model trained on synthetic arm renders, differentiable system
//! identification of actuator parameters, demonstration retargeting, and
//! composite quality gating.

pub mod actgen;
pub mod autodiff;
pub mod dreamer;
pub mod gate;
pub mod geometry;
pub mod idm;
pub mod latent;
pub mod nn;
pub mod rng;
pub mod sysid;

pub use autodiff::{Graph, Tensor, Var};
