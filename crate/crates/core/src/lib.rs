//! Desk-scale generalized representation autoencoders with a flow-matching
//! diffusion transformer, REPA alignment head and REPA-head guidance.
//!
//! Modules, bottom up:
//! - [`tensor`], [`graph`], [`params`], [`optim`], [`gradcheck`]: numerics
//! - [`data`]: procedural labeled image sets
//! - [`encoders`]: frozen toy encoders and multi-layer aggregation
//! - [`decoder`]: latent-to-pixel decoder and reconstruction metrics
//! - [`dit`]: toy diffusion transformer and training objective
//! - [`guidance`]: Euler sampler with CFG / AutoGuidance / REPA guidance
//! - [`metrics`]: Fréchet distances, probes, LDS, correlation, EP_FID@k
//! - [`checkpoint`]: binary tensor container

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod dit;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod guidance;
pub mod metrics;
pub mod graph;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::ParamSet;
pub use tensor::{Real, Tensor};
