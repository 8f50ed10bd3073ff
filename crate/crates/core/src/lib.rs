//! Decentralized flow-matching diffusion at desk scale.
//!
//! K expert denoisers are trained in isolation on disjoint data clusters and
//! fused at sampling time by a noise-aware router. An exact brute-force
//! oracle over small discrete datasets provides ground truth for the marginal
//! velocity field and its per-cluster decomposition.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod container;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod flow;
pub mod numeric;
pub mod oracle;
pub mod orchestrator;
pub mod params;
pub mod partition;
pub mod pipeline;
pub mod router;
pub mod sampler;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
