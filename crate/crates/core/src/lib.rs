//! α-divergence in-place knowledge distillation for weight-sharing supernets.
//!
//! - [`divergence`]: KL family, α-divergences, the adaptive max objective and
//!   its clipped logit gradients.
//! - [`nn`]: a small f64 MLP whose layers can be run at any leading sub-width.
//! - [`supernet`]: width search space, sandwich sampling and the in-place
//!   distillation training step.
//! - [`search`]: evolutionary search over sub-networks and Pareto fronts.
//! - [`data`]: synthetic blobs, IDX ingestion and batching.

pub mod data;
pub mod divergence;
pub mod nn;
pub mod search;
pub mod supernet;
