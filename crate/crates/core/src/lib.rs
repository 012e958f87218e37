//! Unified continuous diffusion over attributed 3D graphs.
//!
//! One variance-exploding diffusion runs jointly over node coordinates and
//! categorical type embeddings. The crate provides the noise schedule, an
//! SE(3)-equivariant denoiser trained through a hand-rolled reverse-mode
//! tape, the probability-flow ODE machinery for exact log-likelihoods with
//! Hutchinson divergence estimation, a reverse-SDE sampler with structure
//! metrics, and the trajectory statistics that downstream density-ratio
//! detectors consume.

pub mod autodiff;
pub mod denoiser;
pub mod error;
pub mod features;
pub mod graph;
pub mod mat;
pub mod pfode;
pub mod rng;
pub mod sampler;
pub mod schedule;
#[cfg(test)]
pub(crate) mod testutil;
pub mod trainer;

pub use error::{CoreError, Result};
pub use graph::{
    assemble_state, com_project, encode_types, ComplexGraph, JointState, NodeClass,
    PrototypeTables,
};
pub use mat::Mat;
pub use schedule::{Schedule, EPS_T};
