//! Estimating an expert's belief density from pairwise comparisons.
//!
//! Comparisons `w ≻ l` between candidates drawn from a sampling density `λ`
//! are simulated or collected, mapped to the unit cube, and used to train a
//! joint score model of winners and losers. Annealed Langevin dynamics with a
//! learned tempering field then draws samples from the belief estimate.

pub mod config;
pub mod densities;
pub mod density_eval;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod quadrature;
pub mod rum;
pub mod sampler;
pub mod tempering;
pub mod util;

pub use error::{Error, Result};

#[cfg(test)]
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
