//! Amortized Bayesian inference for diffusion MRI compartment models.
//!
//! A conditional masked autoregressive flow, fed by a jointly trained MLP
//! summary network, is trained on prior-predictive simulations and then
//! returns posterior samples for any observed signal with a single pass.
//! Posterior samples are condensed into a MAP estimate, an uncertainty and an
//! ambiguity measure, and a degeneracy flag per parameter. An adaptive
//! Metropolis-within-Gibbs sampler with an offset-Gaussian likelihood serves
//! as the reference method.

pub mod error;
pub mod flow;
pub mod forward;
pub mod io;
pub mod mcmc;
pub mod posterior;
pub mod priors;
pub mod protocol;
pub mod rng;

pub use error::{Error, Result};
pub use forward::{ModelId, ParameterSpace, ParameterVector, Simulator};
pub use priors::PriorSpec;
pub use protocol::AcquisitionProtocol;
