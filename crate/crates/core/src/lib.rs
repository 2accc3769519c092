//! Continual causal representation learning on synthetic multi-domain data.

pub mod elbo;
pub mod experiment;
pub mod gem;
pub mod identcheck;
pub mod io;
pub mod linalg;
pub mod mcc;
pub mod ndgrad;
pub mod nets;
pub mod rng;
pub mod synthgen;
pub mod trainer;
