//! Neural inner bounds on the achievable rate region of two-user additive
//! multiple-access channels.
//!
//! Small critic networks maximise variational lower bounds on the KL
//! divergences in the mutual-information decompositions, histogram
//! χ² estimates bound the subtracted terms from above, and a generator
//! network shapes the channel inputs to maximise the resulting rates.

pub mod channels;
pub mod cli;
pub mod divergence;
pub mod error;
pub mod estimators;
pub mod nit;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
