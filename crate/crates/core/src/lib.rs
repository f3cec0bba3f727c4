//! Measure and mitigate gender bias in a language model's next-token
//! predictions.

pub mod assets;
pub mod baselines;
pub mod corpus;
pub mod error;
pub mod gateway;
pub mod lftf;
pub mod lm;
pub mod locator;
pub mod metrics;
pub mod testbed;
pub mod vocab;

pub use error::{Error, Result};
