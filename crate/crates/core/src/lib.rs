//! Theory and tooling for repetition in text generation under a Markov
//! generation model.
//!
//! The crate computes the Average Repetition Probability (ARP) of a bigram
//! transition model, its spectral and inflow/outflow upper bounds, applies
//! decoding transforms to next-token distributions, scores generated text with
//! repetition metrics, learns byte-pair and rebalanced encodings, and checks the
//! concentration of ARP under per-step perturbations by Monte Carlo.

pub mod bounds;
pub mod encoding;
pub mod error;
pub mod experiments;
pub mod io;
pub mod linalg;
pub mod markov;
pub mod metrics;
pub mod perturb;
pub mod sampling;
pub mod scalar;

pub use error::{Error, Precondition, Result};
pub use markov::{TransitionModel, Vocabulary};
pub use scalar::Real;

/// Double-precision dense matrix, the working type of the theory modules.
pub type Matrix = linalg::Matrix<f64>;
