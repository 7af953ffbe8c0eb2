//! Training laboratory for stochastic batch augmentation on small
//! fully-connected classifiers.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`]: dense f64 tensors with reverse-mode differentiation on an
//!   explicit tape, plus a finite-difference gradient oracle.
//! - [`network`]: layered MLP classifiers with an explicit split point `k`
//!   separating the input-side mapping from the output-side mapping.
//! - [`scheduler`]: the Bernoulli batch scheduler emitting lambda in {0,1}
//!   with P(1) = cos(omega).
//! - [`vicinity`]: latent-space virtual points around reference activations
//!   (projected clipped Gaussian noise and feature deletion) and the random
//!   orthonormal basis behind the projection.
//! - [`trainer`]: the combined objective (mean cross-entropy on raw rows
//!   plus an eta-weighted mean KL of virtual predictions against detached
//!   reference predictions), SGD with momentum, and the full training loop.
//! - [`inference`]: argmax and majority-vote prediction and evaluation.
//! - [`data`]: IDX and delimited-text loaders, synthetic generators, and
//!   seeded batch plans.
//!
//! All losses use natural logarithms. The base of the KL term only rescales
//! the balance weight eta, so no base-2 variant ships.
//!
//! Every random decision draws from a named, isolated stream ([`rng`]), so
//! runs are bit-reproducible from their seed set and unused features never
//! perturb live ones.

pub mod data;
pub mod error;
pub mod inference;
pub mod network;
pub mod rng;
pub mod scheduler;
pub mod tensor;
pub mod trainer;
pub mod vicinity;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
