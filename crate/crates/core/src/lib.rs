//! Universal adversarial perturbations on a small, dependency-light CNN stack.
//!
//! * [`autodiff`], [`models`]: a define-by-run tape and three surrogate
//!   architectures trained from scratch.
//! * [`attack`]: SPGD, SGA and the perturbation-aggregation variant, with
//!   momentum, Nesterov and ensemble extensions.
//! * [`losses`], [`diagnostics`]: objectives, fooling ratio, gradient
//!   stability and sign-op accounting.
//! * [`data`], [`experiments`]: IDX ingestion, synthetic corpora, batch
//!   schedules and the config-driven pipeline behind the `uap-sga` binary.

pub mod attack;
pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiments;
mod kernels;
pub mod losses;
pub mod models;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
