//! Capsule-network routing with negation-invariance verification.
//!
//! The crate implements routing-by-agreement and EM routing (with and without
//! the symmetry-breaking bias terms), a reverse-mode differentiation graph to
//! train them, a property fuzzer that checks the negation invariance of the
//! bias-free algorithms layer by layer, and the experiment drivers behind the
//! `capsroute` command-line tool.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod capsnet;
pub mod data;
pub mod error;
pub mod experiments;
pub mod rng;
pub mod routing;
pub mod tensor;
pub mod training;
pub mod verifier;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
