//! Matrix-free HODLR(k) approximation by randomized peeling.
//!
//! The target matrix is reached only through blocked products with `A` and
//! `A^T` ([`linops::LinearOperator`]). Peeling recovers the off-diagonal
//! low-rank blocks level by level ([`peel`]), using perforated Gaussian
//! sketches ([`sketch`]) and either Generalized Nystrom or randomized SVD
//! ([`lowrank`]) per block, and returns a [`hodlr::HodlrMatrix`].

pub mod error;
pub mod hodlr;
pub mod linops;
pub mod lowrank;
pub mod peel;
pub mod par;
pub mod rng;
pub mod sketch;
pub mod svd;

pub use error::{Error, Result};
