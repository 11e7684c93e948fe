//! Synthetic multicarrier channel state information, PCA residual extraction
//! and kernel-based independence testing for channel-based key generation.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod dhsic;
pub mod error;
pub mod harness;
pub mod io;
pub mod pca;
pub mod report;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
