//! Few-shot class-incremental learning with slow and fast feature spaces.
//!
//! An embedding network is trained on a large base task and then updated on a
//! sequence of few-shot tasks. Knowledge is retained by distilling against the
//! previous session's model, either on the raw embedding or per DCT frequency
//! group, and two lineages updated at different speeds are composed for
//! nearest-class-mean classification.

pub mod cli;
pub mod config;
pub mod dct;
pub mod embed;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod protocol;
pub mod spaces;
pub mod trainer;

pub use error::{Error, Result};
