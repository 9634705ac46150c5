//! A desk-scale laboratory for multi-query associative recall (MQAR).
//!
//! The crate bundles synthetic data generation, reference recall oracles,
//! forward passes for attention and gated-convolution sequence mixers,
//! exact-weight constructions that solve MQAR without training, a small
//! trainer for capacity sweeps, and recall-analysis formulas.

pub mod analysis;
pub mod constructions;
pub mod datagen;
pub mod error;
pub mod mixers;
pub mod numerics;
pub mod oracle;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{FilterBank, SeqTensor};

/// Token id. Vocabulary ids are `0..vocab`; generated data may use `vocab` as a pad id.
pub type Token = u32;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/oracles.md")]
    mod oracles {}
    #[doc = include_str!("../../../book/src/mixers.md")]
    mod mixers {}
    #[doc = include_str!("../../../book/src/constructions.md")]
    mod constructions {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
}
