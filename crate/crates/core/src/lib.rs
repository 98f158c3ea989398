//! SCARE: sensor calibration with a compact transformer.

pub mod config;
pub mod data;
pub mod eba;
pub mod error;
pub mod eval;
pub mod hash;
pub mod model;
pub mod numerics;
pub mod slp;
pub mod train;

pub use error::{Error, NumericFailure, Result};

// The guide's snippets run as doc-tests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/lenses.md")]
    struct Lenses;
    #[doc = include_str!("../../../book/src/hashing.md")]
    struct Hashing;
    #[doc = include_str!("../../../book/src/attention.md")]
    struct Attention;
    #[doc = include_str!("../../../book/src/model.md")]
    struct Model;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
