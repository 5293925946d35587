//! Desk-scale laboratory for contrastive distillation of tiny autoregressive
//! language models.
//!
//! The crate trains a small student transformer against a teacher with the
//! skew-divergence contrastive objective family (SKL on teacher responses,
//! SRKL on student responses), the curriculum schedules for the skew
//! coefficient and the SRKL weight, batched on-policy data generation with a
//! replay buffer and a typical-acceptance speculative filter, and a set of
//! independent brute-force oracles (sequence enumeration, finite
//! differences, algebraic identities) that verify every formula.
//!
//! Start with the runnable programs in `examples/`; the `distillm2` binary
//! wraps the same library behind `distill`, `oracles`, `fig2`, `gen-data`
//! and `eval` subcommands.

pub mod autodiff;
pub mod checkpoint;
pub mod datagen;
pub mod divergence;
pub mod error;
pub mod lm;
pub mod schedule;

pub use error::{Error, Result};
