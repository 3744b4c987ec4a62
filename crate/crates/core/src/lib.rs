//! Similarity-regulated contrastive learning at desk scale.
//!
//! The crate pairs a contrastive training stack (losses with analytic
//! gradients, a similarity-based negative regulator, a two-encoder trainer
//! and retrieval evaluation) with exact mutual-information oracles on
//! discrete worlds that check the bounds the regulated loss relies on.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod eval;
pub mod losses;
pub mod miverify;
pub mod numerics;
pub mod regulator;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{info_nce, srcl, srcl_symmetric, Direction, LossConfig, LossOutput};
pub use numerics::{Matrix, Rng};
pub use regulator::{AlphaSchedule, RegulatorConfig, WeightMatrix};
pub use synth::{DiscreteJoint, PairBatch, World, WorldSpec};
