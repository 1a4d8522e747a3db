//! Sequential hard-attention scoring of large image tiles.
//!
//! An agent looks at a tile through a handful of two-scale glimpses, chosen one
//! after another by a stochastic location policy conditioned on a recurrent
//! memory and a coarse context view. Locations are trained with REINFORCE and a
//! running-mean baseline, an overlap penalty discourages revisiting regions, and
//! an ordinal regularizer penalizes far-off scores.

pub mod aggregate;
pub mod dataset;
pub mod error;
pub mod imaging;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod synthenv;
pub mod train;

pub use error::{Error, Result};
