//! Operator deep Q-learning on finite MDPs.
//!
//! The crate learns the resolvent operator that maps a reward function to its
//! Q-function, so that a Q-function for an unseen reward is obtained by a single
//! forward pass. Exact tabular oracles (`mdp`) serve as ground truth for every
//! learned component.

pub mod bench;
pub mod data;
pub mod error;
pub mod eval;
pub mod learning;
pub mod mdp;
pub mod nn;
pub mod operator;
pub mod reward;

pub use error::{Error, Result};
