//! Uncertainty-penalized RLHF on a synthetic prompt-echo task.
//!
//! The pipeline is supervised fine-tuning of a tiny transformer policy
//! ([`pipeline::sft_train`]), training a LoRA reward ensemble whose adapters
//! are pushed apart by a nuclear-norm diversity term ([`pipeline::rm_train`]),
//! then policy optimization against the ensemble mean penalized by ensemble
//! disagreement ([`rl::rl_train`]). A programmatic gold reward
//! ([`synthdata::gold_reward`]) measures what the learned proxy misses.
//!
//! Everything runs on the reverse-mode autodiff engine in [`numerics`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rl;
pub mod synthdata;

pub use error::{Error, Result};
