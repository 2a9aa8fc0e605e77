//! Dense `f64` tensors, a reverse-mode tape, Adam, and seeded RNG streams.

mod adam;
mod graph;
pub mod rng;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Gradients, Graph, Var};
pub use rng::{derive_indexed, derive_seed, rng, Rng};
pub use tensor::{log_softmax, logsumexp, sigmoid, Tensor};
