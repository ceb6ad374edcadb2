//! Deterministic 64-bit linear algebra, elementary functions, seeded
//! randomness and reverse-mode differentiation.

mod functions;
mod matrix;
mod rng;
pub mod tape;

pub use functions::{argmax, cosine, dot, norm, softmax};
pub use matrix::Matrix;
pub use rng::{SeededRng, RNG_ALGORITHM};
pub use tape::{grad, Gradients, Tape, Var};
