//! Reverse-mode automatic differentiation on a tape, sized exactly for this
//! model family: dense rank-1/2 tensors, the op set the forward pass needs,
//! Adam, a finite-difference gradient checker, and a deterministic RNG.

pub mod adam;
pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{clip_global_norm, global_grad_norm, Adam, AdamConfig};
pub use gradcheck::{grad_check_flat, GradCheckReport, LossBuilder, REL_ERR_FLOOR};
pub use rng::{derive_seed, fnv1a64, Rng};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
